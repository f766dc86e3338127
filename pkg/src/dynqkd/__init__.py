"""Switched, trusted-node-free DV-QKD metro network: physics, control plane and simulator."""

__version__ = "0.1.0"
