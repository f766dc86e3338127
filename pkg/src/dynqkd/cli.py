"""Command-line front end.

Exit codes: 0 success, 1 validation or calibration failure, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import CalibrationError, DynQkdError, ParseError, ValidationError
from .topology import topology_from_dict, validate

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_IO = 2


def _read(path: str) -> str:
    return Path(path).read_text(encoding="utf-8")


def _load_params(path: str | None):
    from .qkd import CalibratedParams

    if path is None:
        from .fixtures import default_calibration

        return default_calibration()
    return CalibratedParams.from_json(_read(path))


def cmd_run(args) -> int:
    from .engine import load_scenario, run

    scenario = load_scenario(args.scenario, seed=args.seed)
    result = run(scenario, _load_params(args.params))
    for path in result.write(args.out):
        print(path)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    from .qkd import calibrate, load_anchors, load_table3_csv

    params = calibrate(load_table3_csv(_read(args.table3)), load_anchors(_read(args.anchors)))
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(params.to_json() + "\n", encoding="utf-8")
    rep = params.report
    print(f"qber max |residual| {max(abs(v) for v in rep['qber_residual_pp'].values()):.3f} pp, "
          f"skr rms {rep['skr_rms_relative_error']:.3f}, anchor margin {rep['anchor_margin']:.3f}")
    print(out)
    return EXIT_OK


def cmd_preset(args) -> int:
    from .presets import emit_report, run_preset

    params = _load_params(args.params)
    for path in emit_report({args.name: run_preset(args.name, params)}, args.out):
        print(path)
    return EXIT_OK


def cmd_topology_validate(args) -> int:
    try:
        doc = json.loads(_read(args.file))
    except json.JSONDecodeError as exc:
        print(f"error: {args.file}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    topo = topology_from_dict(doc)
    violations = validate(topo)
    for v in violations:
        print(f"{v.severity}: {v.element}: {v.message}")
    if any(v.severity == "error" for v in violations):
        return EXIT_INVALID
    print(f"ok: {len(topo.nodes)} nodes, {len(topo.spans)} spans")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynqkd", description="Dynamic QKD network simulator")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario through the event engine")
    r.add_argument("--scenario", required=True)
    r.add_argument("--seed", type=int, default=None, help="overrides the scenario seed")
    r.add_argument("--out", required=True)
    r.add_argument("--params", default=None, help="calibrated parameter file (default: bundled)")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("calibrate", help="fit model parameters")
    c.add_argument("--table3", required=True)
    c.add_argument("--anchors", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("preset", help="evaluate a steady-state experiment preset")
    s.add_argument("name", choices=["table3", "fig4a", "fig4b", "fig4cd", "fig5"])
    s.add_argument("--params", default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preset)

    t = sub.add_parser("topology", help="topology utilities")
    tsub = t.add_subparsers(dest="topology_command", required=True)
    v = tsub.add_parser("validate")
    v.add_argument("file")
    v.set_defaults(func=cmd_topology_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run" and args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: seed must fit in an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CalibrationError, ValidationError, ParseError, DynQkdError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
