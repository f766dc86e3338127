"""Exception hierarchy shared by every subsystem."""


class DynQkdError(Exception):
    """Base class for all package errors."""


class ParseError(DynQkdError):
    pass


class ValidationError(DynQkdError):
    pass


class NoRoute(DynQkdError):
    pass


class UnderdeterminedError(DynQkdError):
    pass


class UncalibratedError(DynQkdError):
    pass


class CalibrationError(DynQkdError):
    pass


class InsufficientKeys(DynQkdError):
    pass


class DeviceMismatch(DynQkdError):
    pass


class DeviceBusy(DynQkdError):
    pass


class NotGenerating(DynQkdError):
    pass


class PortConflict(DynQkdError):
    pass


class StaleReport(DynQkdError):
    pass


class ScheduleError(DynQkdError):
    pass
