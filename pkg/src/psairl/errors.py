"""Exception types raised across the package.

Each class carries a distinct CLI exit code so scripted pipelines can tell
failure kinds apart without parsing messages.
"""


class PsairlError(Exception):
    exit_code = 10


class MalformedInput(PsairlError, ValueError):
    exit_code = 11


class InvariantViolation(PsairlError, ValueError):
    exit_code = 12


class UnknownIntersection(PsairlError, KeyError):
    exit_code = 13


class InconsistentFlow(PsairlError, ValueError):
    exit_code = 14


class MissingAction(PsairlError, KeyError):
    exit_code = 15


class NonFiniteAction(PsairlError, ValueError):
    exit_code = 16


class UnknownVehicle(PsairlError, KeyError):
    exit_code = 17


class DimensionMismatch(PsairlError, ValueError):
    exit_code = 18


class OutOfSupport(PsairlError, ValueError):
    exit_code = 19


class EmptyClass(PsairlError, ValueError):
    exit_code = 20


class NonFiniteLoss(PsairlError, FloatingPointError):
    exit_code = 21

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class EmptyBuffer(PsairlError, ValueError):
    exit_code = 22


class NonFinite(PsairlError, FloatingPointError):
    exit_code = 23


class HorizonMismatch(PsairlError, ValueError):
    exit_code = 24


class EmptySet(PsairlError, ValueError):
    exit_code = 25


class UnknownCommand(PsairlError):
    exit_code = 2


class BadConfig(PsairlError, ValueError):
    exit_code = 3
