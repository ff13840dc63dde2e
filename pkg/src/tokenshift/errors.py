"""Exception types raised across the toolkit."""

from __future__ import annotations


class TokenShiftError(Exception):
    """Base class for every error the toolkit raises on purpose."""


class AllZeroMass(TokenShiftError, ValueError):
    pass


class AbsoluteContinuityViolation(TokenShiftError, ValueError):
    pass


class SpecInvalid(TokenShiftError, ValueError):
    pass


class ParseError(TokenShiftError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(ParseError):
    pass


class PrefixNotRecorded(TokenShiftError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else ""


class EmptyInput(TokenShiftError, ValueError):
    pass


class NoQualifyingPositions(TokenShiftError, ValueError):
    pass


class DegenerateInput(TokenShiftError, ValueError):
    pass


class InstanceTooLarge(TokenShiftError, ValueError):
    pass


class HypothesisViolated(TokenShiftError):
    def __init__(self, message: str, histories: list | None = None):
        self.histories = list(histories or [])
        super().__init__(message)


class GroupDegenerate(TokenShiftError, ValueError):
    pass


class NonPositiveRatio(TokenShiftError, ValueError):
    pass


class LengthMismatch(TokenShiftError, ValueError):
    pass


class ScheduleInvalid(TokenShiftError, ValueError):
    pass
