"""
Exception hierarchy for psfa.

Every error carries the process exit code the CLI returns for it:
1 usage error, 2 data error, 3 numeric failure.
"""


class PsfaError(Exception):
    """Base class for all psfa errors"""
    exit_code = 2


# ----- usage / configuration -----

class UsageError(PsfaError):
    exit_code = 1


class ConfigError(UsageError):
    """Unknown or malformed run-configuration key"""


class InvalidParameter(UsageError, ValueError):
    """A parameter violates an operation's precondition"""


# ----- data -----

class DataError(PsfaError):
    exit_code = 2


class BadMagic(DataError):
    pass


class UnsupportedVersion(DataError):
    pass


class TruncatedFile(DataError):
    pass


class NonFiniteValue(DataError):
    pass


class CsvParseError(DataError):
    pass


class DimensionError(DataError, ValueError):
    pass


DimensionMismatch = DimensionError


class ZeroVariance(DataError):
    pass


# ----- numeric -----

class NumericError(PsfaError, ArithmeticError):
    exit_code = 3


class NotPositiveDefinite(NumericError):
    pass


class DomainError(NumericError, ValueError):
    pass


class SingularInitialization(NumericError):
    pass


class NonPositiveRate(NumericError):
    """A Gamma rate came out non-positive; indicates an upstream moment bug"""


class NonFinite(NumericError):
    pass


class SingularReference(NumericError):
    pass


class AllRestartsFailed(NumericError):
    def __init__(self, failures):
        self.failures = list(failures)
        detail = "; ".join(f"restart {i}: {msg}" for i, msg in self.failures)
        super().__init__(f"all {len(self.failures)} restarts failed ({detail})")
