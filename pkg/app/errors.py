"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI returns for it and a short
``kind`` string used in the machine-readable error JSON on stderr.
"""


class ConfitError(Exception):
    """Base class; generic failures exit with 1."""

    exit_code = 1
    kind = "error"

    def to_json(self):
        return {"error": self.kind, "message": str(self), "exit_code": self.exit_code}


# -- configuration (exit 2) -------------------------------------------------

class ConfigError(ConfitError):
    exit_code = 2
    kind = "config"


class SpecError(ConfigError):
    """A dataset specification describes degenerate data."""

    kind = "spec"


class SetupError(ConfigError):
    """A theory instance violates its construction preconditions."""

    kind = "setup"


# -- data and files (exit 3) ------------------------------------------------

class DataError(ConfitError):
    exit_code = 3
    kind = "data"


class CorruptFileError(DataError):
    kind = "corrupt_file"


class ChecksumError(DataError):
    kind = "checksum"


class VersionMismatchError(DataError):
    kind = "version_mismatch"


class MissingPathError(ConfitError):
    exit_code = 6
    kind = "missing_path"


class UsageError(ConfitError):
    """Unknown CLI flags, or an API called out of order (e.g. a stale backward cache)."""

    exit_code = 64
    kind = "usage"


# -- numeric shapes -----------------------------------------------------------

class ShapeError(ConfitError):
    kind = "shape"


class StrideError(ShapeError):
    kind = "stride"


class DecompositionError(ShapeError):
    kind = "decomposition"


class DegenerateBatchError(ShapeError):
    kind = "degenerate_batch"


class NumericError(ConfitError):
    kind = "numeric"


# -- model state ------------------------------------------------------------

class StateError(ConfitError):
    kind = "state"


class BankFrozenError(StateError):
    kind = "bank_frozen"


class RecoveryError(StateError):
    kind = "recovery"


class StaleRecoveryError(StateError):
    kind = "stale_recovery"


class MissingBankError(StateError):
    kind = "missing_bank"


class DuplicateTaskError(StateError):
    kind = "duplicate_task"


# -- evaluation ---------------------------------------------------------------

class MetricError(ConfitError):
    kind = "metric"


class DiagnosticError(ConfitError):
    kind = "diagnostic"


class VerificationFailure(ConfitError):
    exit_code = 4
    kind = "verification_failure"


class TheoryBoundViolation(ConfitError):
    exit_code = 5
    kind = "theory_bound_violation"
