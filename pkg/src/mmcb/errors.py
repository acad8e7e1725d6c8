"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors exit 2, data errors 3,
checkpoint lineage errors 4.
"""


class MMCBError(Exception):
    """Base class for all package errors."""


class ShapeError(MMCBError):
    """Operands with incompatible shapes. Message names the op and both shapes."""


class NonFiniteError(MMCBError):
    """NaN or Inf encountered at an op boundary."""


class DataError(MMCBError):
    """Malformed dataset file or record."""


class LineageError(MMCBError):
    """Checkpoint does not come from the stage required by the caller."""


class IntegrityError(MMCBError):
    """Checkpoint file is corrupt (checksum or framing failure)."""


class MigrationError(MMCBError):
    """Checkpoint format version is not supported by this build."""


class NonDeterministicError(MMCBError):
    """A function expected to be deterministic returned differing values."""
