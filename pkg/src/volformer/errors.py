"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError/UsageError -> 2,
DataError/FormatError -> 3. Verification failures are reported values,
not exceptions.
"""


class VolformerError(Exception):
    pass


class ShapeMismatchError(VolformerError, ValueError):
    """Operand extents are incompatible for the requested op."""


class ConfigError(VolformerError, ValueError):
    """A model / optimizer configuration violates an invariant."""


class UsageError(VolformerError, RuntimeError):
    """An op was called outside its contract (non-scalar loss, bad labels...)."""


class DataError(VolformerError, ValueError):
    """Input data violates a precondition (e.g. out-of-range label)."""


class FormatError(VolformerError, ValueError):
    """A serialized artifact (checkpoint, config file) is malformed."""
