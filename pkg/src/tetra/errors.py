"""Exception types shared across the package."""


class DataFormatError(Exception):
    """A serialized artifact (weight file, tensor file, embedding file,
    ground-truth file) is malformed, truncated, or corrupt."""


class NumericError(RuntimeError):
    """A numeric invariant was violated at runtime (NaN loss, overflow bound)."""
