"""Exception types shared across the package."""


class NonFiniteError(FloatingPointError):
    """A computation produced NaN or Inf."""


class FullyMaskedRowError(ValueError):
    """A softmax row had no unmasked entry; the mask is malformed."""


class ManifestError(ValueError):
    """A corpus manifest is missing, malformed, or inconsistent."""


class CheckpointFormatError(ValueError):
    """A checkpoint file has a bad magic, version, or is truncated."""


class ConfigError(ValueError):
    """An unknown or ill-typed configuration key."""
