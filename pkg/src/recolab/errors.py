"""Exception hierarchy shared across the package."""


class RecoLabError(Exception):
    """Base class for every package-specific error."""


class ZeroVectorError(RecoLabError):
    """A pixel embedding has (near-)zero norm and cannot be normalized."""


class EmptyClassError(RecoLabError):
    """An operation required pixels of a class that has none."""


class SingleClassError(RecoLabError):
    """A batch exposes only one active class, so no negatives exist."""


class DimensionMismatchError(RecoLabError):
    """Embedding dimensions of queries/keys/means disagree."""


class EmptyNegativesError(RecoLabError):
    """A query class has no negative keys at all."""


class EmptyPoolError(RecoLabError):
    """Every negative class in a key pool is empty."""


class ShapeMismatchError(RecoLabError):
    """Tensor shapes are inconsistent with the model configuration."""


class AllIgnoredError(RecoLabError):
    """Every pixel of a labelled batch carries the ignore value."""


class UnsatisfiableError(RecoLabError):
    """No image sequence can satisfy the partition constraints."""


class ConfigError(RecoLabError):
    """A run configuration failed validation."""


class DataError(RecoLabError):
    """Dataset files are missing, malformed, or inconsistent."""
