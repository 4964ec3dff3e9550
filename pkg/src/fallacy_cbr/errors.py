"""Exception hierarchy for the engine.

Every domain error raised by this package derives from :class:`CbrError`,
so callers (including the CLI) can distinguish domain failures from bugs.
"""


class CbrError(Exception):
    """Base class for all domain errors raised by this package."""


class ConfigError(CbrError):
    """A configuration value is out of range or inconsistent."""


class LabelParseError(CbrError):
    """A string could not be resolved to one of the known fallacy labels."""


class RowError(CbrError):
    """A dataset row is malformed (empty text, missing field, bad JSON)."""


class AugmentationError(CbrError):
    """A class cannot be balanced because it has no source cases."""


class UnsupportedKindError(CbrError):
    """The requested representation kind is not valid for this operation."""


class LeakageError(CbrError):
    """A demonstration response mentions one of the fallacy labels."""


class ClientError(CbrError):
    """The completion endpoint failed after all retries."""


class OfflineCacheMissError(CbrError):
    """Offline mode is active and the enrichment cache has no entry."""


class EncodeError(CbrError):
    """Text produced no tokens, so it cannot be encoded."""


class MissingEmbeddingError(CbrError):
    """A file-backed encoder has no record for the requested id."""


class MissingEnrichmentError(CbrError):
    """A case has no stored enrichment for the requested kind."""


class FormatError(CbrError):
    """A binary file failed header or payload validation."""


class DimError(CbrError):
    """Vector or matrix dimensions do not agree."""


class DegenerateVectorError(CbrError):
    """A zero vector was passed where a direction is required."""


class IndexMissingError(CbrError):
    """The case database has no embedding index for the requested kind."""


class MaskError(CbrError):
    """Every position is masked out, leaving nothing to attend to or pool."""


class CacheError(CbrError):
    """A backward pass received a cache from a mismatched forward pass."""


class NumericsError(CbrError):
    """A non-finite value appeared in a loss, gradient, or input."""


class ShapeError(CbrError):
    """Array arguments have incompatible lengths or an empty extent."""
