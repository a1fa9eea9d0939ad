"""Exception types shared across the package.

Every error deliberately raised by library code derives from MetatuneError so
the command line layer can map failures to exit categories without matching
on message strings.
"""


class MetatuneError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MetatuneError):
    """Operands have incompatible shapes; the message names both shapes."""


class RankError(MetatuneError):
    """A tensor has the wrong rank for the requested operation."""


class EmptyPoolError(MetatuneError):
    """A pooling mask selects no positions."""


class VocabularyError(MetatuneError):
    """A token id falls outside the embedding table."""


class DegenerateVectorError(MetatuneError):
    """A vector with zero norm reached a cosine computation."""


class MembershipError(MetatuneError):
    """A prototype membership weight is not strictly positive."""


class ConfigError(MetatuneError):
    """A configuration value violates its contract."""


class StateError(MetatuneError):
    """An object is used before it was fitted or after required parts were removed."""


class LabelSpaceError(MetatuneError):
    """Data contains a class label the model head was not built for."""


class EvaluationError(MetatuneError):
    """An evaluation split is empty or otherwise unusable."""


class ParseError(MetatuneError):
    """A corpus or config line could not be parsed; the message carries the line number."""


class SchemaError(MetatuneError):
    """Data disagrees with the schema discovered from the training split."""


class SynthSpecError(MetatuneError):
    """A synthetic corpus specification is internally inconsistent."""


class CheckpointError(MetatuneError):
    """A checkpoint file is missing, truncated, or malformed."""
