# Exceptions raised by panotool
# The CLI maps them onto exit codes, see `panotool.cli`.

class ConfigError(ValueError):
    """Invalid configuration: window geometry, encoder, mining or training parameters."""

class MismatchError(ConfigError):
    """An index artifact does not match the flags it is queried with."""

class FormatError(ValueError):
    """Malformed manifest, embedding file or image."""

class UnusableQueryError(ValueError):
    """A training query has no database panorama within the positive radius."""

class EvaluationError(ValueError):
    """A query cannot be scored, e.g. it has no geo tag or no result."""

class TrainingError(RuntimeError):
    """Training cannot proceed, e.g. no usable triplet was mined."""
