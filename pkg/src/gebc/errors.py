"""Exception hierarchy. The CLI maps each family onto an exit code."""


class GEBCError(Exception):
    pass


class ConfigError(GEBCError):
    """Bad or unknown configuration values."""


class DataError(GEBCError):
    """Input files that are missing, malformed, or inconsistent."""


class AnnotationError(DataError):
    pass


class FeatureError(DataError):
    pass


class NumericError(GEBCError):
    """Non-finite values during training or inference."""
