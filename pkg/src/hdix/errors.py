"""Exception hierarchy. Everything raised on bad data derives from HdixError."""


class HdixError(Exception):
    """Base class for data errors (unreadable input, degenerate estimators)."""


class ImageLoadError(HdixError):
    pass


class FixtureError(HdixError, ValueError):
    pass


class EstimatorError(HdixError, ValueError):
    """A fractal estimator cannot produce a dimension for its input."""


class IndexFormatError(HdixError):
    """Index file is truncated, has the wrong magic, or an unsupported version."""
