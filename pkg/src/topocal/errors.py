"""Exception types raised across the package."""


class TopocalError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(TopocalError, ValueError):
    """A camera or configuration parameter is outside its valid range."""


class InvalidInputError(TopocalError, ValueError):
    """Array shapes, dimensions or indices do not agree."""


class InvalidSpecError(TopocalError, ValueError):
    """A sampling grid or dataset request cannot be satisfied."""


class DegenerateHomographyError(TopocalError, ValueError):
    """A homography is singular or cannot be normalized."""


class EmptyDictionaryError(TopocalError, ValueError):
    """Matching was requested against a dictionary with no entries."""
