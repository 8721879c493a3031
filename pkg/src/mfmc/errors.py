"""Exception types shared across the package.

The CLI maps :class:`ValidationError` to exit code 1 and every other
failure to exit code 2.
"""


class MFMCError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(MFMCError, ValueError):
    """Input data, configuration or arguments violate a precondition."""


class FitError(MFMCError, RuntimeError):
    """A model could not be fitted on otherwise valid input."""
