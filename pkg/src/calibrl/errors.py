"""Exception types shared across the package.

The CLI maps ``ValidationError`` to exit code 2 and ``DiagnosticError`` to 3.
"""


class ValidationError(ValueError):
    """Bad input: config values, shapes, or structurally invalid sequences."""


class DiagnosticError(RuntimeError):
    """A computation could not proceed (non-finite loss, no eligible cases)."""

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.context = context
