"""Exception hierarchy shared by every module.

The CLI maps each class to a distinct exit code, so raise the most specific
one that applies.
"""


class MsStyleError(Exception):
    """Base class for all package errors."""


class InvalidInputError(MsStyleError, ValueError):
    """Malformed user data: empty waveform, non-finite samples, bad file."""


class ContractError(MsStyleError, ValueError):
    """A caller violated an operation's precondition."""


class InvariantError(MsStyleError):
    """A data object failed its structural invariants."""


class MissingInputError(MsStyleError, FileNotFoundError):
    """A required file (audio, alignment, checkpoint) does not exist."""

    def __init__(self, path, what="input"):
        self.path = str(path)
        super().__init__(f"missing {what}: {self.path}")


class ExternalDependencyError(MsStyleError, RuntimeError):
    """An external plug-in (e.g. a semantic embedding server) failed."""


class NumericFailure(MsStyleError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
