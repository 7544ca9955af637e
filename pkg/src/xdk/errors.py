"""Exception types shared across the package."""


class XdkError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(XdkError, ValueError):
    """Operand shapes do not conform; message carries both shapes."""


class DomainError(XdkError, ValueError):
    """A numeric argument is outside its valid domain (eps <= 0, WER of 0, ...)."""


class ContractError(XdkError, ValueError):
    """A documented precondition was violated by the caller."""


class OracleError(XdkError, RuntimeError):
    """A test oracle cannot vouch for its result (non-determinism, scope guard)."""


class FormatError(XdkError, ValueError):
    """A binary or text artifact is malformed or truncated."""


class CompatibilityError(XdkError, ValueError):
    """An artifact was produced against a different base model."""


class DivergedRunError(XdkError, RuntimeError):
    """Training produced a non-finite loss; message names the step."""
