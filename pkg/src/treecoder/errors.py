"""Exception hierarchy shared across the package."""


class TreecoderError(Exception):
    """Base class for every error raised by this package."""


class AddressingError(TreecoderError):
    pass


class ValidationError(TreecoderError, ValueError):
    """A domain value violates one of its invariants."""


class ConfigurationError(TreecoderError):
    pass


# -- llm gateway --------------------------------------------------------------

class BackendError(TreecoderError):
    pass


class TransportError(BackendError):
    """Retryable failure talking to a remote backend."""


class FixtureExhaustedError(BackendError):
    pass


class TokenOverflowError(BackendError):
    pass


class PriceTableError(TreecoderError):
    pass


# -- agents -------------------------------------------------------------------

class GrammarError(TreecoderError):
    """Agent output does not conform to the role's output grammar."""

    def __init__(self, message: str, block: str | None = None):
        super().__init__(message)
        self.block = block


class DecompositionError(TreecoderError):
    pass


class FunctionDraftError(TreecoderError):
    pass


class AssemblyError(TreecoderError):
    pass


class RetryBudgetError(TreecoderError):
    pass


# -- sandbox / evaluation -----------------------------------------------------

class SandboxEnvironmentError(TreecoderError):
    """The execution backend itself is unusable (distinct from script failure)."""


class FixtureError(TreecoderError):
    """A benchmark fixture is malformed or its sample solution is broken."""


class ComparisonError(TreecoderError):
    pass


class KnowledgeBaseError(TreecoderError):
    pass


class PoolError(TreecoderError):
    pass
