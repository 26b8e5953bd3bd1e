"""Exception hierarchy shared across the toolkit."""


class ErrSimError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(ErrSimError):
    """Bad input data: manifests, error-model databases, configs, corpora."""


class EngineError(ErrSimError):
    """Failure while executing a graph or running a campaign experiment."""
