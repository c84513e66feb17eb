"""Exception hierarchy shared across the toolkit."""


class LayersynthError(Exception):
    """Base class for all toolkit errors."""


class ContractError(LayersynthError):
    """An operation was invoked with arguments violating its contract."""


class ConfigurationError(LayersynthError):
    """A configuration is inconsistent or requests an unsupported combination."""


class ResourceError(LayersynthError):
    """A requested construction would exceed a configured resource budget."""


class InfeasibleError(LayersynthError):
    """A similarity quantification or gain requirement cannot be met."""


class PartialModelError(LayersynthError):
    """Waypoint construction hit its augmentation cap before strong connectivity.

    Carries the largest strongly connected sub-model so callers that can live
    with reduced coverage may continue soundly.
    """

    def __init__(self, message, partial_model=None, diagnostics=None):
        super().__init__(message)
        self.partial_model = partial_model
        self.diagnostics = diagnostics or {}
