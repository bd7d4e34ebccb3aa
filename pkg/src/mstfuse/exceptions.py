"""Exception hierarchy shared across the package."""


class MstFuseError(Exception):
    """Base class for all package errors."""


class ConfigurationError(MstFuseError, ValueError):
    """Inputs or settings are inconsistent (dimensions, tolerances, keys)."""


class TopologyError(MstFuseError):
    """The network does not satisfy a structural requirement (e.g. connectivity)."""


class EstimationError(MstFuseError):
    """A local estimate could not be computed (e.g. singular Gram matrix)."""

    def __init__(self, message, node_id=None):
        super().__init__(message)
        self.node_id = node_id


class ProtocolError(MstFuseError):
    """A message-passing rule was violated."""


class GenerationError(MstFuseError):
    """Synthetic instance generation failed."""


class DiagnosticError(MstFuseError):
    """A statistical diagnostic could not be evaluated."""


class SelectionError(MstFuseError):
    """Tuning-parameter selection failed."""
