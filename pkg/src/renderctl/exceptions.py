"""Exception types raised across the package."""


class RenderctlError(Exception):
    """Base class for all package errors."""


class ValidationError(RenderctlError, ValueError):
    """Malformed user input: shapes, masks, configs, presets."""


class DomainError(RenderctlError, ValueError):
    """A query outside the domain of a function (out-of-bounds point, non-unit direction)."""


class ConfigurationError(RenderctlError, ValueError):
    """Incompatible component configuration, e.g. latent code width mismatch."""


class DegenerateNormalError(RenderctlError, ArithmeticError):
    """SDF gradient too small to define a surface normal."""


class TrainingError(RenderctlError, RuntimeError):
    """Training diverged (NaN loss) or failed to reach its convergence threshold.

    ``report`` carries whatever diagnostics were collected before the failure.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report or {}


class GeometryMutationError(RenderctlError, RuntimeError):
    """Frozen geometry parameters changed during a stage that must not touch them."""
