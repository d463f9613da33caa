"""Exception hierarchy shared by all xdom modules."""


class XdomError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(XdomError, ValueError):
    """Invalid configuration or dataset settings."""


class PlacementError(XdomError, ValueError):
    """A shape placement does not fit inside the frame."""


class DataError(XdomError, ValueError):
    """Training data violates a precondition (labels, label-map sizes)."""


class InputError(XdomError, ValueError):
    """A function received an argument of the wrong shape or value."""


class TrainingError(XdomError, RuntimeError):
    """Optimisation diverged."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class CheckpointError(XdomError, OSError):
    """A checkpoint could not be read or has the wrong version."""


class ModeError(XdomError, ValueError):
    """A model of the wrong mode (k_class / k_plus_1) was supplied."""


class FittingError(XdomError, ValueError):
    """A scorer could not be fitted to the given data."""


class CapabilityError(XdomError, RuntimeError):
    """The backend cannot provide something the caller asked for."""


class DependencyError(XdomError, RuntimeError):
    """A pipeline stage was run before its prerequisites."""


class StaleArtifactError(XdomError, RuntimeError):
    """A prerequisite artifact was produced under a different configuration."""
