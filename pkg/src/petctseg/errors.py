"""Exception hierarchy shared by all petctseg modules.

The CLI maps ConfigError and ValidationError to exit code 1 (bad input),
everything else derived from PetctsegError to exit code 2 (runtime failure).
"""


class PetctsegError(Exception):
    """Base class for all petctseg errors."""


class ConfigError(PetctsegError):
    """Invalid configuration value or inconsistent run setup."""


class ValidationError(PetctsegError):
    """Domain object violates a structural invariant."""


class FormatError(PetctsegError):
    """File exists but its content cannot be parsed."""


class ShapeError(PetctsegError):
    """Array shape does not match what the operation requires."""


class GeometryError(PetctsegError):
    """Grids or physical extents are incompatible."""


class EmptyForegroundError(PetctsegError):
    """No foreground voxels available where at least one is required."""


class DegenerateCorpusError(PetctsegError):
    """Corpus statistics are unusable (zero variance)."""


class SelectionError(PetctsegError):
    """Hard-sample selection rule cannot be satisfied."""


class GenerationError(PetctsegError):
    """Synthetic study generation cannot satisfy its constraints."""
