"""Exception types shared across the package."""


class NserError(Exception):
    """Base class for all package errors."""


class ConfigError(NserError):
    pass


class NonPositiveDepth(NserError):
    """A point lies behind (or on) the camera plane."""


class TargetNotVisible(NserError):
    pass


class EmptyMask(NserError):
    pass


class DegenerateHint(NserError):
    pass


class DegenerateMask(NserError):
    pass


class ShapeMismatch(NserError):
    pass


class AmbiguousAssignment(NserError):
    """OBB corners do not split 2/2 between the front and back centroids."""


class SingularInteraction(NserError):
    """The stacked interaction matrix is too ill-conditioned to invert."""


class DegenerateQuad(NserError):
    pass


class EpisodeTooShort(NserError):
    pass


class EmptyDataset(NserError):
    pass


class WeightsMismatch(NserError):
    """Serialized weights do not match the requested architecture."""
