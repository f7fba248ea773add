"""Exception types shared across the package."""


class PwoodError(Exception):
    """Base class for all library errors."""


class SingularCovariance(PwoodError):
    """Covariance too degenerate for a stable Gaussian computation."""


class InvalidTarget(PwoodError):
    """A regression target violates its preconditions (e.g. non-positive size)."""


class NoPoints(PwoodError):
    """Voronoi labeling requested with an empty point set."""


class NoMarkers(PwoodError):
    """Watershed requested without any foreground marker."""


class EmptyBasin(PwoodError):
    """No cell carries the requested basin label."""


class DegenerateScores(PwoodError):
    """Score set too degenerate for a mixture fit (all equal or fewer than 2)."""


class ShapeMismatch(PwoodError):
    """Array shapes disagree with the detector/parameter layout."""


class SpecInfeasible(PwoodError):
    """Scene generation could not place a single object under the constraints."""


class ConfigInvalid(PwoodError):
    """A run configuration failed validation."""


class EmptyFile(PwoodError):
    """An input file contained no lines at all."""
