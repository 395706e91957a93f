"""Exception hierarchy shared across the tracking engine."""


class NavtraceError(Exception):
    """Base class for all engine errors."""


class BehindCamera(NavtraceError):
    """A point with non-positive depth was passed to the projection."""


class NoConvergence(NavtraceError):
    """Iterative distortion inversion failed to converge."""


class TooFewViews(NavtraceError):
    """Calibration needs at least three checkerboard views."""


class DegenerateViews(NavtraceError):
    """Board orientations too close to coplanar; intrinsics unobservable."""


class DivergedRefinement(NavtraceError):
    """Calibration refinement left the feasible region."""


class Diverged(NavtraceError):
    """Pose refinement produced a non-finite or unusable solution."""


class BadCorners(NavtraceError):
    """Detection corners violate the convexity/ordering convention."""


class ZeroDistance(NavtraceError):
    """Distance uncertainty is undefined for a zero translation."""


class EmptyInput(NavtraceError):
    """Fusion called with no estimates."""


class NonPositiveSigma(NavtraceError):
    """Inverse-variance weights need strictly positive sigmas."""


class FrameMismatch(NavtraceError):
    """Pose fusion inputs reference different tags or frames."""


class NoEstimates(NavtraceError):
    """Pose fusion called with an empty estimate list."""


class NoHeadTags(NavtraceError):
    """No head-tag estimates this frame; head tracking lost."""


class NoCoilTag(NavtraceError):
    """No coil-tag estimate this frame; coil tracking lost."""


class NoIntersection(NavtraceError):
    """Coil axis ray does not hit the head-model surface."""


class MissingPose(NavtraceError):
    """Target estimation requires both a head and a coil pose."""


class StreamMismatch(NavtraceError):
    """Detection and ground-truth streams do not share frame ids."""


class TagNeverVisible(UserWarning):
    """A configured tag was invisible for an entire simulation run."""
