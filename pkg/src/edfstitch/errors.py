"""Exception hierarchy for the stitching pipeline.

Every failure mode that callers are expected to handle gets its own class so
the CLI can map them to stable exit codes.
"""

from __future__ import annotations


class StitchError(Exception):
    """Base class for all pipeline errors."""


class InsufficientMatches(StitchError):
    """Fewer correspondences (or inliers) than the estimator needs."""


class DegenerateGeometry(StitchError):
    """Epipolar geometry is ill-conditioned (planar scene, pure rotation,
    rank-deficient input, or failed cheirality vote).

    When raised by the RANSAC estimator because the inlier set is
    homography-consistent, ``homography`` and ``inlier_mask`` carry the
    fitted global homography and the inlier set so callers can fall back
    to homography stitching without re-estimating.
    """

    def __init__(self, message, homography=None, inlier_mask=None):
        super().__init__(message)
        self.homography = homography
        self.inlier_mask = inlier_mask


class DegeneratePlane(StitchError):
    """Plane passes through (or too close to) the first camera center."""


class ScaleMismatch(StitchError):
    """Rank-1 decomposition residual too large; inputs not on a common scale."""


class SingularSystem(StitchError):
    """Linear system is singular (collinear or duplicate spline centers)."""


class EpipoleAtInfinity(StitchError):
    """Epipole has no finite inhomogeneous form; the displacement-field
    parameterization is unusable and the caller must fall back."""


class ExcessiveGrid(StitchError):
    """Displacement grid would exceed the anchor-count guard."""


class ExcessiveCanvas(StitchError):
    """Output canvas would exceed the area cap; signals near-degenerate
    infinite homography."""


class EmptyOverlap(StitchError):
    """No usable overlap between the two sources for metric evaluation."""


class InvalidSize(StitchError):
    """Non-positive image dimensions."""


class InvalidSpec(StitchError):
    """Synthetic scene specification cannot be realized."""


class ParseError(StitchError):
    """Input file is malformed."""


class BoundsError(StitchError):
    """Match coordinates fall outside the declared image dimensions."""


class NoEvalPoints(StitchError):
    """No evaluation points available for the projectivity metric."""
