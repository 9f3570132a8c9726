"""Exception types shared across the package.

Every recoverable failure mode raises a named subclass of DenseDescError so
callers can branch on the condition instead of parsing messages.  The CLI
maps a few of these to documented exit codes (see cli.py).
"""


class DenseDescError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(DenseDescError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class BehindCameraError(DenseDescError):
    """Point has non-positive camera-frame z; no projection exists."""


class InvalidDepthError(DenseDescError):
    """Depth value must be strictly positive."""


class NoDepthError(DenseDescError):
    """Query pixel has no depth measurement (depth == 0)."""


class OutOfBoundsError(DenseDescError):
    """Pixel lookup outside the image."""


class InsufficientOverlapError(DenseDescError):
    """Too few matches found between a pair of views; resample the pair."""


class EmptyMaskError(DenseDescError):
    """An operation required a non-empty mask."""


class InvalidDistributionError(DenseDescError):
    """Categorical weights are all zero or negative."""


class ShapeError(DenseDescError):
    """Array input does not have the expected shape or dtype."""


class NoMatchesError(DenseDescError):
    """Match loss evaluated on an empty match list."""


class NonFiniteGradientError(DenseDescError):
    """Optimizer received NaN/Inf gradients; the step was aborted."""


class NonFiniteLossError(DenseDescError):
    """Training loss became NaN/Inf; diagnostics were dumped."""


class EmptySearchRegionError(DenseDescError):
    """Best-match search mask contains no pixels."""


class EmptyCloudError(DenseDescError):
    """Point-cloud fusion produced no points."""


class TargetUnreachableError(DenseDescError):
    """No cloud point lies within the requested target radius."""


class NoFeasibleGraspError(DenseDescError):
    """All grasp candidates are in collision (CLI exit code 4)."""


class NoMatchError(DenseDescError):
    """Descriptor lookup found no valid match under the threshold (CLI exit code 3)."""
