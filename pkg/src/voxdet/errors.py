"""Exception types shared across the toolkit.

Every domain error derives from :class:`VoxdetError` so the CLI can map
them to a single non-zero exit code while programmatic callers catch the
specific class they care about.
"""


class VoxdetError(Exception):
    """Base class for all domain errors raised by this package."""


class VolumeTooSmall(VoxdetError):
    """A pyramid level would produce an empty feature map for this volume."""


class ConfigMissing(VoxdetError):
    """Anchor generation was requested without an anchor family."""


class DegenerateCluster(VoxdetError):
    """Anchor fitting could not keep every cluster populated."""


class NonDifferentiablePoint(VoxdetError):
    """Gradient check requested at a kink of the loss surface."""


class DuplicateScanId(VoxdetError):
    """The same scan identifier appeared twice in one evaluation input."""


class ZeroGroundTruth(VoxdetError):
    """A metric that divides by the ground-truth count got zero of them."""


class ShapeMismatch(VoxdetError):
    """Batched arrays disagree in length or do not have six columns."""


class NonPositiveSize(VoxdetError):
    """A box parameterization row carries a size component <= 0."""


class HeaderMismatch(VoxdetError):
    """Volume file header is malformed or disagrees with the payload."""


class TruncatedPayload(VoxdetError):
    """Volume file payload is shorter than the header promises."""


class UnsupportedDtype(VoxdetError):
    """Volume file declares a dtype outside the supported set."""


class MalformedBox(VoxdetError):
    """A serialized box violates min < max on some axis."""


class MissingField(VoxdetError):
    """A structured document lacks a required field."""
