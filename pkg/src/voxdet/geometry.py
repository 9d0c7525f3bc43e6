"""Axis-aligned 3D box algebra in continuous voxel coordinates.

Conventions used throughout the toolkit:

* Axis order is ``(z, y, x)``; ``z`` is the slice axis.
* A box spans the half-open interval ``[min_i, max_i)`` on every axis, so
  a box with integer corners covers exactly the voxels whose indices fall
  inside it. Whether annotations snap corners to voxel boundaries or
  centers is a dataset choice; this library only fixes the half-open
  boundary rule.
* Dimension names map to axes as ``w = x extent``, ``h = y extent``,
  ``d = z extent`` (depth is the slice axis).
* All arithmetic is double precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

Vec3 = tuple[float, float, float]

_AXES = ("z", "y", "x")


def _as_vec3(value, name: str) -> Vec3:
    try:
        z, y, x = value
    except (TypeError, ValueError):
        raise ValueError(f"{name} must be a 3-vector, got {value!r}") from None
    vec = (float(z), float(y), float(x))
    if not all(math.isfinite(c) for c in vec):
        raise ValueError(f"{name} must be finite, got {vec}")
    return vec


@dataclass(frozen=True)
class Box3:
    """Axis-aligned box ``[min, max)`` in (z, y, x) voxel coordinates.

    Extents must be strictly positive on every axis. Degenerate boxes are
    rejected at construction rather than clamped, because every downstream
    loss formula divides by extents.
    """

    min: Vec3
    max: Vec3

    def __post_init__(self):
        object.__setattr__(self, "min", _as_vec3(self.min, "min"))
        object.__setattr__(self, "max", _as_vec3(self.max, "max"))
        for lo, hi, axis in zip(self.min, self.max, _AXES):
            if not lo < hi:
                raise ValueError(
                    f"box has non-positive {axis} extent: [{lo}, {hi})"
                )

    @classmethod
    def from_array(cls, arr) -> "Box3":
        """Build from a flat ``[z1, y1, x1, z2, y2, x2]`` sequence."""
        a = np.asarray(arr, dtype=np.float64).reshape(6)
        return cls((a[0], a[1], a[2]), (a[3], a[4], a[5]))

    @classmethod
    def from_center_size(cls, center, size) -> "Box3":
        c = _as_vec3(center, "center")
        s = _as_vec3(size, "size")
        lo = tuple(ci - 0.5 * si for ci, si in zip(c, s))
        hi = tuple(ci + 0.5 * si for ci, si in zip(c, s))
        return cls(lo, hi)

    def to_array(self) -> np.ndarray:
        return np.array(self.min + self.max, dtype=np.float64)

    @property
    def extents(self) -> Vec3:
        return tuple(hi - lo for lo, hi in zip(self.min, self.max))

    @property
    def center(self) -> Vec3:
        return tuple(0.5 * (lo + hi) for lo, hi in zip(self.min, self.max))

    def contains_point(self, point, strict: bool = False) -> bool:
        p = _as_vec3(point, "point")
        if strict:
            return all(lo < c < hi for lo, c, hi in zip(self.min, p, self.max))
        return all(lo <= c < hi for lo, c, hi in zip(self.min, p, self.max))

    def contains_box(self, other: "Box3") -> bool:
        return all(so >= s and eo <= e
                   for so, s, eo, e in zip(other.min, self.min, other.max, self.max))


@dataclass(frozen=True)
class VolumeMeta:
    """Grid shape plus anisotropic physical voxel spacing.

    ``shape`` and ``spacing_mm`` follow the (z, y, x) axis order.
    """

    shape: tuple[int, int, int]
    spacing_mm: Vec3

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if len(shape) != 3 or any(s < 1 for s in shape):
            raise ValueError(f"shape must be three integers >= 1, got {self.shape!r}")
        object.__setattr__(self, "shape", shape)
        spacing = _as_vec3(self.spacing_mm, "spacing_mm")
        if any(s <= 0 for s in spacing):
            raise ValueError(f"spacing_mm must be positive, got {spacing}")
        object.__setattr__(self, "spacing_mm", spacing)

    def physical_volume_cm3(self, box: Box3) -> float:
        return physical_volume_cm3(box, self.spacing_mm)


def physical_volume_cm3(box: Box3, spacing_mm) -> float:
    """Voxel volume scaled by the per-axis spacing, in cm^3."""
    sz, sy, sx = _as_vec3(spacing_mm, "spacing_mm")
    return volume(box) * sz * sy * sx / 1000.0


def volume(box: Box3) -> float:
    """Product of the three extents (voxel units)."""
    ez, ey, ex = box.extents
    return ez * ey * ex


def intersection_volume(a: Box3, b: Box3) -> float:
    """Overlap volume of two boxes; 0.0 when they are disjoint or touch."""
    v = 1.0
    for i in range(3):
        lo = max(a.min[i], b.min[i])
        hi = min(a.max[i], b.max[i])
        if hi <= lo:
            return 0.0
        v *= hi - lo
    return v


def iou(a: Box3, b: Box3) -> float:
    """Intersection over union, symmetric, in [0, 1]."""
    inter = intersection_volume(a, b)
    if inter == 0.0:
        return 0.0
    return inter / (volume(a) + volume(b) - inter)


def enclosing_box(a: Box3, b: Box3) -> Box3:
    """Smallest box containing both inputs."""
    lo = tuple(min(x, y) for x, y in zip(a.min, b.min))
    hi = tuple(max(x, y) for x, y in zip(a.max, b.max))
    return Box3(lo, hi)


def center_distance_sq(a: Box3, b: Box3) -> float:
    """Squared Euclidean distance between the two box centers."""
    ca, cb = a.center, b.center
    return sum((x - y) ** 2 for x, y in zip(ca, cb))


def aspect_term(pred: Box3, gt: Box3) -> float:
    """Consistency penalty over the three orthogonal-plane aspect ratios.

    Sums the squared arctangent differences of w/h, h/d and d/w between
    the two boxes and scales by 4/pi^2, giving a value in [0, 3). The term
    is invariant under uniform scaling of either box and zero when all
    three ratios agree.
    """
    pd, ph, pw = pred.extents
    gd, gh, gw = gt.extents
    t1 = math.atan(gw / gh) - math.atan(pw / ph)
    t2 = math.atan(gh / gd) - math.atan(ph / pd)
    t3 = math.atan(gd / gw) - math.atan(pd / pw)
    return (4.0 / math.pi**2) * (t1 * t1 + t2 * t2 + t3 * t3)


# ---------------------------------------------------------------------------
# Array helpers shared by the batch-oriented modules (matching, nms, metrics).
# Rows are flat corner boxes [z1, y1, x1, z2, y2, x2].
# ---------------------------------------------------------------------------

def boxes_to_array(boxes: Iterable[Box3]) -> np.ndarray:
    rows = [b.min + b.max for b in boxes]
    if not rows:
        return np.empty((0, 6), dtype=np.float64)
    return np.array(rows, dtype=np.float64)


def array_to_boxes(arr) -> list[Box3]:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 6:
        raise ValueError(f"expected an (N, 6) array, got shape {a.shape}")
    return [Box3((r[0], r[1], r[2]), (r[3], r[4], r[5])) for r in a]


def volumes_of(arr) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    return (a[:, 3] - a[:, 0]) * (a[:, 4] - a[:, 1]) * (a[:, 5] - a[:, 2])


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between two (N, 6) / (M, 6) corner-box arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    lo = np.maximum(a[:, None, :3], b[None, :, :3])
    hi = np.minimum(a[:, None, 3:], b[None, :, 3:])
    ov = np.clip(hi - lo, 0.0, None)
    inter = ov[..., 0] * ov[..., 1] * ov[..., 2]
    union = volumes_of(a)[:, None] + volumes_of(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=inter > 0)
    return out
