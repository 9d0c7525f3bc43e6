"""Label-map to box extraction and the annotation-noise simulator.

``mask_to_boxes`` derives one tight bounding box per connected component
of each positive label value, under 6- or 26-connectivity (26 is the
default; diagonal-touching lesions then merge into one object).

``corrupt_boxes`` reproduces four annotation error regimes on a list of
boxes, fully driven by a seeded generator:

* ``shrink``: every axis extent is rescaled by an independent uniform
  factor in [1 - magnitude, 1], center preserved.
* ``enlarge``: factors in [1, 1 + magnitude], center preserved.
* ``shift``: the center moves per axis by an independent signed uniform
  fraction of that axis extent, up to magnitude; size preserved.
* ``drop``: boxes below the small size bin are removed with the first
  rate, boxes between the bins with the second rate.

Per box, random draws happen in input order and per axis in (z, y, x)
order, so a fixed seed reproduces results bit for bit. When several
volumes are corrupted under one experiment seed, derive the per-volume
seed as ``seed + scan_index``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import Box3, VolumeMeta, iou, physical_volume_cm3

NOISE_MODES = ("shrink", "enlarge", "shift", "drop")

MIN_EXTENT_VOXELS = 1.0


@dataclass
class LabelMap:
    """Dense integer voxel grid: 0 background, positive values foreground."""

    meta: VolumeMeta
    grid: np.ndarray

    def __post_init__(self):
        grid = np.asarray(self.grid)
        if not np.issubdtype(grid.dtype, np.integer):
            raise ValueError(f"label grid must be integer, got {grid.dtype}")
        if tuple(grid.shape) != self.meta.shape:
            raise ValueError(
                f"grid shape {grid.shape} does not match meta shape {self.meta.shape}"
            )
        self.grid = grid


@dataclass(frozen=True)
class ComponentBox:
    """Tight box around one connected component, with its voxel count."""

    box: Box3
    label: int
    voxel_count: int


def _structure(connectivity: int) -> np.ndarray:
    from scipy import ndimage

    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def mask_to_boxes(label_map: LabelMap, connectivity: int = 26) -> list[ComponentBox]:
    """Tight half-open boxes of all connected foreground components.

    Components are computed per positive label value, so two touching
    objects with different labels stay separate. Output order is by label
    value, then component in scan order.
    """
    from scipy import ndimage

    structure = _structure(connectivity)
    grid = label_map.grid
    out: list[ComponentBox] = []
    for value in np.unique(grid):
        if value <= 0:
            continue
        mask = grid == value
        labeled, n = ndimage.label(mask, structure=structure)
        objects = ndimage.find_objects(labeled)
        counts = np.bincount(labeled.ravel(), minlength=n + 1)
        for comp in range(1, n + 1):
            sl = objects[comp - 1]
            lo = tuple(float(s.start) for s in sl)
            hi = tuple(float(s.stop) for s in sl)
            out.append(ComponentBox(Box3(lo, hi), int(value), int(counts[comp])))
    return out


@dataclass(frozen=True)
class NoiseSpec:
    """Parameters of one corruption mode.

    ``magnitude`` is the uniform sampling bound for shrink/enlarge/shift.
    ``drop_rates`` are removal probabilities for boxes under the first and
    second entry of ``drop_bins_cm3`` respectively.
    """

    mode: str
    magnitude: float = 0.0
    drop_rates: tuple[float, float] = (0.2, 0.1)
    drop_bins_cm3: tuple[float, float] = (1.0, 10.0)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in NOISE_MODES:
            raise ValueError(f"mode must be one of {NOISE_MODES}, got {self.mode!r}")
        if not 0.0 <= self.magnitude < 1.0:
            raise ValueError(f"magnitude must be in [0, 1), got {self.magnitude}")
        rates = tuple(float(r) for r in self.drop_rates)
        if any(not 0.0 <= r <= 1.0 for r in rates):
            raise ValueError(f"drop rates must be probabilities, got {rates}")
        bins = tuple(float(b) for b in self.drop_bins_cm3)
        if not 0.0 < bins[0] < bins[1]:
            raise ValueError(f"drop bins must be positive ascending, got {bins}")
        object.__setattr__(self, "drop_rates", rates)
        object.__setattr__(self, "drop_bins_cm3", bins)


@dataclass
class NoiseResult:
    """Corrupted boxes plus bookkeeping of what the corruption did."""

    boxes: list[Box3]
    kept_indices: list[int]
    mean_iou: float | None  # vs originals, over surviving boxes
    clamped: int            # extents held at the 1-voxel minimum
    dropped: int


def _rescale(box: Box3, factors) -> tuple[Box3, int]:
    center = box.center
    new_ext = []
    clamped = 0
    for ext, f in zip(box.extents, factors):
        e = ext * f
        floor = min(MIN_EXTENT_VOXELS, ext)
        if e < floor:
            e = floor
            clamped = 1
        new_ext.append(e)
    return Box3.from_center_size(center, new_ext), clamped


def corrupt_boxes(boxes: Sequence[Box3], spec: NoiseSpec,
                  spacing_mm=None) -> NoiseResult:
    """Apply one corruption mode to every box, reproducibly from the seed.

    ``drop`` mode needs ``spacing_mm`` to size boxes in cm^3. The reported
    mean IoU compares each surviving box against its original and is None
    when nothing survives.
    """
    rng = np.random.default_rng(spec.seed)
    out: list[Box3] = []
    kept: list[int] = []
    clamped = 0
    dropped = 0

    for i, box in enumerate(boxes):
        if spec.mode == "drop":
            if spacing_mm is None:
                raise ValueError("drop mode needs spacing_mm to bin box volumes")
            u = float(rng.uniform())
            vol = physical_volume_cm3(box, spacing_mm)
            if vol < spec.drop_bins_cm3[0]:
                rate = spec.drop_rates[0]
            elif vol < spec.drop_bins_cm3[1]:
                rate = spec.drop_rates[1]
            else:
                rate = 0.0
            if u < rate:
                dropped += 1
                continue
            out.append(box)
            kept.append(i)
            continue

        if spec.mode == "shrink":
            factors = rng.uniform(1.0 - spec.magnitude, 1.0, size=3)
        elif spec.mode == "enlarge":
            factors = rng.uniform(1.0, 1.0 + spec.magnitude, size=3)
        else:  # shift
            factors = rng.uniform(-spec.magnitude, spec.magnitude, size=3)

        if spec.mode == "shift":
            if (factors == 0.0).all():
                new_box = box  # avoid a lossy center/size round-trip
            else:
                center = tuple(
                    c + f * e for c, f, e in zip(box.center, factors, box.extents)
                )
                new_box = Box3.from_center_size(center, box.extents)
        else:
            if (factors == 1.0).all():
                new_box = box
            else:
                new_box, c = _rescale(box, factors)
                clamped += c
        out.append(new_box)
        kept.append(i)

    if kept:
        mean_iou = float(
            np.mean([iou(boxes[i], b) for i, b in zip(kept, out)])
        )
    else:
        mean_iou = None
    return NoiseResult(out, kept, mean_iou, clamped, dropped)
