"""Anisotropic multi-level anchor grids and anchor-family fitting.

The pyramid downscales in-slice resolution by a factor of 2 at every
transition from P0 up to P6, while the depth (slice) axis is only halved
at the P3 to P4 and P4 to P5 transitions, reflecting voxels whose slice
thickness is much larger than the in-slice spacing. Detection uses levels
P2 through P6.

Anchor shapes are (d, h, w) in input-voxel units, referenced at the first
detection level. In ``rescale`` mode the family grows with the cumulative
stride ratio at coarser levels; in ``fixed`` mode every level tiles the
same shapes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigMissing, DegenerateCluster, VolumeTooSmall
from .geometry import Box3, VolumeMeta, boxes_to_array

LEVELS = ("P0", "P1", "P2", "P3", "P4", "P5", "P6")
DETECTION_LEVELS = ("P2", "P3", "P4", "P5", "P6")

# Per-transition downscale factors entering each level, (depth, in-slice).
_TRANSITIONS: dict[str, tuple[int, int]] = {
    "P1": (1, 2),
    "P2": (1, 2),
    "P3": (1, 2),
    "P4": (2, 2),
    "P5": (2, 2),
    "P6": (1, 2),
}

SCALE_MODES = ("rescale", "fixed")


@dataclass(frozen=True)
class LevelSpec:
    """One pyramid level: cumulative stride and the anchor family tiled on it."""

    level_id: str
    stride: tuple[int, int, int]  # cumulative (z, y, x) voxels per feature cell
    shapes: tuple[tuple[float, float, float], ...] = ()  # (d, h, w) per anchor

    def __post_init__(self):
        if self.level_id not in LEVELS:
            raise ValueError(f"unknown level {self.level_id!r}")
        stride = tuple(int(s) for s in self.stride)
        if any(s < 1 for s in stride):
            raise ValueError(f"stride must be >= 1 per axis, got {self.stride!r}")
        object.__setattr__(self, "stride", stride)
        shapes = tuple(tuple(float(c) for c in s) for s in self.shapes)
        for s in shapes:
            if len(s) != 3 or any(c <= 0 for c in s):
                raise ValueError(f"anchor shape must be 3 positive reals, got {s!r}")
        object.__setattr__(self, "shapes", shapes)


def cumulative_strides() -> dict[str, tuple[int, int, int]]:
    """Cumulative (z, y, x) stride of every level P0..P6."""
    out = {"P0": (1, 1, 1)}
    dz, dyx = 1, 1
    for level in LEVELS[1:]:
        fz, fyx = _TRANSITIONS[level]
        dz *= fz
        dyx *= fyx
        out[level] = (dz, dyx, dyx)
    return out


def feature_shape(shape: Sequence[int], stride: Sequence[int]) -> tuple[int, int, int]:
    """Feature-map cells per axis: ceil(shape / stride)."""
    return tuple(-(-int(n) // int(s)) for n, s in zip(shape, stride))


def default_stride_schedule(volume: VolumeMeta) -> list[LevelSpec]:
    """Detection-level specs (P2..P6) for the default transition schedule."""
    strides = cumulative_strides()
    schedule = []
    for level in DETECTION_LEVELS:
        stride = strides[level]
        cells = feature_shape(volume.shape, stride)
        if any(c < 1 for c in cells):
            raise VolumeTooSmall(
                f"volume {volume.shape} has an empty feature map at {level}"
            )
        schedule.append(LevelSpec(level, stride))
    return schedule


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor family plus optional stride schedule, as stored on disk."""

    shapes: tuple[tuple[float, float, float], ...]
    scale_mode: str = "rescale"
    levels: tuple[tuple[str, tuple[int, int, int]], ...] | None = None

    def __post_init__(self):
        if self.scale_mode not in SCALE_MODES:
            raise ValueError(f"scale_mode must be one of {SCALE_MODES}")
        if not self.shapes:
            raise ConfigMissing("anchor config carries no shapes")


def load_anchor_config(path) -> AnchorConfig:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if "shapes" not in doc or not doc["shapes"]:
        raise ConfigMissing(f"{path}: anchor config lists no shapes")
    shapes = tuple(tuple(float(c) for c in s) for s in doc["shapes"])
    mode = doc.get("scale_mode", "rescale")
    levels = None
    if "levels" in doc:
        levels = tuple(
            (entry["level"], tuple(int(s) for s in entry["stride"]))
            for entry in doc["levels"]
        )
    return AnchorConfig(shapes, mode, levels)


def save_anchor_config(config: AnchorConfig, path) -> None:
    doc: dict = {"scale_mode": config.scale_mode,
                 "shapes": [list(s) for s in config.shapes]}
    if config.levels is not None:
        doc["levels"] = [{"level": lv, "stride": list(st)} for lv, st in config.levels]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def schedule_from_config(config: AnchorConfig, volume: VolumeMeta) -> list[LevelSpec]:
    """Build the scheduled levels with the family applied to each of them."""
    if config.levels is None:
        bare = default_stride_schedule(volume)
    else:
        bare = [LevelSpec(lv, st) for lv, st in config.levels]
    return apply_family(bare, config.shapes, config.scale_mode)


def apply_family(schedule: Sequence[LevelSpec],
                 shapes: Sequence[Sequence[float]],
                 scale_mode: str = "rescale") -> list[LevelSpec]:
    """Attach an anchor family (given at the first level) to every level."""
    if scale_mode not in SCALE_MODES:
        raise ValueError(f"scale_mode must be one of {SCALE_MODES}")
    if not schedule:
        raise ValueError("schedule is empty")
    if not shapes:
        raise ConfigMissing("no anchor shapes to apply")
    ref = schedule[0].stride
    out = []
    for spec in schedule:
        if scale_mode == "fixed":
            scaled = tuple(tuple(float(c) for c in s) for s in shapes)
        else:
            factor = tuple(spec.stride[i] / ref[i] for i in range(3))
            scaled = tuple(
                (s[0] * factor[0], s[1] * factor[1], s[2] * factor[2])
                for s in shapes
            )
        out.append(LevelSpec(spec.level_id, spec.stride, scaled))
    return out


@dataclass
class AnchorGrid:
    """Anchors tiled over the feature lattice of every scheduled level.

    Anchor ordering is level-major, then cell (z, y, x), then family
    index, and is a pure function of (schedule, volume). Boxes may extend
    past the volume borders; centers always lie inside them (centers of
    partial border cells are pulled half a voxel inside the border).
    """

    levels: list[LevelSpec]
    volume: VolumeMeta
    boxes: np.ndarray        # (N, 6) corner rows
    centers: np.ndarray      # (N, 3)
    level_index: np.ndarray  # (N,) index into `levels`
    level_slices: list[tuple[int, int]]
    cells: list[tuple[int, int, int]]

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def boxes_list(self) -> list[Box3]:
        from .geometry import array_to_boxes
        return array_to_boxes(self.boxes)


def anchor_count(schedule: Sequence[LevelSpec], volume: VolumeMeta) -> int:
    """Closed-form anchor count: sum over levels of k * prod(ceil(n/s))."""
    total = 0
    for spec in schedule:
        cells = feature_shape(volume.shape, spec.stride)
        total += len(spec.shapes) * math.prod(cells)
    return total


def generate_anchors(schedule: Sequence[LevelSpec], volume: VolumeMeta) -> AnchorGrid:
    """Tile every level's family over its feature lattice."""
    if not schedule:
        raise ValueError("schedule is empty")
    for prev, cur in zip(schedule, schedule[1:]):
        if any(cur.stride[i] < prev.stride[i] for i in range(3)):
            raise ValueError(
                f"strides must be non-decreasing with level: {prev.level_id} "
                f"{prev.stride} -> {cur.level_id} {cur.stride}"
            )
    for spec in schedule:
        if not spec.shapes:
            raise ConfigMissing(
                f"level {spec.level_id} has no anchor shapes; load a family first"
            )

    all_boxes, all_centers, all_levels = [], [], []
    slices, cells_per_level = [], []
    start = 0
    for li, spec in enumerate(schedule):
        cells = feature_shape(volume.shape, spec.stride)
        if any(c < 1 for c in cells):
            raise VolumeTooSmall(
                f"volume {volume.shape} has an empty feature map at {spec.level_id}"
            )
        axes = [
            np.minimum((np.arange(c) + 0.5) * s, n - 0.5)
            for c, s, n in zip(cells, spec.stride, volume.shape)
        ]
        zz, yy, xx = np.meshgrid(*axes, indexing="ij")
        cell_centers = np.stack([zz, yy, xx], axis=-1).reshape(-1, 3)

        k = len(spec.shapes)
        centers = np.repeat(cell_centers, k, axis=0)
        family = np.asarray(spec.shapes, dtype=np.float64)
        sizes = np.tile(family, (cell_centers.shape[0], 1))
        boxes = np.concatenate([centers - 0.5 * sizes, centers + 0.5 * sizes], axis=1)

        n = boxes.shape[0]
        all_boxes.append(boxes)
        all_centers.append(centers)
        all_levels.append(np.full(n, li, dtype=np.int64))
        slices.append((start, start + n))
        cells_per_level.append(cells)
        start += n

    return AnchorGrid(
        levels=list(schedule),
        volume=volume,
        boxes=np.concatenate(all_boxes) if all_boxes else np.empty((0, 6)),
        centers=np.concatenate(all_centers) if all_centers else np.empty((0, 3)),
        level_index=np.concatenate(all_levels) if all_levels else np.empty(0, np.int64),
        level_slices=slices,
        cells=cells_per_level,
    )


# ---------------------------------------------------------------------------
# Anchor-family fitting: k-means on co-centered IoU distance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AnchorFit:
    shapes: tuple[tuple[float, float, float], ...]
    mean_best_iou: float
    iterations: int
    reseeds: int


def _shape_iou(shapes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Co-centered IoU between (N, 3) box extents and (K, 3) anchor extents."""
    inter = np.minimum(shapes[:, None, :], anchors[None, :, :]).prod(axis=2)
    va = shapes.prod(axis=1)[:, None]
    vb = anchors.prod(axis=1)[None, :]
    return inter / (va + vb - inter)


def fit_anchors(boxes: Sequence[Box3], k: int, iters: int = 25,
                seed: int = 0) -> AnchorFit:
    """Fit k anchor shapes maximizing mean best co-centered IoU.

    Uses a medoid-style update (the new cluster representative is the
    member, or the current representative, with the highest mean IoU to
    the cluster), which keeps the objective monotone non-decreasing.
    Emptied clusters are re-seeded on the worst-covered box.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    shapes = boxes_to_array(boxes)
    if shapes.shape[0] < k:
        raise ValueError(f"need at least k={k} boxes, got {shapes.shape[0]}")
    extents = shapes[:, 3:] - shapes[:, :3]

    rng = np.random.default_rng(seed)
    anchors = extents[rng.choice(extents.shape[0], size=k, replace=False)].copy()

    n = extents.shape[0]
    reseeds = 0
    prev_assign = None
    iteration = 0
    for iteration in range(1, iters + 1):
        ious = _shape_iou(extents, anchors)
        assign = ious.argmax(axis=1)
        best = ious[np.arange(n), assign]

        for ci in range(k):
            if not (assign == ci).any():
                worst = int(best.argmin())
                anchors[ci] = extents[worst]
                assign[worst] = ci
                best[worst] = 1.0
                reseeds += 1
                if reseeds > 8 * k:
                    raise DegenerateCluster(
                        f"cluster {ci} cannot be kept populated after "
                        f"{reseeds} re-seeds; lower k"
                    )

        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign.copy()

        for ci in range(k):
            members = extents[assign == ci]
            if members.shape[0] == 0:
                continue  # re-seeded away mid-pass; next assignment fixes it
            candidates = np.concatenate([members, anchors[ci][None, :]])
            mean_iou = _shape_iou(members, candidates).mean(axis=0)
            anchors[ci] = candidates[int(mean_iou.argmax())]

    ious = _shape_iou(extents, anchors)
    mean_best = float(ious.max(axis=1).mean())
    order = np.argsort(anchors.prod(axis=1), kind="stable")
    fitted = tuple(tuple(float(c) for c in anchors[i]) for i in order)
    return AnchorFit(fitted, mean_best, iteration, reseeds)
