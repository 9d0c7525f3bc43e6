"""Bit-exact file formats for volumes and box lists.

Volume file (``.vox``): a single JSON header line terminated by a
newline, immediately followed by the raw little-endian payload::

    {"shape": [z, y, x], "spacing_mm": [z, y, x], "dtype": "u8",
     "order": "row-major z-major"}\\n<payload bytes>

The payload holds exactly ``prod(shape)`` samples of the declared dtype
(``u8`` or ``u16``), in C order with z as the slowest axis.

Box file (``.boxes``): a JSON document::

    {"scan_id": "...", "spacing_mm": [z, y, x],
     "boxes": [{"box": [z1, y1, x1, z2, y2, x2], "label": 0,
                "score": 0.9}, ...]}

``score`` is present on detections and absent on ground truth.
Coordinates are serialized with Python's shortest round-trip float
representation, so write followed by read is lossless at full double
precision. Writers never embed timestamps; identical inputs produce
identical bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    HeaderMismatch,
    MalformedBox,
    MissingField,
    TruncatedPayload,
    UnsupportedDtype,
)
from .geometry import Box3, Vec3, VolumeMeta
from .annotation import LabelMap

_DTYPES = {"u8": np.dtype("<u1"), "u16": np.dtype("<u2")}
_ORDER = "row-major z-major"


def write_volume(label_map: LabelMap, path) -> None:
    grid = label_map.grid
    if grid.min() < 0:
        raise UnsupportedDtype("volume payload cannot hold negative labels")
    dtype = "u8" if grid.max() <= 0xFF else "u16"
    if grid.max() > 0xFFFF:
        raise UnsupportedDtype(
            f"volume labels up to {int(grid.max())} exceed u16 range"
        )
    header = {
        "shape": list(label_map.meta.shape),
        "spacing_mm": list(label_map.meta.spacing_mm),
        "dtype": dtype,
        "order": _ORDER,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("ascii") + b"\n")
        fh.write(np.ascontiguousarray(grid.astype(_DTYPES[dtype])).tobytes())


def read_volume(path) -> LabelMap:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise HeaderMismatch(f"{path}: no header line found (no newline in file)")
    payload_offset = nl + 1
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderMismatch(f"{path}: header is not valid JSON at byte 0: {exc}") from None

    for key in ("shape", "spacing_mm", "dtype", "order"):
        if key not in header:
            raise HeaderMismatch(f"{path}: header misses field {key!r}")
    if header["order"] != _ORDER:
        raise HeaderMismatch(
            f"{path}: unsupported sample order {header['order']!r}"
        )
    if header["dtype"] not in _DTYPES:
        raise UnsupportedDtype(
            f"{path}: dtype {header['dtype']!r} not in {sorted(_DTYPES)}"
        )
    meta = VolumeMeta(tuple(header["shape"]), tuple(header["spacing_mm"]))
    dtype = _DTYPES[header["dtype"]]
    expected = math.prod(meta.shape) * dtype.itemsize
    actual = len(raw) - payload_offset
    if actual < expected:
        raise TruncatedPayload(
            f"{path}: payload starting at byte {payload_offset} holds "
            f"{actual} bytes, header promises {expected}"
        )
    if actual > expected:
        raise HeaderMismatch(
            f"{path}: {actual - expected} trailing bytes after byte "
            f"{payload_offset + expected}"
        )
    grid = np.frombuffer(raw, dtype=dtype, count=math.prod(meta.shape),
                         offset=payload_offset)
    return LabelMap(meta, grid.reshape(meta.shape).astype(np.int64))


# ---------------------------------------------------------------------------
# Box files
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoxEntry:
    box: Box3
    label: int = 0
    score: float | None = None


@dataclass
class ScanBoxes:
    """One scan's boxes with its identity and voxel spacing."""

    scan_id: str
    spacing_mm: Vec3
    entries: list[BoxEntry] = field(default_factory=list)

    def boxes(self) -> list[Box3]:
        return [e.box for e in self.entries]

    def require_scores(self, path="<memory>") -> None:
        for i, e in enumerate(self.entries):
            if e.score is None:
                raise MissingField(f"{path}: box {i} has no score")


def write_boxes(scan: ScanBoxes, path) -> None:
    entries = []
    for i, e in enumerate(scan.entries):
        row: dict = {"box": list(e.box.min + e.box.max), "label": e.label}
        if e.score is not None:
            row["score"] = e.score
        entries.append(row)
    doc = {
        "scan_id": scan.scan_id,
        "spacing_mm": list(scan.spacing_mm),
        "boxes": entries,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def read_boxes(path) -> ScanBoxes:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise MalformedBox(f"{path}: not valid JSON: {exc}") from None

    for key in ("scan_id", "spacing_mm", "boxes"):
        if key not in doc:
            raise MissingField(f"{path}: document misses field {key!r}")

    entries = []
    for i, row in enumerate(doc["boxes"]):
        if "box" not in row:
            raise MissingField(f"{path}: boxes[{i}] misses field 'box'")
        coords = row["box"]
        if len(coords) != 6:
            raise MalformedBox(
                f"{path}: boxes[{i}] needs 6 coordinates, got {len(coords)}"
            )
        lo, hi = tuple(coords[:3]), tuple(coords[3:])
        if any(not a < b for a, b in zip(lo, hi)):
            raise MalformedBox(
                f"{path}: boxes[{i}] violates min < max: {coords}"
            )
        score = row.get("score")
        entries.append(BoxEntry(Box3(lo, hi), int(row.get("label", 0)),
                                None if score is None else float(score)))
    return ScanBoxes(str(doc["scan_id"]), tuple(doc["spacing_mm"]), entries)
