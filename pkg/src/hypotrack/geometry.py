"""Boxes, detections and tracklets.

Boxes are ``(left, top, width, height)`` in continuous image pixels. The
all-zero box marks a frame where the object's location is unknown, so a
tracklet over ``N`` frames is simply an ``N x 4`` array with zero rows for
gaps.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np


class MergeConflictError(ValueError):
    """Two tracklets hold different detections in the same frame."""


@dataclass(frozen=True)
class BoundingBox:
    left: float
    top: float
    width: float
    height: float

    def __post_init__(self):
        if self.width < 0 or self.height < 0:
            raise ValueError(f"negative box size: {self}")

    @classmethod
    def absent(cls) -> "BoundingBox":
        return cls(0.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, a) -> "BoundingBox":
        l, t, w, h = (float(v) for v in a)
        return cls(l, t, w, h)

    @property
    def is_absent(self) -> bool:
        return self.left == 0 and self.top == 0 and self.width == 0 and self.height == 0

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.left + self.width / 2.0, self.top + self.height / 2.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.left, self.top, self.width, self.height], dtype=float)


@dataclass(frozen=True)
class Detection:
    frame: int
    box: BoundingBox
    confidence: float
    detection_id: int
    embedding_ref: Optional[int] = None

    def __post_init__(self):
        if not np.isfinite(self.confidence):
            raise ValueError(f"non-finite confidence for detection {self.detection_id}")


def _as_box_array(b) -> np.ndarray:
    if isinstance(b, BoundingBox):
        return b.as_array()
    return np.asarray(b, dtype=float)


def box_absent(boxes: np.ndarray) -> np.ndarray:
    """Mask of all-zero rows over the last axis."""
    return ~np.any(boxes != 0, axis=-1)


def intersection_area(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Broadcasting continuous intersection area of ``(..., 4)`` box arrays."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    iw = np.minimum(a[..., 0] + a[..., 2], b[..., 0] + b[..., 2]) - np.maximum(a[..., 0], b[..., 0])
    ih = np.minimum(a[..., 1] + a[..., 3], b[..., 1] + b[..., 3]) - np.maximum(a[..., 1], b[..., 1])
    return np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorised IoU; absent boxes and zero-area unions give 0."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    inter = intersection_area(a, b)
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    valid = (union > 0) & ~box_absent(a) & ~box_absent(b)
    out = np.zeros(np.broadcast(inter, union).shape)
    np.divide(inter, union, out=out, where=valid)
    return out


def iou(a, b) -> float:
    """Intersection over union of two boxes, in ``[0, 1]``."""
    return float(box_iou(_as_box_array(a), _as_box_array(b)))


def shift_box(d, sft) -> BoundingBox:
    """Add ``sft`` componentwise to box ``d``; width/height are clamped at 0."""
    d = _as_box_array(d)
    if not np.any(d != 0):
        raise ValueError("cannot shift the absent box")
    out = d + np.asarray(sft, dtype=float)
    out[2:] = np.clip(out[2:], 0.0, None)
    return BoundingBox.from_array(out)


@dataclass(frozen=True, eq=False)
class Tracklet:
    """``N`` per-frame boxes plus the detection id behind every non-zero row."""

    boxes: np.ndarray
    detection_ids: tuple
    score: Optional[float] = field(default=None, compare=False)

    def __post_init__(self):
        boxes = np.array(self.boxes, dtype=float).reshape(-1, 4)
        boxes.setflags(write=False)
        object.__setattr__(self, "boxes", boxes)
        ids = tuple(None if i is None or i < 0 else int(i) for i in self.detection_ids)
        object.__setattr__(self, "detection_ids", ids)
        if len(ids) != len(boxes):
            raise ValueError("detection_ids must align with boxes")
        present = ~box_absent(boxes)
        for n in range(len(ids)):
            if present[n] and ids[n] is None:
                raise ValueError(f"non-zero column {n} has no detection id")
            if not present[n] and ids[n] is not None:
                raise ValueError(f"zero column {n} carries detection id {ids[n]}")

    @classmethod
    def from_detections(cls, detections: Iterable[Detection], n_frames: int,
                        frame_offset: int = 0) -> "Tracklet":
        boxes = np.zeros((n_frames, 4))
        ids: list = [None] * n_frames
        for d in detections:
            n = d.frame - frame_offset
            if ids[n] is not None and ids[n] != d.detection_id:
                raise MergeConflictError(f"two detections in frame {d.frame}")
            boxes[n] = d.box.as_array()
            ids[n] = d.detection_id
        return cls(boxes, tuple(ids))

    def __len__(self) -> int:
        return len(self.detection_ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tracklet):
            return NotImplemented
        return self.detection_ids == other.detection_ids and np.array_equal(self.boxes, other.boxes)

    def __hash__(self) -> int:
        return hash(self.detection_ids)

    @property
    def present(self) -> np.ndarray:
        return ~box_absent(self.boxes)

    @property
    def support(self) -> tuple[int, ...]:
        return tuple(int(n) for n in np.flatnonzero(self.present))

    @property
    def start(self) -> int:
        return self.support[0]

    @property
    def end(self) -> int:
        return self.support[-1]

    @property
    def span(self) -> int:
        s = self.support
        return s[-1] - s[0] + 1 if s else 0

    @property
    def id_sequence(self) -> tuple[int, ...]:
        return tuple(i for i in self.detection_ids if i is not None)

    @property
    def key(self) -> tuple:
        return self.detection_ids

    def with_score(self, score: float) -> "Tracklet":
        return Tracklet(self.boxes, self.detection_ids, score)


@dataclass(frozen=True, eq=False)
class GroundTruthTrajectory:
    person_id: int
    boxes: np.ndarray

    def __post_init__(self):
        boxes = np.array(self.boxes, dtype=float).reshape(-1, 4)
        boxes.setflags(write=False)
        object.__setattr__(self, "boxes", boxes)

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def present(self) -> np.ndarray:
        return ~box_absent(self.boxes)

    def window(self, start: int, stop: int) -> "GroundTruthTrajectory":
        return GroundTruthTrajectory(self.person_id, self.boxes[start:stop])


def _check_lengths(t1: Tracklet, t2: Tracklet):
    if len(t1) != len(t2):
        raise ValueError(f"tracklet lengths differ: {len(t1)} vs {len(t2)}")


def can_merge(t1: Tracklet, t2: Tracklet) -> bool:
    """True iff no frame holds two different detections."""
    _check_lengths(t1, t2)
    return all(a is None or b is None or a == b
               for a, b in zip(t1.detection_ids, t2.detection_ids))


def merge(t1: Tracklet, t2: Tracklet) -> Tracklet:
    """Columnwise union of two compatible tracklets."""
    if not can_merge(t1, t2):
        raise MergeConflictError("tracklets hold different detections in a shared frame")
    take_first = t1.present
    boxes = np.where(take_first[:, None], t1.boxes, t2.boxes)
    ids = tuple(a if a is not None else b for a, b in zip(t1.detection_ids, t2.detection_ids))
    return Tracklet(boxes, ids)


def overlap_fraction(t1: Tracklet, t2: Tracklet) -> float:
    """Shared box area summed over frames, over the smaller of the two total areas."""
    _check_lengths(t1, t2)
    a1 = float(np.sum(t1.boxes[:, 2] * t1.boxes[:, 3]))
    a2 = float(np.sum(t2.boxes[:, 2] * t2.boxes[:, 3]))
    denom = min(a1, a2)
    if denom <= 0:
        return 0.0
    shared = float(np.sum(intersection_area(t1.boxes, t2.boxes)))
    return min(shared / denom, 1.0)


def support_union_size(t1: Tracklet, t2: Tracklet) -> int:
    return int(np.count_nonzero(t1.present | t2.present))


def stack_boxes(boxes: Sequence) -> np.ndarray:
    return np.array([_as_box_array(b) for b in boxes], dtype=float).reshape(-1, 4)
