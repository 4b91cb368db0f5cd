"""Per-frame feature map for tracklets.

Geometric block per frame (``13 + 3M`` values):

    [0:4]    box (left, top, width, height) / image size
    [4]      detector confidence
    [5:9]    box minus the previous tracklet box, / image size
    [9:13]   next tracklet box minus this box, / image size
    [13:]    M x (dx, dy, confidence) to the nearest other detections in the frame

Appearance block (``132`` values, optional):

    [0:128]  appearance embedding
    [128]    distance to the trajectory's representative embedding (0 without history)
    [129:]   center distance to the 1st / 5th / 20th nearest detection, / image diagonal

Absent frames produce all-zero columns.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import Detection, Tracklet

EMBEDDING_DIM = 128
CROWD_RANKS = (1, 5, 20)
EMBEDDING_MAGIC = b"HTEMB\x00\x00\x01"


@dataclass(frozen=True)
class FeatureConfig:
    neighbors: int = 4
    use_appearance: bool = False
    image_width: float = 1920.0
    image_height: float = 1080.0

    def __post_init__(self):
        if self.neighbors < 1:
            raise ValueError("neighbors must be >= 1")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")

    @property
    def geometric_dim(self) -> int:
        return 13 + 3 * self.neighbors

    @property
    def dim(self) -> int:
        return self.geometric_dim + (EMBEDDING_DIM + 1 + len(CROWD_RANKS) if self.use_appearance else 0)

    @property
    def scale(self) -> np.ndarray:
        return np.array([self.image_width, self.image_height, self.image_width, self.image_height])

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.image_width, self.image_height))


@dataclass(frozen=True)
class FeatureTensor:
    values: np.ndarray    # (F, N)
    presence: np.ndarray  # (N,) bool

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def __len__(self) -> int:
        return self.values.shape[1]


class EmbeddingTable:
    """Appearance vectors indexed by detection id; NaN rows mark missing ids."""

    def __init__(self, vectors: np.ndarray):
        vectors = np.asarray(vectors, dtype=np.float32)
        if vectors.ndim != 2 or vectors.shape[1] != EMBEDDING_DIM:
            raise ValueError(f"expected (count, {EMBEDDING_DIM}) embeddings, got {vectors.shape}")
        self.vectors = vectors

    def __len__(self) -> int:
        return len(self.vectors)

    def has(self, detection_id: int) -> bool:
        return 0 <= detection_id < len(self.vectors) and bool(np.all(np.isfinite(self.vectors[detection_id])))

    def __getitem__(self, detection_id: int) -> np.ndarray:
        if not self.has(detection_id):
            raise KeyError(f"missing embedding for detection {detection_id}")
        return self.vectors[detection_id].astype(float)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(EMBEDDING_MAGIC)
            fh.write(struct.pack("<II", len(self.vectors), EMBEDDING_DIM))
            fh.write(np.ascontiguousarray(self.vectors, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        path = Path(path)
        raw = path.read_bytes()
        if raw.startswith(EMBEDDING_MAGIC):
            count, dim = struct.unpack_from("<II", raw, len(EMBEDDING_MAGIC))
            if dim != EMBEDDING_DIM:
                raise ValueError(f"embedding dim {dim} != {EMBEDDING_DIM}")
            offset = len(EMBEDDING_MAGIC) + 8
            data = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=offset)
            return cls(data.reshape(count, dim).copy())
        return cls._load_csv(raw.decode())

    @classmethod
    def _load_csv(cls, text: str) -> "EmbeddingTable":
        rows = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != EMBEDDING_DIM + 1:
                raise ValueError(f"line {lineno}: expected {EMBEDDING_DIM + 1} fields, got {len(parts)}")
            rows[int(parts[0])] = np.array([float(p) for p in parts[1:]], dtype=np.float32)
        count = max(rows) + 1 if rows else 0
        vectors = np.full((count, EMBEDDING_DIM), np.nan, dtype=np.float32)
        for i, v in rows.items():
            vectors[i] = v
        return cls(vectors)


def representative_embedding(vectors: Sequence) -> np.ndarray:
    """Medoid under Euclidean distance; ties go to the lowest index."""
    vectors = np.asarray(vectors, dtype=float)
    if len(vectors) == 0:
        raise ValueError("representative_embedding of an empty list")
    diff = vectors[:, None, :] - vectors[None, :, :]
    sums = np.sqrt(np.sum(diff * diff, axis=-1)).sum(axis=1)
    return vectors[int(np.argmin(sums))]


def _centers(boxes: np.ndarray) -> np.ndarray:
    return boxes[..., :2] + boxes[..., 2:] / 2.0


def neighbor_features(centers: np.ndarray, exclude: np.ndarray, frame_centers: np.ndarray,
                      frame_conf: np.ndarray, frame_ids: np.ndarray, cfg: FeatureConfig,
                      crowd: bool = False) -> np.ndarray:
    """Social (and optionally crowd-density) channels for query centers in one frame.

    ``exclude`` holds, per query, a detection id that must not count as its own
    neighbour (-1 for none).
    """
    q = len(centers)
    m = cfg.neighbors
    out = np.zeros((q, 3 * m + (len(CROWD_RANKS) if crowd else 0)))
    if crowd:
        out[:, 3 * m:] = 1.0
    if q == 0 or len(frame_centers) == 0:
        return out
    offsets = frame_centers[None, :, :] - centers[:, None, :]
    dist = np.hypot(offsets[..., 0], offsets[..., 1])
    own = frame_ids[None, :] == exclude[:, None]
    dist = np.where(own, np.inf, dist)
    order = np.argsort(dist, axis=1, kind="stable")
    scale = np.array([cfg.image_width, cfg.image_height])
    rows = np.arange(q)
    for k in range(min(m, len(frame_centers))):
        j = order[:, k]
        ok = np.isfinite(dist[rows, j])
        out[ok, 3 * k:3 * k + 2] = offsets[rows[ok], j[ok]] / scale
        out[ok, 3 * k + 2] = frame_conf[j[ok]]
    if crowd:
        for c, rank in enumerate(CROWD_RANKS):
            if rank <= len(frame_centers):
                d = dist[rows, order[:, rank - 1]]
                ok = np.isfinite(d)
                out[ok, 3 * m + c] = d[ok] / cfg.diagonal
    return out


def _shift_channels(boxes: np.ndarray, present: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Shift to previous / next present box along axis -2, for (..., N, 4) boxes."""
    n = boxes.shape[-2]
    ar = np.broadcast_to(np.arange(n), present.shape)
    last = np.maximum.accumulate(np.where(present, ar, -1), axis=-1)
    prev = np.concatenate([np.full(present.shape[:-1] + (1,), -1), last[..., :-1]], axis=-1)
    first_rev = np.minimum.accumulate(np.where(present, ar, n)[..., ::-1], axis=-1)[..., ::-1]
    nxt = np.concatenate([first_rev[..., 1:], np.full(present.shape[:-1] + (1,), n)], axis=-1)
    has_prev = present & (prev >= 0)
    has_next = present & (nxt < n)
    prev_boxes = np.take_along_axis(boxes, np.clip(prev, 0, n - 1)[..., None], axis=-2)
    next_boxes = np.take_along_axis(boxes, np.clip(nxt, 0, n - 1)[..., None], axis=-2)
    out = np.zeros(boxes.shape[:-1] + (8,))
    out[..., :4] = np.where(has_prev[..., None], (boxes - prev_boxes) / scale, 0.0)
    out[..., 4:] = np.where(has_next[..., None], (next_boxes - boxes) / scale, 0.0)
    return out


def _check_frames(t: Tracklet, frame_detections: Sequence) -> None:
    if len(frame_detections) != len(t):
        raise ValueError(f"frame_detections has {len(frame_detections)} frames, tracklet has {len(t)}")


def _frame_arrays(dets: Sequence[Detection]):
    boxes = np.array([d.box.as_array() for d in dets], dtype=float).reshape(-1, 4)
    conf = np.array([d.confidence for d in dets], dtype=float)
    ids = np.array([d.detection_id for d in dets], dtype=np.int64)
    return _centers(boxes), conf, ids


def geometric_features(t: Tracklet, frame_detections: Sequence[Sequence[Detection]],
                       cfg: FeatureConfig, confidences: Optional[Sequence[float]] = None) -> FeatureTensor:
    """Geometric block for one tracklet.

    ``confidences`` defaults to the confidence of the detection behind each
    column, looked up in ``frame_detections``.
    """
    _check_frames(t, frame_detections)
    n = len(t)
    present = t.present
    if confidences is None:
        confidences = np.zeros(n)
        for f, did in enumerate(t.detection_ids):
            if did is not None:
                match = [d.confidence for d in frame_detections[f] if d.detection_id == did]
                confidences[f] = match[0] if match else 0.0
    conf = np.where(present, np.asarray(confidences, dtype=float), 0.0)
    values = np.zeros((n, cfg.geometric_dim))
    values[:, :4] = t.boxes / cfg.scale
    values[:, 4] = conf
    values[:, 5:13] = _shift_channels(t.boxes, present, cfg.scale)
    centers = _centers(t.boxes)
    for f in np.flatnonzero(present):
        fc, fconf, fids = _frame_arrays(frame_detections[f])
        own = np.array([t.detection_ids[f]], dtype=np.int64)
        values[f, 13:] = neighbor_features(centers[f:f + 1], own, fc, fconf, fids, cfg)[0]
    values[~present] = 0.0
    return FeatureTensor(values.T.copy(), present)


def appearance_features(t: Tracklet, emb: EmbeddingTable, history_vec: Optional[np.ndarray],
                        frame_detections: Sequence[Sequence[Detection]], cfg: FeatureConfig) -> FeatureTensor:
    """Appearance block for one tracklet (embedding, history distance, crowd density)."""
    _check_frames(t, frame_detections)
    if not cfg.use_appearance:
        raise ValueError("appearance features requested with use_appearance off")
    n = len(t)
    present = t.present
    values = np.zeros((n, EMBEDDING_DIM + 1 + len(CROWD_RANKS)))
    centers = _centers(t.boxes)
    for f in np.flatnonzero(present):
        did = t.detection_ids[f]
        vec = emb[did]
        values[f, :EMBEDDING_DIM] = vec
        if history_vec is not None:
            values[f, EMBEDDING_DIM] = float(np.linalg.norm(vec - np.asarray(history_vec, dtype=float)))
        fc, fconf, fids = _frame_arrays(frame_detections[f])
        nb = neighbor_features(centers[f:f + 1], np.array([did], dtype=np.int64), fc, fconf, fids,
                               cfg, crowd=True)
        values[f, EMBEDDING_DIM + 1:] = nb[0, 3 * cfg.neighbors:]
    return FeatureTensor(values.T.copy(), present)


def tracklet_features(t: Tracklet, frame_detections, cfg: FeatureConfig,
                      emb: Optional[EmbeddingTable] = None,
                      history_vec: Optional[np.ndarray] = None) -> FeatureTensor:
    geo = geometric_features(t, frame_detections, cfg)
    if not cfg.use_appearance:
        return geo
    if emb is None:
        raise ValueError("use_appearance is set but no embedding table was supplied")
    app = appearance_features(t, emb, history_vec, frame_detections, cfg)
    return FeatureTensor(np.vstack([geo.values, app.values]), geo.presence)


class BatchContext:
    """Detections of one window of frames, indexed locally for vectorised work.

    Local detection indices follow ascending ``detection_id`` so comparing
    index sequences is the same as comparing id sequences. Hypotheses are
    integer rows of length ``n_frames`` holding local indices or -1.
    """

    def __init__(self, detections: Sequence[Detection], start: int, n_frames: int,
                 cfg: FeatureConfig, embeddings: Optional[EmbeddingTable] = None,
                 history: Optional[dict] = None):
        dets = sorted((d for d in detections if start <= d.frame < start + n_frames),
                      key=lambda d: d.detection_id)
        self.detections = dets
        self.start = start
        self.n_frames = n_frames
        self.cfg = cfg
        d = len(dets)
        self.boxes = np.array([x.box.as_array() for x in dets], dtype=float).reshape(d, 4)
        self.conf = np.array([x.confidence for x in dets], dtype=float)
        self.frame = np.array([x.frame - start for x in dets], dtype=np.int64)
        self.ids = np.array([x.detection_id for x in dets], dtype=np.int64)
        self.local = {int(i): k for k, i in enumerate(self.ids)}
        self.frame_members = [np.flatnonzero(self.frame == f) for f in range(n_frames)]
        if cfg.use_appearance and embeddings is None:
            raise ValueError("use_appearance is set but no embedding table was supplied")
        self.embeddings = None
        if cfg.use_appearance:
            self.embeddings = np.array([embeddings[int(i)] for i in self.ids]).reshape(d, EMBEDDING_DIM)
        # history: detection_id -> representative vector of the earlier trajectory holding it
        self.history_vectors = np.zeros((0, EMBEDDING_DIM))
        self.history_index = np.full(d, -1, dtype=np.int64)
        if history:
            vecs = []
            for did, vec in history.items():
                k = self.local.get(int(did))
                if k is not None:
                    self.history_index[k] = len(vecs)
                    vecs.append(np.asarray(vec, dtype=float))
            if vecs:
                self.history_vectors = np.array(vecs)
        self._static = self._static_features()

    def __len__(self) -> int:
        return len(self.detections)

    def frame_detections(self) -> list[list[Detection]]:
        out: list[list[Detection]] = [[] for _ in range(self.n_frames)]
        for k in range(len(self.detections)):
            out[self.frame[k]].append(self.detections[k])
        return out

    def _neighbors_for(self, centers: np.ndarray, frames: np.ndarray, exclude_ids: np.ndarray,
                       crowd: bool) -> np.ndarray:
        out = np.zeros((len(centers), 3 * self.cfg.neighbors + (len(CROWD_RANKS) if crowd else 0)))
        all_centers = _centers(self.boxes)
        for f in np.unique(frames):
            q = np.flatnonzero(frames == f)
            m = self.frame_members[f]
            out[q] = neighbor_features(centers[q], exclude_ids[q], all_centers[m], self.conf[m],
                                       self.ids[m], self.cfg, crowd=crowd)
        return out

    def _static_features(self) -> np.ndarray:
        """Per-detection channels that do not depend on the rest of the tracklet."""
        cfg = self.cfg
        d = len(self.detections)
        crowd = cfg.use_appearance
        nb = self._neighbors_for(_centers(self.boxes), self.frame, self.ids, crowd)
        parts = [self.boxes / cfg.scale, self.conf[:, None], nb[:, :3 * cfg.neighbors]]
        if crowd:
            parts += [self.embeddings, nb[:, 3 * cfg.neighbors:]]
        out = np.hstack(parts) if d else np.zeros((0, 5 + 3 * cfg.neighbors + (131 if crowd else 0)))
        return np.vstack([out, np.zeros((1, out.shape[1]))])

    def rows_to_boxes(self, rows: np.ndarray) -> np.ndarray:
        padded = np.vstack([self.boxes, np.zeros((1, 4))])
        return padded[np.where(rows < 0, len(self.boxes), rows)]

    def _history_for(self, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        hist = np.where(rows >= 0, np.append(self.history_index, -1)[np.where(rows < 0, len(self.ids), rows)], -1)
        has = hist >= 0
        any_hist = has.any(axis=1)
        first = np.argmax(has, axis=1)
        h = hist[np.arange(len(rows)), first]
        vecs = np.zeros((len(rows), EMBEDDING_DIM))
        if any_hist.any():
            vecs[any_hist] = self.history_vectors[h[any_hist]]
        return vecs, any_hist

    def features(self, rows: np.ndarray, boxes: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
        """Feature array ``(B, N, F)`` and presence ``(B, N)`` for hypothesis rows.

        ``boxes`` overrides the detection boxes (used after box-shift
        regression); box-dependent channels are then recomputed.
        """
        cfg = self.cfg
        rows = np.asarray(rows, dtype=np.int64).reshape(-1, self.n_frames)
        b, n = rows.shape
        present = rows >= 0
        safe = np.where(present, rows, len(self.detections))
        static = self._static[safe]
        override = boxes is not None
        if override:
            boxes = np.where(present[..., None], boxes, 0.0)
        else:
            boxes = self.rows_to_boxes(rows)
        m3 = 3 * cfg.neighbors
        out = np.zeros((b, n, cfg.dim))
        out[..., :5] = static[..., :5]
        out[..., 5:13] = _shift_channels(boxes, present, cfg.scale)
        out[..., 13:13 + m3] = static[..., 5:5 + m3]
        if cfg.use_appearance:
            g = cfg.geometric_dim
            emb = static[..., 5 + m3:5 + m3 + EMBEDDING_DIM]
            out[..., g:g + EMBEDDING_DIM] = emb
            hist, has_hist = self._history_for(rows)
            dist = np.linalg.norm(emb - hist[:, None, :], axis=-1)
            out[..., g + EMBEDDING_DIM] = np.where(has_hist[:, None] & present, dist, 0.0)
            out[..., g + EMBEDDING_DIM + 1:] = static[..., 5 + m3 + EMBEDDING_DIM:]
        if override:
            self._recompute_box_channels(out, rows, boxes, present)
        out[~present] = 0.0
        return out, present

    def _recompute_box_channels(self, out, rows, boxes, present):
        cfg = self.cfg
        m3 = 3 * cfg.neighbors
        out[..., :4] = boxes / cfg.scale
        bi, fi = np.nonzero(present)
        if len(bi) == 0:
            return
        excl = self.ids[rows[bi, fi]]
        nb = self._neighbors_for(_centers(boxes[bi, fi]), fi, excl, cfg.use_appearance)
        out[bi, fi, 13:13 + m3] = nb[:, :m3]
        if cfg.use_appearance:
            out[bi, fi, cfg.geometric_dim + EMBEDDING_DIM + 1:] = nb[:, m3:]

    def row_of(self, t: Tracklet) -> np.ndarray:
        return np.array([-1 if i is None else self.local[i] for i in t.detection_ids], dtype=np.int64)

    def tracklet(self, row: np.ndarray, score: Optional[float] = None,
                 boxes: Optional[np.ndarray] = None) -> Tracklet:
        row = np.asarray(row)
        if boxes is None:
            boxes = self.rows_to_boxes(row)
        ids = tuple(int(self.ids[k]) if k >= 0 else None for k in row)
        return Tracklet(boxes, ids, score)
