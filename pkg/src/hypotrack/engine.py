"""Hypothesis generation (grow / prune), final selection and batch stitching.

Within one batch every hypothesis is an integer row of length ``N`` holding
local detection indices (see :class:`~hypotrack.features.BatchContext`) or -1
for frames without a box. A scoring function maps a ``(B, N)`` array of rows
to ``B`` scores.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse.csgraph import connected_components

from .features import BatchContext, FeatureConfig, representative_embedding
from .geometry import Detection, Tracklet, intersection_area

log = logging.getLogger(__name__)

ScoreFn = Callable[[np.ndarray], np.ndarray]

SELECTION_MODES = ("greedy", "exact")
PRUNING_MODES = ("paper", "score", "count")
LENGTH_RULES = ("relaxed", "literal", "none")


class PoolTooLargeError(ValueError):
    pass


@dataclass(frozen=True)
class EngineConfig:
    c_iou: float = 0.6
    c_score: float = 0.6
    batch_frames: int = 18
    selection: str = "greedy"
    pruning: str = "paper"
    prune_score: float = 0.5
    prune_count: int = 20
    fast_cutoff: Optional[float] = None
    length_rule: str = "none"
    exact_limit: int = 25

    def __post_init__(self):
        if not (0 < self.c_iou < 1 and 0 < self.c_score < 1):
            raise ValueError("c_iou and c_score must lie in (0, 1)")
        if self.batch_frames < 1:
            raise ValueError("batch_frames must be positive")
        if self.selection not in SELECTION_MODES:
            raise ValueError(f"selection must be one of {SELECTION_MODES}")
        if self.pruning not in PRUNING_MODES:
            raise ValueError(f"pruning must be one of {PRUNING_MODES}")
        if self.length_rule not in LENGTH_RULES:
            raise ValueError(f"length_rule must be one of {LENGTH_RULES}")

    @property
    def batch_shift(self) -> int:
        return max(1, self.batch_frames // 3)


class HypothesisPool:
    """Deduplicated set of hypothesis rows with cached scores."""

    def __init__(self, ctx: BatchContext):
        self.ctx = ctx
        self.n_frames = ctx.n_frames
        self.rows = np.zeros((0, ctx.n_frames), dtype=np.int64)
        self.scores = np.zeros(0)
        self._index: dict[bytes, int] = {}
        self.round_sizes: list[tuple[int, int, int]] = []  # (n, candidates, pool size)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def sizes(self) -> np.ndarray:
        return np.count_nonzero(self.rows >= 0, axis=1)

    def add(self, rows: np.ndarray, scores: np.ndarray) -> np.ndarray:
        """Append rows not already present; returns pool indices of all given rows."""
        rows = np.asarray(rows, dtype=np.int64).reshape(-1, self.n_frames)
        scores = np.asarray(scores, dtype=float).reshape(-1)
        out = np.empty(len(rows), dtype=np.int64)
        new_rows, new_scores = [], []
        for k, r in enumerate(rows):
            key = r.tobytes()
            idx = self._index.get(key)
            if idx is None:
                idx = len(self.rows) + len(new_rows)
                self._index[key] = idx
                new_rows.append(r)
                new_scores.append(scores[k])
            out[k] = idx
        if new_rows:
            self.rows = np.vstack([self.rows, np.array(new_rows)])
            self.scores = np.concatenate([self.scores, new_scores])
        return out

    def contains(self, row: np.ndarray) -> bool:
        return np.asarray(row, dtype=np.int64).tobytes() in self._index

    def containing(self, local_det: int) -> np.ndarray:
        """Indices of hypotheses that hold the given local detection."""
        f = self.ctx.frame[local_det]
        return np.flatnonzero(self.rows[:, f] == local_det)

    def tracklets(self) -> list[Tracklet]:
        return [self.ctx.tracklet(r, float(s)) for r, s in zip(self.rows, self.scores)]


def init_pool(ctx: BatchContext) -> HypothesisPool:
    """One single-detection hypothesis per detection of the batch."""
    pool = HypothesisPool(ctx)
    d = len(ctx)
    rows = np.full((d, ctx.n_frames), -1, dtype=np.int64)
    rows[np.arange(d), ctx.frame] = np.arange(d)
    pool.add(rows, np.full(d, np.nan))
    return pool


@dataclass
class Candidates:
    source: np.ndarray  # (C,) pool index of the tracklet being grown
    rows: np.ndarray    # (C, N)
    scores: np.ndarray  # (C,)

    def __len__(self) -> int:
        return len(self.source)

    def subset(self, mask) -> "Candidates":
        return Candidates(self.source[mask], self.rows[mask], self.scores[mask])


def _score_unique(rows: np.ndarray, score_fn: ScoreFn) -> np.ndarray:
    if len(rows) == 0:
        return np.zeros(0)
    uniq, inverse = np.unique(rows, axis=0, return_inverse=True)
    return np.asarray(score_fn(uniq), dtype=float)[inverse.reshape(-1)]


def grow_step(pool: HypothesisPool, n: int, score_fn: ScoreFn) -> Candidates:
    """All mergers of size ``n`` that extend a size ``n - 1`` hypothesis by one detection.

    Two hypotheses of sizes ``k1 >= k2`` qualify when they are compatible and
    their union has ``k1 + 1`` detections, so the merger is the larger one plus
    a single detection in a frame it leaves empty. Single-detection
    hypotheses never leave the pool, so every such detection has a partner
    and enumerating (source, detection) pairs yields exactly the pair
    mergers. A merger reachable from two sources is listed once per source.
    """
    ctx = pool.ctx
    src = np.flatnonzero(pool.sizes == n - 1)
    if len(src) == 0 or len(ctx) == 0:
        return Candidates(np.zeros(0, dtype=np.int64), np.zeros((0, pool.n_frames), dtype=np.int64), np.zeros(0))
    src_rows = pool.rows[src]
    free = src_rows[:, ctx.frame] < 0  # (S, D)
    si, dj = np.nonzero(free)
    rows = src_rows[si].copy()
    rows[np.arange(len(si)), ctx.frame[dj]] = dj
    return Candidates(src[si], rows, _score_unique(rows, score_fn))


def _id_sequence(rows: np.ndarray) -> np.ndarray:
    """Support indices in frame order, for rows that all have the same size."""
    if len(rows) == 0:
        return np.zeros((0, 0), dtype=np.int64)
    k = int(np.count_nonzero(rows[0] >= 0))
    return rows[rows >= 0].reshape(len(rows), k)


def preference_order(scores: np.ndarray, rows: np.ndarray, group: Optional[np.ndarray] = None) -> np.ndarray:
    """Indices sorted by (group asc, score desc, size desc, id sequence asc)."""
    sizes = np.count_nonzero(rows >= 0, axis=1)
    # pad id sequences to a common width so lexsort can compare them
    width = int(sizes.max()) if len(sizes) else 0
    seq = np.full((len(rows), width), -1, dtype=np.int64)
    for k in np.unique(sizes):
        m = sizes == k
        if k:
            seq[m, :k] = _id_sequence(rows[m])
    keys = [seq[:, j] for j in reversed(range(width))] + [-sizes, -scores]
    if group is not None:
        keys.append(group)
    return np.lexsort(keys) if keys else np.arange(len(rows))


def randomized_merge_choice(scores: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    """Sample an index with probability ``softmax(temperature * scores)``."""
    scores = np.asarray(scores, dtype=float)
    if len(scores) == 0:
        raise ValueError("no candidates to choose from")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = temperature * scores
    p = np.exp(z - z.max())
    p /= p.sum()
    return int(rng.choice(len(scores), p=p))


def _consistent(rows: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Rows compatible with ``p`` that are a subset or superset of it."""
    both = (rows >= 0) & (p >= 0)
    compatible = np.all(~both | (rows == p), axis=1)
    subset = np.all((rows < 0) | (rows == p), axis=1)
    superset = np.all((p < 0) | (rows == p), axis=1)
    return compatible & (subset | superset)


@dataclass
class Chooser:
    """Randomised replacement for the per-source argmax, used while collecting training data."""

    temperature: float
    rng: np.random.Generator

    def pick(self, scores: np.ndarray) -> int:
        return randomized_merge_choice(scores, self.temperature, self.rng)


def prune_step(pool: HypothesisPool, cands: Candidates, cfg: EngineConfig,
               chooser: Optional[Chooser] = None,
               carried: Sequence[np.ndarray] = ()) -> np.ndarray:
    """Select the mergers to keep and add them to the pool; returns their pool indices.

    ``paper`` keeps, per source, the best-scoring merger (or a sampled one when
    a ``chooser`` is given). ``score`` keeps every merger scoring at least
    ``prune_score``; ``count`` keeps the ``prune_count`` best overall. For every
    row in ``carried`` (a previous-batch trajectory restricted to this batch),
    at least one consistent merger survives whenever one was generated.
    """
    if cfg.fast_cutoff is not None:
        cands = cands.subset(cands.scores >= cfg.fast_cutoff)
    if len(cands) == 0:
        return np.zeros(0, dtype=np.int64)
    keep = np.zeros(len(cands), dtype=bool)
    if cfg.pruning == "paper":
        order = preference_order(cands.scores, cands.rows, cands.source)
        src_sorted = cands.source[order]
        starts = np.flatnonzero(np.r_[True, src_sorted[1:] != src_sorted[:-1]])
        if chooser is None:
            keep[order[starts]] = True
        else:
            ends = np.r_[starts[1:], len(order)]
            for s, e in zip(starts, ends):
                group = order[s:e]
                keep[group[chooser.pick(cands.scores[group])]] = True
    elif cfg.pruning == "score":
        keep = cands.scores >= cfg.prune_score
    else:
        order = preference_order(cands.scores, cands.rows)
        keep[order[:cfg.prune_count]] = True
    for p in carried:
        ok = _consistent(cands.rows, p)
        if ok.any() and not (keep & ok).any():
            idx = np.flatnonzero(ok)
            keep[idx[preference_order(cands.scores[idx], cands.rows[idx])[0]]] = True
    kept = np.flatnonzero(keep)
    return pool.add(cands.rows[kept], cands.scores[kept])


def generate(pool: HypothesisPool, score_fn: ScoreFn, cfg: EngineConfig,
             chooser: Optional[Chooser] = None, carried: Sequence[np.ndarray] = (),
             on_candidates: Optional[Callable[[Candidates], None]] = None) -> HypothesisPool:
    """Alternate growing and pruning for ``n = 2 .. N``."""
    unscored = np.isnan(pool.scores)
    if unscored.any():
        pool.scores[unscored] = _score_unique(pool.rows[unscored], score_fn)
    pool.round_sizes.append((1, 0, len(pool)))
    for n in range(2, pool.n_frames + 1):
        cands = grow_step(pool, n, score_fn)
        if on_candidates is not None and len(cands):
            on_candidates(cands)
        prune_step(pool, cands, cfg, chooser=chooser, carried=carried)
        pool.round_sizes.append((n, len(cands), len(pool)))
        if len(cands) == 0:
            break
    return pool


# ---------------------------------------------------------------- selection

def _areas(boxes: np.ndarray) -> np.ndarray:
    return np.sum(boxes[..., 2] * boxes[..., 3], axis=-1)


def overlap_matrix(boxes: np.ndarray) -> np.ndarray:
    """Pairwise overlap fraction between hypotheses given ``(P, N, 4)`` boxes."""
    p = len(boxes)
    areas = _areas(boxes)
    out = np.zeros((p, p))
    for i in range(p):
        shared = np.sum(intersection_area(boxes[i][None], boxes), axis=-1)
        denom = np.minimum(areas[i], areas)
        np.divide(shared, denom, out=out[i], where=denom > 0)
    return np.minimum(out, 1.0)


def _eligible(pool: HypothesisPool, cfg: EngineConfig) -> tuple[np.ndarray, np.ndarray]:
    """Indices passing the score filter and whether each spans the whole batch."""
    rows = pool.rows
    present = rows >= 0
    n = pool.n_frames
    full = present[:, 0] & present[:, n - 1] if len(rows) else np.zeros(0, dtype=bool)
    ok = pool.scores >= cfg.c_score
    if cfg.length_rule == "literal":
        ok &= full
    idx = np.flatnonzero(ok)
    return idx, full[idx]


def select_greedy(pool: HypothesisPool, cfg: EngineConfig) -> np.ndarray:
    """Greedy non-overlapping selection, best scores first; returns pool indices."""
    idx, full = _eligible(pool, cfg)
    if len(idx) == 0:
        return idx
    order = preference_order(pool.scores[idx], pool.rows[idx])
    if cfg.length_rule == "relaxed":
        order = np.concatenate([order[full[order]], order[~full[order]]])
    cand = idx[order]
    boxes = pool.ctx.rows_to_boxes(pool.rows[cand])
    areas = _areas(boxes)
    accepted: list[int] = []
    for k in range(len(cand)):
        if accepted:
            acc = np.array(accepted)
            shared = np.sum(intersection_area(boxes[k][None], boxes[acc]), axis=-1)
            denom = np.minimum(areas[k], areas[acc])
            frac = np.divide(shared, denom, out=np.zeros_like(shared), where=denom > 0)
            if np.any(frac > cfg.c_iou):
                continue
        accepted.append(k)
    return cand[np.array(accepted, dtype=np.int64)]


def max_weight_independent_set(weights: np.ndarray, conflict: np.ndarray) -> list[int]:
    """Exact maximum-weight independent set by branch and bound (weights > 0)."""
    w = np.asarray(weights, dtype=float)
    order = sorted(range(len(w)), key=lambda i: (-w[i], i))
    conf = [set(np.flatnonzero(conflict[i])) - {i} for i in range(len(w))]
    best_val = -1.0
    best: list[int] = []

    def search(pos: int, chosen: list[int], banned: set, value: float):
        nonlocal best_val, best
        bound = value + sum(w[order[j]] for j in range(pos, len(order)) if order[j] not in banned)
        if bound <= best_val:
            return
        if pos == len(order):
            best_val, best = value, list(chosen)
            return
        i = order[pos]
        if i not in banned:
            chosen.append(i)
            search(pos + 1, chosen, banned | conf[i], value + w[i])
            chosen.pop()
        search(pos + 1, chosen, banned, value)

    search(0, [], set(), 0.0)
    return sorted(best)


def select_exact(pool: HypothesisPool, cfg: EngineConfig) -> np.ndarray:
    """Maximise the summed score of a pairwise non-overlapping subset.

    The conflict graph is split into connected components, each solved
    exactly; a component larger than ``exact_limit`` raises.
    """
    idx, _ = _eligible(pool, cfg)
    if len(idx) == 0:
        return idx
    boxes = pool.ctx.rows_to_boxes(pool.rows[idx])
    conflict = overlap_matrix(boxes) > cfg.c_iou
    conflict |= conflict.T
    ncomp, labels = connected_components(conflict, directed=False)
    chosen: list[int] = []
    for c in range(ncomp):
        members = np.flatnonzero(labels == c)
        if len(members) > cfg.exact_limit:
            raise PoolTooLargeError(
                f"conflict component of {len(members)} hypotheses exceeds exact_limit={cfg.exact_limit}")
        sub = max_weight_independent_set(pool.scores[idx[members]], conflict[np.ix_(members, members)])
        chosen.extend(members[sub])
    return idx[np.sort(np.array(chosen, dtype=np.int64))]


def select(pool: HypothesisPool, cfg: EngineConfig) -> np.ndarray:
    return select_exact(pool, cfg) if cfg.selection == "exact" else select_greedy(pool, cfg)


def objective(pool: HypothesisPool, chosen: np.ndarray) -> float:
    return float(np.sum(pool.scores[chosen]))


# ----------------------------------------------------------------- stitching

@dataclass
class BatchResult:
    start: int
    n_frames: int
    tracklets: list  # selected Tracklets over the batch window (absolute detection ids)
    pool_size: int = 0
    rounds: list = field(default_factory=list)


@dataclass
class Track:
    track_id: int
    frames: dict  # frame -> (box array, detection_id)

    def tracklet(self, n_frames: int) -> Tracklet:
        boxes = np.zeros((n_frames, 4))
        ids: list = [None] * n_frames
        for f, (box, did) in self.frames.items():
            boxes[f] = box
            ids[f] = did
        return Tracklet(boxes, tuple(ids))


def batch_windows(n_frames: int, cfg: EngineConfig) -> list[tuple[int, int]]:
    """``(start, length)`` of overlapping windows covering ``n_frames``."""
    n = cfg.batch_frames
    if n_frames <= n:
        return [(0, n_frames)] if n_frames > 0 else []
    shift = cfg.batch_shift
    starts = list(range(0, n_frames - n + 1, shift))
    if starts[-1] + n < n_frames:
        starts.append(starts[-1] + shift)
    return [(s, min(n, n_frames - s)) for s in starts]


def _ids_in(t: Tracklet, lo: int, hi: int, offset: int) -> set:
    return {i for f, i in enumerate(t.detection_ids) if i is not None and lo <= f + offset < hi}


def link_batches(prev: BatchResult, cur: BatchResult) -> dict[int, int]:
    """Map current-batch trajectory index -> previous-batch index.

    Pairs must share more than half of the detections either of them holds
    in the overlap window; the assignment maximises the shared count.
    """
    lo, hi = cur.start, prev.start + prev.n_frames
    if hi <= lo or not prev.tracklets or not cur.tracklets:
        return {}
    prev_ids = [_ids_in(t, lo, hi, prev.start) for t in prev.tracklets]
    cur_ids = [_ids_in(t, lo, hi, cur.start) for t in cur.tracklets]
    shared = np.zeros((len(cur_ids), len(prev_ids)))
    for i, c in enumerate(cur_ids):
        for j, p in enumerate(prev_ids):
            common = len(c & p)
            if common and common > 0.5 * max(len(c), len(p)):
                shared[i, j] = common
    r, c = linear_sum_assignment(-shared)
    return {int(i): int(j) for i, j in zip(r, c) if shared[i, j] > 0}


def stitch(batches: Sequence[BatchResult], n_frames: Optional[int] = None) -> list[Track]:
    """Join per-batch selections into full-sequence tracks.

    Each batch owns the frames from the middle of its overlap with the
    previous batch up to the middle of its overlap with the next one.
    """
    if not batches:
        return []
    for a, b in zip(batches, batches[1:]):
        if b.start <= a.start or b.start > a.start + a.n_frames:
            raise ValueError(f"inconsistent batch boundaries: {a.start}+{a.n_frames} then {b.start}")
    owners = []
    for k, b in enumerate(batches):
        lo = 0 if k == 0 else b.start + (batches[k - 1].start + batches[k - 1].n_frames - b.start) // 2
        owners.append(lo)
    tracks: dict[int, Track] = {}
    next_id = 1
    prev_ids: list[int] = []
    for k, b in enumerate(batches):
        lo = owners[k]
        hi = owners[k + 1] if k + 1 < len(batches) else b.start + b.n_frames
        links = link_batches(batches[k - 1], b) if k else {}
        ids = []
        for i, t in enumerate(b.tracklets):
            if i in links:
                tid = prev_ids[links[i]]
            else:
                tid = next_id
                next_id += 1
            ids.append(tid)
            for f in t.support:
                g = f + b.start
                if lo <= g < hi:
                    tracks.setdefault(tid, Track(tid, {})).frames[g] = (np.array(t.boxes[f]), t.detection_ids[f])
        prev_ids = ids
    out = [t for t in tracks.values() if t.frames]
    # renumber densely in order of first appearance
    out.sort(key=lambda t: (min(t.frames), t.track_id))
    for k, t in enumerate(out, 1):
        t.track_id = k
    return out


def _carried_rows(prev: BatchResult, ctx: BatchContext) -> list[np.ndarray]:
    rows = []
    for t in prev.tracklets:
        r = np.full(ctx.n_frames, -1, dtype=np.int64)
        for f, did in enumerate(t.detection_ids):
            g = f + prev.start - ctx.start
            if did is not None and 0 <= g < ctx.n_frames and did in ctx.local:
                r[g] = ctx.local[did]
        if (r >= 0).any():
            rows.append(r)
    return rows


def _history(prev: Optional[BatchResult], start: int, embeddings) -> dict:
    """detection_id -> representative embedding of the previous-batch trajectory holding it.

    The representative is taken over that trajectory's detections before ``start``.
    """
    if embeddings is None or prev is None:
        return {}
    out = {}
    for t in prev.tracklets:
        before = [did for f, did in enumerate(t.detection_ids) if did is not None and f + prev.start < start]
        if not before:
            continue
        rep = representative_embedding([embeddings[d] for d in before])
        for did in t.id_sequence:
            out[did] = rep
    return out


def track_sequence(detections: Sequence[Detection], n_frames: int, make_scorer, cfg: EngineConfig,
                   feature_cfg: FeatureConfig, embeddings=None) -> tuple[list[Track], list[BatchResult]]:
    """Run generate + select on overlapping batches and stitch the result.

    ``make_scorer(ctx)`` returns a scoring function for one batch; it may
    expose ``output_boxes(rows)`` to report regressed boxes.
    """
    results: list[BatchResult] = []
    for start, length in batch_windows(n_frames, cfg):
        prev = results[-1] if results else None
        history = _history(prev, start, embeddings)
        ctx = BatchContext(detections, start, length, feature_cfg, embeddings=embeddings, history=history)
        scorer = make_scorer(ctx)
        carried = _carried_rows(prev, ctx) if prev is not None else []
        pool = generate(init_pool(ctx), scorer, cfg, carried=carried)
        chosen = select(pool, cfg)
        boxes_fn = getattr(scorer, "output_boxes", None)
        rows = pool.rows[chosen]
        boxes = boxes_fn(rows) if boxes_fn is not None and len(rows) else ctx.rows_to_boxes(rows)
        tracklets = [ctx.tracklet(r, float(pool.scores[i]), boxes=bx) for r, i, bx in zip(rows, chosen, boxes)]
        results.append(BatchResult(start, length, tracklets, len(pool), list(pool.round_sizes)))
        log.debug("batch at %d: %d detections, pool %d, selected %d", start, len(ctx), len(pool), len(chosen))
    return stitch(results, n_frames), results
