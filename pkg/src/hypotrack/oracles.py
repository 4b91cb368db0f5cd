"""Independent verifiers: finite differences, brute-force selection, and the
score/metric identity under perfect per-frame predictions.

Each check returns a small result object with a ``passed`` flag so the CLI
and the test-suite can share them.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .engine import EngineConfig, HypothesisPool, generate, init_pool, objective, select_exact, select_greedy
from .features import BatchContext, FeatureConfig
from .geometry import GroundTruthTrajectory, Tracklet, box_iou
from .metrics import idf_pair
from .scorer import ScorerModel, Targets, loss, loss_and_gradients, score_from_predictions
from .scoring import OracleScorer


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)


@dataclass
class GradientCheck:
    max_error: dict = field(default_factory=dict)  # parameter -> worst relative error
    tolerance: float = 1e-3

    @property
    def worst(self) -> float:
        return max(self.max_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


def random_instance(rng: np.random.Generator, n_frames: int, batch: int = 2, scale=(64.0, 36.0)):
    """Random boxes, ground truth and features for a loss evaluation."""
    w, h = scale
    centre = rng.uniform([10, 8], [50, 26], size=(batch, 1, 2))
    size = rng.uniform([6, 10], [10, 16], size=(batch, 1, 2))
    det = np.concatenate([centre + rng.normal(0, 1.0, (batch, n_frames, 2)),
                          size + rng.normal(0, 0.5, (batch, n_frames, 2))], axis=-1)
    gt = np.concatenate([centre + rng.normal(0, 1.5, (batch, n_frames, 2)),
                         size + rng.normal(0, 0.5, (batch, n_frames, 2))], axis=-1)
    det_on = rng.random((batch, n_frames)) < 0.8
    det_on[:, 0] = True
    gt_on = rng.random((batch, n_frames)) < 0.8
    det = np.where(det_on[..., None], det, 0.0)
    gt = np.where(gt_on[..., None], gt, 0.0)
    return det, gt, det_on, np.array([w, h, w, h])


def gradient_check(seed: int, n_frames: int = 8, n_features: int = 5, embed: int = 4, hidden: int = 3,
                   step: float = 1e-4, tolerance: float = 1e-3) -> GradientCheck:
    """Analytic loss gradients of a small model against central differences."""
    rng = np.random.default_rng(seed)
    model = ScorerModel(n_features, embed=embed, hidden=hidden, seed=int(rng.integers(2 ** 31)))
    det, gt, det_on, scale = random_instance(rng, n_frames)
    x = np.where(det_on[..., None], rng.normal(size=det_on.shape + (n_features,)), 0.0)
    targets = Targets.build(det, gt, scale)
    _, grads, _ = loss_and_gradients(model, x, det_on, targets, training=True)

    def value() -> float:
        preds, _ = model.forward(x, det_on, training=True)
        return float(np.mean(loss(preds, targets)[0]))

    out = GradientCheck(tolerance=tolerance)
    for name, p in model.params.items():
        num = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            keep = p[i]
            p[i] = keep + step
            up = value()
            p[i] = keep - step
            down = value()
            p[i] = keep
            num[i] = (up - down) / (2 * step)
        out.max_error[name] = float(np.max(relative_error(grads[name], num)))
    return out


@dataclass
class ConsistencyCheck:
    count: int
    max_abs_diff: float

    @property
    def passed(self) -> bool:
        return self.max_abs_diff <= 1e-12


def random_pair(rng: np.random.Generator, n_frames: int):
    """A tracklet and a ground-truth trajectory with a mix of good and poor overlaps."""
    base = rng.uniform([0, 0, 5, 5], [100, 100, 30, 30], size=(n_frames, 4))
    jitter = rng.normal(0, rng.choice([0.5, 3.0, 10.0]), size=(n_frames, 4))
    t_boxes = base + jitter
    t_boxes[:, 2:] = np.abs(t_boxes[:, 2:]) + 1.0
    t_on = rng.random(n_frames) < rng.uniform(0.2, 1.0)
    g_on = rng.random(n_frames) < rng.uniform(0.2, 1.0)
    t_boxes[~t_on] = 0.0
    g_boxes = np.where(g_on[:, None], base, 0.0)
    ids = tuple(k if on else None for k, on in enumerate(t_on))
    return Tracklet(t_boxes, ids), GroundTruthTrajectory(1, g_boxes)


def score_metric_consistency(count: int = 1000, seed: int = 0) -> ConsistencyCheck:
    """Score of perfect per-frame predictions equals the pairwise IDF."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        n = int(rng.integers(1, 13))
        t, g = random_pair(rng, n)
        lab = g.present.astype(float)
        hit = (box_iou(t.boxes, g.boxes) > 0.5).astype(float)
        s = float(score_from_predictions(hit, lab, t.present))
        worst = max(worst, abs(s - idf_pair(t, g)))
    return ConsistencyCheck(count, worst)


def brute_force_selection(scores: np.ndarray, conflict: np.ndarray) -> tuple[float, tuple]:
    """Best total score over all conflict-free subsets by enumeration."""
    p = len(scores)
    best, best_set = 0.0, ()
    for r in range(1, p + 1):
        for subset in itertools.combinations(range(p), r):
            if any(conflict[a, b] for a, b in itertools.combinations(subset, 2)):
                continue
            v = float(np.sum(scores[list(subset)]))
            if v > best + 1e-12:
                best, best_set = v, subset
    return best, best_set


def _brute_force_masks(scores: np.ndarray, conflict: np.ndarray) -> float:
    """Vectorised enumeration over all ``2**p`` subsets."""
    p = len(scores)
    if p == 0:
        return 0.0
    masks = np.arange(1 << p, dtype=np.int64)
    bits = (masks[:, None] >> np.arange(p)) & 1
    ok = np.ones(len(masks), dtype=bool)
    for a in range(p):
        for b in range(a + 1, p):
            if conflict[a, b]:
                ok &= ~((bits[:, a] == 1) & (bits[:, b] == 1))
    return float(np.max((bits[ok] * scores).sum(axis=1)))


@dataclass
class SelectionCheck:
    pools: int
    worst_gap: float
    exact_mismatches: int
    gap_tolerance: float = 0.05

    @property
    def passed(self) -> bool:
        return self.exact_mismatches == 0 and self.worst_gap <= self.gap_tolerance


def random_small_pool(rng: np.random.Generator, max_size: int = 15, cfg: EngineConfig = EngineConfig()):
    """Up to ``max_size`` top-scoring hypotheses grown on a small synthetic scene."""
    from .synth import SceneSpec, synth_scene

    scene = synth_scene(SceneSpec(n_people=int(rng.integers(2, 5)), n_frames=6, noise=3.0, miss_rate=0.1,
                                  fp_rate=0.1, seed=int(rng.integers(2 ** 31))))
    fc = FeatureConfig(image_width=scene.image_width, image_height=scene.image_height)
    ctx = BatchContext(scene.detections, 0, scene.n_frames, fc)
    scorer = OracleScorer(ctx, scene.gts)
    pool = generate(init_pool(ctx), scorer, cfg)
    ok = np.flatnonzero(pool.scores >= cfg.c_score)
    size = int(rng.integers(1, max_size + 1))
    top = ok[np.argsort(-pool.scores[ok], kind="stable")[:size]]
    # jitter scores so the greedy order is not dictated by exact IDF ties
    sub = HypothesisPool(ctx)
    sub.add(pool.rows[top], np.clip(pool.scores[top] + rng.uniform(-0.02, 0.02, len(top)), cfg.c_score, 1.0))
    return sub


def selection_check(n_pools: int = 50, seed: int = 0, max_size: int = 15,
                    cfg: EngineConfig = EngineConfig(length_rule="none")) -> SelectionCheck:
    """Greedy vs exact selection, and exact vs enumeration, on random small pools."""
    from .engine import overlap_matrix

    rng = np.random.default_rng(seed)
    worst, mismatches = 0.0, 0
    for _ in range(n_pools):
        pool = random_small_pool(rng, max_size, cfg)
        ex = objective(pool, select_exact(pool, cfg))
        gr = objective(pool, select_greedy(pool, cfg))
        conflict = overlap_matrix(pool.ctx.rows_to_boxes(pool.rows)) > cfg.c_iou
        conflict |= conflict.T
        brute = _brute_force_masks(pool.scores, conflict)
        if abs(brute - ex) > 1e-9:
            mismatches += 1
        if ex > 0:
            worst = max(worst, (ex - gr) / ex)
    return SelectionCheck(n_pools, worst, mismatches)
