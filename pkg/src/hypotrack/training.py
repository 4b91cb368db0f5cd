"""Training the scorer on the hypotheses the tracker itself produces.

The loop alternates two steps: run hypothesis generation with the current
weights (with randomised merging) and add every candidate it encounters to
the dataset, then train one epoch on the balanced, hard-mined dataset. Once
the dataset stops growing, the model is trained to convergence on all of it
and the checkpoint with the best validation loss is kept.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .engine import Chooser, EngineConfig, generate, init_pool
from .features import BatchContext, FeatureConfig, FeatureTensor
from .geometry import GroundTruthTrajectory, Tracklet, box_iou
from .metrics import idf_pair
from .scorer import (NonFiniteError, OptimizerState, ScorerModel, Targets, adam_step, loss,
                     loss_and_gradients, save_checkpoint)
from .scoring import ModelScorer, idf_rows

log = logging.getLogger(__name__)

N_BINS = 10
DATASET_MODES = ("generated", "near_gt", "seeded")
LOG_COLUMNS = ("iter", "epoch", "dataset_size", "train_loss", "val_loss", "temperature", "seed")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_frames: int = 9
    minibatch: int = 32
    hard_mining: int = 3
    temperature_start: float = 10.0
    temperature_end: float = 0.1
    anneal_iterations: int = 30
    growth_window: int = 10
    growth_threshold: float = 0.05
    max_build_iterations: int = 60
    final_epochs: int = 30
    val_fraction: float = 0.2
    lr: float = 0.001
    loss_norm: str = "squared"
    # "generated": engine hypotheses only; "near_gt": fixed set with at most one identity
    # switch; "seeded": the near_gt set plus generated hypotheses
    dataset: str = "generated"
    seed: int = 0
    min_bin_samples: int = 0  # per-bin floor for balancing; 0 takes the smallest bin's count
    engine: EngineConfig = EngineConfig()

    def temperature(self, iteration: int) -> float:
        """Geometric anneal from start to end over ``anneal_iterations``, then constant."""
        if self.anneal_iterations <= 0:
            return self.temperature_end
        frac = min(iteration, self.anneal_iterations) / self.anneal_iterations
        return float(self.temperature_start * (self.temperature_end / self.temperature_start) ** frac)


# ------------------------------------------------------------------ labelling

def assign_ground_truth(t: Tracklet, gts: Sequence[GroundTruthTrajectory]):
    """Trajectory with the highest IDF against ``t`` (first one on ties), and that IDF.

    Returns ``(None, 0.0)`` when no trajectory matches any of ``t``'s boxes.
    """
    best, best_v = None, 0.0
    for g in gts:
        v = idf_pair(t, g)
        if v > best_v:
            best, best_v = g, v
    return best, best_v


def idf_bin(idf: np.ndarray) -> np.ndarray:
    return np.minimum((np.asarray(idf) * N_BINS).astype(np.int64), N_BINS - 1)


@dataclass
class TrainingSample:
    features: FeatureTensor
    targets: Targets
    idf: float
    bin: int
    tracklet: Tracklet
    ground_truth: Optional[GroundTruthTrajectory]


@dataclass
class _Window:
    ctx: BatchContext
    gt_boxes: np.ndarray  # (G, N, 4)
    gts: list             # GroundTruthTrajectory windows, aligned with gt_boxes
    scene: int


class Dataset:
    """Append-only store of labelled hypothesis rows.

    Samples keep only their window and row; features and targets are derived
    on demand, so the stored labels cannot drift from the tracklets.
    """

    def __init__(self, windows: Sequence[_Window]):
        self.windows = list(windows)
        self._keys: set = set()
        self._win: list = []
        self._rows: list = []
        self._idf: list = []
        self._gt: list = []
        self._cache = None
        self._rows_cat = None

    def __len__(self) -> int:
        return sum(len(w) for w in self._win)

    def _arrays(self):
        if self._cache is None:
            if self._win:
                self._cache = (np.concatenate(self._win), np.concatenate(self._idf), np.concatenate(self._gt))
            else:
                self._cache = (np.zeros(0, np.int64), np.zeros(0), np.zeros(0, np.int64))
        return self._cache

    @property
    def window_index(self) -> np.ndarray:
        return self._arrays()[0]

    @property
    def idf(self) -> np.ndarray:
        return self._arrays()[1]

    @property
    def gt_index(self) -> np.ndarray:
        return self._arrays()[2]

    @property
    def bins(self) -> np.ndarray:
        return idf_bin(self.idf)

    def rows_for(self, idx: np.ndarray) -> np.ndarray:
        return self._all_rows()[idx]

    def _all_rows(self):
        if self._rows_cat is None:
            self._rows_cat = np.concatenate(self._rows) if self._rows else np.zeros((0, 0), np.int16)
        return self._rows_cat

    def add(self, w: int, rows: np.ndarray) -> int:
        """Label and append rows not seen before for window ``w``; returns the count added."""
        rows = np.asarray(rows, dtype=np.int64)
        if len(rows) == 0:
            return 0
        rows = np.unique(rows, axis=0)
        fresh = []
        for k, r in enumerate(rows):
            key = (w, r.astype(np.int16).tobytes())
            if key not in self._keys:
                self._keys.add(key)
                fresh.append(k)
        if not fresh:
            return 0
        rows = rows[fresh]
        win = self.windows[w]
        m = idf_rows(win.ctx, rows, win.gt_boxes)  # (B, G)
        if m.shape[1]:
            gi = np.argmax(m, axis=1)
            v = m[np.arange(len(rows)), gi]
            gi = np.where(v > 0, gi, -1)
        else:
            gi = np.full(len(rows), -1)
            v = np.zeros(len(rows))
        self._win.append(np.full(len(rows), w, dtype=np.int64))
        self._rows.append(rows.astype(np.int16))
        self._idf.append(v.astype(float))
        self._gt.append(gi.astype(np.int64))
        self._cache = None
        self._rows_cat = None
        return len(rows)

    def batch(self, idx: np.ndarray):
        """Features ``(B, N, F)``, presence and targets for samples ``idx``."""
        idx = np.asarray(idx, dtype=np.int64)
        wi = self.window_index[idx]
        rows = self.rows_for(idx).astype(np.int64)
        gt = self.gt_index[idx]
        n = rows.shape[1]
        first = self.windows[int(wi[0])].ctx
        x = np.zeros((len(idx), n, first.cfg.dim))
        det = np.zeros((len(idx), n, 4))
        gtb = np.zeros((len(idx), n, 4))
        for w in np.unique(wi):
            sel = np.flatnonzero(wi == w)
            win = self.windows[int(w)]
            x[sel], _ = win.ctx.features(rows[sel])
            det[sel] = win.ctx.rows_to_boxes(rows[sel])
            has = gt[sel] >= 0
            gtb[sel[has]] = win.gt_boxes[gt[sel][has]]
        presence = rows >= 0
        return x, presence, Targets.build(det, gtb, first.cfg.scale)

    def sample(self, i: int) -> TrainingSample:
        w = self.windows[int(self.window_index[i])]
        row = self.rows_for(np.array([i]))[0].astype(np.int64)
        t = w.ctx.tracklet(row)
        g = int(self.gt_index[i])
        gtt = w.gts[g] if g >= 0 else None
        x, presence = w.ctx.features(row[None])
        return TrainingSample(FeatureTensor(x[0].T, presence[0]), Targets.for_tracklet(t, gtt, w.ctx.cfg.scale),
                              float(self.idf[i]), int(idf_bin(self.idf[i])), t, gtt)


# ------------------------------------------------------------- sampling rules

def balance(bins: np.ndarray, rng: np.random.Generator, floor: int = 0) -> np.ndarray:
    """Equal-count subset across the non-empty IDF bins.

    Takes every sample of the smallest non-empty bin and as many, drawn
    without replacement, from each other non-empty bin. With ``floor`` above
    the smallest count, every bin contributes ``floor`` samples instead and
    bins smaller than that are drawn with replacement. Returns indices.
    """
    bins = np.asarray(bins)
    if len(bins) == 0:
        raise ValueError("cannot balance an empty dataset")
    labels, counts = np.unique(bins, return_counts=True)
    s = max(int(counts.min()), int(floor))
    out = []
    for b in labels:
        members = np.flatnonzero(bins == b)
        if len(members) == s:
            out.append(members)
        else:
            out.append(np.sort(rng.choice(members, size=s, replace=len(members) < s)))
    return np.concatenate(out)


def hard_mine(indices: np.ndarray, loss_fn: Callable[[np.ndarray], np.ndarray], h: int, k: int,
              rng: np.random.Generator) -> np.ndarray:
    """Draw ``h * k`` samples uniformly and keep the ``k`` with the largest loss.

    With fewer than ``h * k`` samples the whole set is used instead.
    """
    indices = np.asarray(indices)
    if len(indices) < h * k:
        log.info("hard mining: only %d samples for a draw of %d; using all of them", len(indices), h * k)
        draw = indices
    else:
        draw = rng.choice(indices, size=h * k, replace=False)
    if h == 1 or len(draw) <= k:
        return draw[:k]
    losses = loss_fn(draw)
    top = np.argsort(-losses, kind="stable")[:k]
    return draw[top]


# -------------------------------------------------------------- dataset growth

def _window(b, s: int, start: int, n: int, fcfg) -> _Window:
    ctx = BatchContext(b.detections, start, n, fcfg, embeddings=b.embeddings)
    gts = [g.window(start, start + n) for g in b.gts]
    return _Window(ctx, np.array([g.boxes for g in gts]).reshape(-1, n, 4), gts, s)


def split_windows(scenes, n: int, val_fraction: float, fcfgs) -> tuple[list, list]:
    """Consecutive full-length windows per scene; the trailing ones are held out.

    The held-out count is ``val_fraction`` of a scene's windows, rounded, and
    at least one when the fraction is positive and the scene has two or more.
    """
    train_w, val_w = [], []
    for s, b in enumerate(scenes):
        count = b.n_frames // n
        n_val = int(round(val_fraction * count))
        if val_fraction > 0 and count > 1:
            n_val = max(1, n_val)
        n_val = min(n_val, count - 1) if count > 1 else 0
        for k in range(count):
            (val_w if k >= count - n_val else train_w).append(_window(b, s, k * n, n, fcfgs[s]))
    return train_w, val_w


def build_iteration(model: ScorerModel, dataset: Dataset, engine: EngineConfig, temperature: Optional[float],
                    rng: np.random.Generator, windows: Optional[Sequence[int]] = None,
                    autocontext: bool = False) -> int:
    """Run generation in every window and add all hypotheses it met; returns the count added.

    With a ``temperature`` the per-source argmax is replaced by a softmax
    draw; without one the deterministic engine is used.
    """
    added = 0
    chooser = Chooser(temperature, rng) if temperature is not None else None
    for w in (range(len(dataset.windows)) if windows is None else windows):
        win = dataset.windows[w]
        if len(win.ctx) == 0:
            continue
        seen = []
        pool = init_pool(win.ctx)
        seen.append(pool.rows.copy())
        scorer = ModelScorer(model, win.ctx, autocontext=autocontext)
        generate(pool, scorer, engine, chooser=chooser, on_candidates=lambda c: seen.append(c.rows))
        added += dataset.add(w, np.concatenate(seen))
    return added


def near_ground_truth_rows(win: _Window) -> np.ndarray:
    """Hypotheses made of ground-truth matched detections with at most one identity switch.

    Covers every contiguous sub-span of each trajectory and every splice of
    one trajectory's head onto another's tail.
    """
    ctx = win.ctx
    n = ctx.n_frames
    g = len(win.gt_boxes)
    match = np.full((g, n), -1, dtype=np.int64)
    if len(ctx) and g:
        ious = box_iou(ctx.boxes[:, None, :], win.gt_boxes[:, ctx.frame, :].transpose(1, 0, 2))  # (D, G)
        for gi in range(g):
            for f in range(n):
                m = ctx.frame_members[f]
                if len(m) == 0:
                    continue
                best = m[np.argmax(ious[m, gi])]
                if ious[best, gi] > 0.5:
                    match[gi, f] = best
    rows = []
    for gi in range(g):
        for a in range(n):
            for b in range(a + 1, n + 1):
                r = np.full(n, -1, dtype=np.int64)
                r[a:b] = match[gi, a:b]
                if (r >= 0).any():
                    rows.append(r)
    for g1 in range(g):
        for g2 in range(g):
            if g1 == g2:
                continue
            for s in range(1, n):
                r = np.concatenate([match[g1, :s], match[g2, s:]])
                if (r[:s] >= 0).any() and (r[s:] >= 0).any():
                    rows.append(r)
    return np.array(rows, dtype=np.int64).reshape(-1, n)


# ------------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: ScorerModel
    log: list
    dataset: Dataset
    val: Dataset
    iterations: int


def _sample_losses(model, dataset: Dataset, idx: np.ndarray, norm: str, chunk: int = 2048) -> np.ndarray:
    out = []
    for s in range(0, len(idx), chunk):
        x, pres, tg = dataset.batch(idx[s:s + chunk])
        preds, _ = model.forward(x, pres)
        out.append(loss(preds, tg, norm)[0])
    return np.concatenate(out) if out else np.zeros(0)


def _draw_losses(model, dataset: Dataset, norm: str):
    def fn(idx):
        x, pres, tg = dataset.batch(idx)
        preds, _ = model.forward(x, pres, training=True)
        return loss(preds, tg, norm)[0]
    return fn


def train_epoch(model: ScorerModel, state: OptimizerState, dataset: Dataset, cfg: TrainConfig,
                rng: np.random.Generator) -> float:
    """One pass over a fresh balanced subset in hard-mined mini-batches; returns mean loss."""
    pool = balance(dataset.bins, rng, cfg.min_bin_samples)
    pool = rng.permutation(pool)
    step = cfg.hard_mining * cfg.minibatch
    losses = []
    for s in range(0, len(pool), step):
        chunk = pool[s:s + step]
        if len(chunk) < 2:
            continue
        chosen = hard_mine(chunk, _draw_losses(model, dataset, cfg.loss_norm), cfg.hard_mining,
                           cfg.minibatch, rng)
        x, pres, tg = dataset.batch(np.sort(chosen))
        value, grads, cache = loss_and_gradients(model, x, pres, tg, training=True, norm=cfg.loss_norm)
        if not math.isfinite(value):
            raise NonFiniteError("non-finite training loss")
        model.update_running_stats(cache)
        adam_step(model, state, grads)
        losses.append(value)
    return float(np.mean(losses)) if losses else math.nan


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return str(v)


def train(model: ScorerModel, scenes: Sequence, cfg: TrainConfig, feature_cfgs=None,
          log_path=None, checkpoint_dir=None, autocontext: bool = False) -> TrainResult:
    """Alternate data generation and single epochs, then train on the final set.

    ``scenes`` are sequence bundles with ground truth. The last
    ``val_fraction`` of each scene's frames is held out for validation.
    """
    if cfg.dataset not in DATASET_MODES:
        raise ValueError(f"dataset must be one of {DATASET_MODES}")
    if not scenes:
        raise ValueError("no training scenes")
    if any(not b.gts for b in scenes):
        raise ValueError("every training scene needs ground truth")
    if feature_cfgs is None:
        feature_cfgs = [FeatureConfig(image_width=b.image_width, image_height=b.image_height) for b in scenes]
    rng = np.random.default_rng(cfg.seed)
    train_w, val_w = split_windows(scenes, cfg.batch_frames, cfg.val_fraction, feature_cfgs)
    if not train_w:
        raise ValueError(f"scenes are shorter than one {cfg.batch_frames}-frame window")
    data, val = Dataset(train_w), Dataset(val_w)
    state = OptimizerState.for_model(model, lr=cfg.lr)
    rows_log: list = []
    fh = open(log_path, "w") if log_path is not None else None

    def emit(*vals):
        line = ",".join(_fmt(v) for v in vals)
        rows_log.append(line)
        if fh is not None:
            fh.write(line + "\n")
            fh.flush()

    if fh is not None:
        fh.write(",".join(LOG_COLUMNS) + "\n")
    last_good = model.copy()
    try:
        it = 0
        if cfg.dataset in ("near_gt", "seeded"):
            for w, win in enumerate(data.windows):
                data.add(w, near_ground_truth_rows(win))
            for w, win in enumerate(val.windows):
                val.add(w, near_ground_truth_rows(win))
        if cfg.dataset != "near_gt":
            sizes = []
            while it < cfg.max_build_iterations:
                temp = cfg.temperature(it)
                build_iteration(model, data, cfg.engine, temp, rng, autocontext=autocontext)
                sizes.append(len(data))
                last_good = model.copy()
                tl = train_epoch(model, state, data, cfg, rng)
                emit(it, 0, len(data), tl, math.nan, temp, cfg.seed)
                log.info("iteration %d: dataset %d, loss %.4f, temperature %.3g", it, len(data), tl, temp)
                it += 1
                if len(sizes) > cfg.growth_window:
                    before = sizes[-1 - cfg.growth_window]
                    if sizes[-1] - before < cfg.growth_threshold * before:
                        break
            build_iteration(model, val, cfg.engine, None, rng, autocontext=autocontext)
        best, best_loss = model.copy(), math.inf
        val_idx = np.arange(len(val))
        for epoch in range(1, cfg.final_epochs + 1):
            last_good = model.copy()
            tl = train_epoch(model, state, data, cfg, rng)
            vl = float(np.mean(_sample_losses(model, val, val_idx, cfg.loss_norm))) if len(val) else tl
            emit(it, epoch, len(data), tl, vl, cfg.temperature_end if cfg.dataset != "near_gt" else math.nan,
                 cfg.seed)
            if vl < best_loss:
                best, best_loss = model.copy(), vl
    except NonFiniteError as e:
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir) / "aborted.ckpt", last_good, state)
        raise TrainingDiverged(f"training diverged: {e}") from e
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_dir is not None:
        save_checkpoint(Path(checkpoint_dir) / "best.ckpt", best)
    return TrainResult(best, rows_log, data, val, it)
