"""Scoring functions that plug into the hypothesis engine.

Each scorer is bound to one :class:`BatchContext` and maps hypothesis rows
``(B, N)`` to scores ``(B,)``.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .features import (BatchContext, FeatureConfig, appearance_features, geometric_features,
                       tracklet_features)
from .geometry import GroundTruthTrajectory, Tracklet, box_iou
from .scorer.network import Predictions, ScorerModel
from .scorer.objective import score_from_predictions, shifted_boxes


class ModelScorer:
    """Scores hypotheses with a trained regressor.

    With ``autocontext`` the first pass regresses box shifts, the shifted
    boxes are fed back through the feature map, and the second pass scores.
    """

    def __init__(self, model: ScorerModel, ctx: BatchContext, autocontext: bool = False,
                 chunk: int = 4096):
        self.model = model
        self.ctx = ctx
        self.autocontext = autocontext
        self.chunk = chunk

    def _predict(self, rows: np.ndarray, boxes: Optional[np.ndarray] = None) -> tuple[Predictions, np.ndarray]:
        iou, lab, sft = [], [], []
        present_all = []
        for s in range(0, len(rows), self.chunk):
            x, present = self.ctx.features(rows[s:s + self.chunk],
                                           None if boxes is None else boxes[s:s + self.chunk])
            p = self.model.predict(x, present)
            iou.append(p.iou)
            lab.append(p.lab)
            sft.append(p.sft)
            present_all.append(present)
        return (Predictions(np.concatenate(iou), np.concatenate(lab), np.concatenate(sft)),
                np.concatenate(present_all))

    def shifted(self, rows: np.ndarray) -> np.ndarray:
        preds, present = self._predict(rows)
        boxes = shifted_boxes(self.ctx.rows_to_boxes(rows), preds.sft, self.ctx.cfg.scale)
        return np.where(present[..., None], boxes, 0.0)

    def __call__(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64).reshape(-1, self.ctx.n_frames)
        if len(rows) == 0:
            return np.zeros(0)
        boxes = self.shifted(rows) if self.autocontext else None
        preds, present = self._predict(rows, boxes)
        return score_from_predictions(preds.iou, preds.lab, present)

    def output_boxes(self, rows: np.ndarray) -> np.ndarray:
        if self.autocontext:
            return self.shifted(rows)
        return self.ctx.rows_to_boxes(rows)


def autocontext_score(model: ScorerModel, t: Tracklet, frame_detections: Sequence, cfg: FeatureConfig,
                      emb=None, history_vec=None) -> tuple[float, Tracklet]:
    """Two-pass score of a single tracklet; returns the score and the shifted tracklet."""
    feats = tracklet_features(t, frame_detections, cfg, emb, history_vec)
    first = model.forward(feats.values.T, feats.presence)[0]
    moved = shifted_boxes(t.boxes[None], first.sft, cfg.scale)[0]
    moved[~t.present] = 0.0
    # a box shifted exactly onto the origin with zero size would read as absent
    moved[t.present & ~np.any(moved != 0, axis=1), 2:] = 1e-9
    conf = np.zeros(len(t))
    for f, did in enumerate(t.detection_ids):
        if did is not None:
            conf[f] = next(d.confidence for d in frame_detections[f] if d.detection_id == did)
    shifted_t = Tracklet(moved, t.detection_ids)
    geo = geometric_features(shifted_t, frame_detections, cfg, confidences=conf)
    values = geo.values
    if cfg.use_appearance:
        values = np.vstack([values, appearance_features(shifted_t, emb, history_vec, frame_detections, cfg).values])
    second = model.forward(values.T, geo.presence)[0]
    s = float(score_from_predictions(second.iou[0], second.lab[0], t.present))
    return s, shifted_t


def plain_score(model: ScorerModel, t: Tracklet, frame_detections: Sequence, cfg: FeatureConfig,
                emb=None, history_vec=None) -> float:
    feats = tracklet_features(t, frame_detections, cfg, emb, history_vec)
    p = model.forward(feats.values.T, feats.presence)[0]
    return float(score_from_predictions(p.iou[0], p.lab[0], t.present))


class IoUScorer:
    """Hand-designed baseline: IoU between consecutive boxes of a hypothesis.

    The score is the summed IoU of each box with the next box of the same
    hypothesis, divided by ``N - 1``; it rewards long, spatially continuous
    chains and needs no training.
    """

    def __init__(self, ctx: BatchContext):
        self.ctx = ctx

    def __call__(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.int64).reshape(-1, self.ctx.n_frames)
        n = self.ctx.n_frames
        if len(rows) == 0:
            return np.zeros(0)
        if n == 1:
            return np.where(rows[:, 0] >= 0, 1.0, 0.0)
        boxes = self.ctx.rows_to_boxes(rows)
        present = rows >= 0
        ar = np.arange(n)
        first_rev = np.minimum.accumulate(np.where(present, ar, n)[:, ::-1], axis=1)[:, ::-1]
        nxt = np.concatenate([first_rev[:, 1:], np.full((len(rows), 1), n)], axis=1)
        has_next = present & (nxt < n)
        nb = np.take_along_axis(boxes, np.clip(nxt, 0, n - 1)[..., None], axis=1)
        total = np.sum(np.where(has_next, box_iou(boxes, nb), 0.0), axis=1)
        return total / (n - 1)

    def output_boxes(self, rows):
        return self.ctx.rows_to_boxes(rows)


def idf_rows(ctx: BatchContext, rows: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    """IDF of every row against every ground-truth trajectory: ``(B, G)``.

    ``gt_boxes`` is ``(G, N, 4)`` over the batch window.
    """
    rows = np.asarray(rows, dtype=np.int64).reshape(-1, ctx.n_frames)
    g = len(gt_boxes)
    if g == 0 or len(rows) == 0:
        return np.zeros((len(rows), g))
    gt_present = np.any(gt_boxes != 0, axis=-1)  # (G, N)
    # IoU of every detection with every trajectory's box in the detection's frame
    det_gt = box_iou(ctx.boxes[:, None, :], gt_boxes[:, ctx.frame, :].transpose(1, 0, 2))  # (D, G)
    match = np.vstack([det_gt > 0.5, np.zeros((1, g), dtype=bool)])
    safe = np.where(rows >= 0, rows, len(ctx))
    matched = match[safe].sum(axis=1)  # (B, G)
    k = np.count_nonzero(rows >= 0, axis=1)[:, None]
    den = k + gt_present.sum(axis=1)[None, :]
    out = np.zeros((len(rows), g))
    np.divide(2.0 * matched, den, out=out, where=den > 0)
    return out


class OracleScorer:
    """Scores a hypothesis by its best IDF against the true trajectories."""

    def __init__(self, ctx: BatchContext, gts: Sequence[GroundTruthTrajectory]):
        self.ctx = ctx
        self.gt_boxes = np.array([g.boxes[ctx.start:ctx.start + ctx.n_frames] for g in gts]).reshape(
            -1, ctx.n_frames, 4)

    def __call__(self, rows: np.ndarray) -> np.ndarray:
        m = idf_rows(self.ctx, rows, self.gt_boxes)
        return m.max(axis=1) if m.shape[1] else np.zeros(len(m))

    def output_boxes(self, rows):
        return self.ctx.rows_to_boxes(rows)
