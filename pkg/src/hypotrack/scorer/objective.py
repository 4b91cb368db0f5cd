"""Tracklet score from per-frame predictions, and the per-frame training loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..geometry import GroundTruthTrajectory, Tracklet, box_absent, box_iou
from .network import Predictions


def score_from_predictions(iou: np.ndarray, lab: np.ndarray, present: np.ndarray) -> np.ndarray:
    """IDF estimate per row: twice the predicted IoU mass on frames that are both
    observed and predicted present, over observed count plus predicted-present count.

    Works on ``(N,)`` or ``(B, N)`` arrays; an empty denominator scores 0.
    """
    iou = np.asarray(iou, dtype=float)
    lab = np.asarray(lab, dtype=float)
    present = np.asarray(present, dtype=bool)
    on = lab > 0.5
    num = 2.0 * np.sum(np.where(present & on, iou, 0.0), axis=-1)
    den = np.count_nonzero(present, axis=-1) + np.count_nonzero(on, axis=-1)
    out = np.zeros(np.shape(num))
    np.divide(num, den, out=out, where=den > 0)
    return out


def score(preds: Predictions, t: Tracklet) -> float:
    if preds.iou.shape[-1] != len(t):
        raise ValueError("predictions and tracklet lengths differ")
    return float(score_from_predictions(preds.iou.reshape(-1), preds.lab.reshape(-1), t.present))


@dataclass
class Targets:
    """Per-frame regression targets for a batch of tracklets, all ``(B, N[, 4])``."""

    det_boxes: np.ndarray
    det_present: np.ndarray
    gt_boxes: np.ndarray
    gt_present: np.ndarray
    true_iou: np.ndarray
    scale: np.ndarray  # (4,) image-relative units of ``sft``

    @classmethod
    def build(cls, det_boxes, gt_boxes, scale) -> "Targets":
        det_boxes = np.asarray(det_boxes, dtype=float)
        gt_boxes = np.asarray(gt_boxes, dtype=float)
        if det_boxes.ndim == 2:
            det_boxes = det_boxes[None]
            gt_boxes = gt_boxes[None]
        return cls(det_boxes, ~box_absent(det_boxes), gt_boxes, ~box_absent(gt_boxes),
                   box_iou(det_boxes, gt_boxes), np.asarray(scale, dtype=float))

    @classmethod
    def for_tracklet(cls, t: Tracklet, g: Optional[GroundTruthTrajectory], scale) -> "Targets":
        gb = np.zeros_like(t.boxes) if g is None else g.boxes
        return cls.build(t.boxes, gb, scale)

    def __len__(self) -> int:
        return len(self.det_boxes)

    def subset(self, idx) -> "Targets":
        return Targets(self.det_boxes[idx], self.det_present[idx], self.gt_boxes[idx],
                       self.gt_present[idx], self.true_iou[idx], self.scale)

    @staticmethod
    def concat(parts) -> "Targets":
        parts = list(parts)
        return Targets(*(np.concatenate([getattr(p, k) for p in parts]) for k in
                         ("det_boxes", "det_present", "gt_boxes", "gt_present", "true_iou")),
                       parts[0].scale)


def shifted_boxes(det_boxes: np.ndarray, sft: np.ndarray, scale: np.ndarray) -> np.ndarray:
    out = det_boxes + sft * scale
    out[..., 2:] = np.clip(out[..., 2:], 0.0, None)
    return out


def iou_and_grad(b: np.ndarray, g: np.ndarray):
    """IoU of ``b`` with ``g`` and its derivative w.r.t. ``b`` (both ``(..., 4)``).

    The derivative is the one-sided piecewise expression; it is 0 where the
    boxes do not intersect.
    """
    x, y, w, h = (b[..., k] for k in range(4))
    gx, gy, gw, gh = (g[..., k] for k in range(4))
    r_b, r_g = x + w, gx + gw
    d_b, d_g = y + h, gy + gh
    iw = np.minimum(r_b, r_g) - np.maximum(x, gx)
    ih = np.minimum(d_b, d_g) - np.maximum(y, gy)
    hit = (iw > 0) & (ih > 0)
    iw = np.where(hit, iw, 0.0)
    ih = np.where(hit, ih, 0.0)
    inter = iw * ih
    union = w * h + gw * gh - inter
    ok = hit & (union > 0)
    safe_u = np.where(ok, union, 1.0)
    val = np.where(ok, inter / safe_u, 0.0)

    right_is_b = (r_b < r_g).astype(float)
    left_is_b = (x > gx).astype(float)
    bottom_is_b = (d_b < d_g).astype(float)
    top_is_b = (y > gy).astype(float)
    diw = np.stack([right_is_b - left_is_b, np.zeros_like(x), right_is_b, np.zeros_like(x)], axis=-1)
    dih = np.stack([np.zeros_like(x), bottom_is_b - top_is_b, np.zeros_like(x), bottom_is_b], axis=-1)
    dinter = diw * ih[..., None] + dih * iw[..., None]
    darea = np.stack([np.zeros_like(x), np.zeros_like(x), h, w], axis=-1)
    dunion = darea - dinter
    grad = (dinter * safe_u[..., None] - inter[..., None] * dunion) / (safe_u ** 2)[..., None]
    grad = np.where(ok[..., None], grad, 0.0)
    return val, grad


@dataclass
class LossTerms:
    lab: np.ndarray  # (B, N)
    iou: np.ndarray
    sft: np.ndarray

    @property
    def per_sample(self) -> np.ndarray:
        return (self.lab + self.iou + self.sft).sum(axis=-1)


def loss(preds: Predictions, targets: Targets, norm: str = "squared"):
    """Unweighted sum of presence, IoU and box-shift errors, per sample.

    ``norm="squared"`` uses squared scalar differences; ``norm="abs"`` uses the
    absolute difference. Box-shift terms only count frames where both the
    tracklet and the ground truth hold a box.

    Returns ``(per_sample_loss (B,), LossTerms, (d_iou, d_lab, d_sft))`` where
    the derivatives are of the per-sample sum.
    """
    lab_t = targets.gt_present.astype(float)
    dp = targets.det_present
    r_lab = preds.lab - lab_t
    r_iou = np.where(dp, preds.iou - targets.true_iou, 0.0)
    if norm == "squared":
        l_lab, l_iou = r_lab ** 2, r_iou ** 2
        d_lab, d_iou = 2.0 * r_lab, 2.0 * r_iou
    elif norm == "abs":
        l_lab, l_iou = np.abs(r_lab), np.abs(r_iou)
        d_lab, d_iou = np.sign(r_lab), np.sign(r_iou)
    else:
        raise ValueError(f"unknown norm {norm!r}")

    sft_on = dp & targets.gt_present
    raw = targets.det_boxes + preds.sft * targets.scale
    moved = raw.copy()
    moved[..., 2:] = np.clip(moved[..., 2:], 0.0, None)
    val, grad_box = iou_and_grad(moved, targets.gt_boxes)
    l_sft = np.where(sft_on, 1.0 - val, 0.0)
    not_clamped = np.ones_like(raw)
    not_clamped[..., 2:] = (raw[..., 2:] > 0).astype(float)
    d_sft = np.where(sft_on[..., None], -grad_box * not_clamped * targets.scale, 0.0)

    terms = LossTerms(l_lab, l_iou, l_sft)
    return terms.per_sample, terms, (d_iou, d_lab, d_sft)


def loss_and_gradients(model, x, presence, targets: Targets, training: bool = True,
                       norm: str = "squared", weights: Optional[np.ndarray] = None):
    """Mean per-sample loss over the batch and its parameter gradients."""
    preds, cache = model.forward(x, presence, training=training, keep_cache=True)
    per_sample, terms, (d_iou, d_lab, d_sft) = loss(preds, targets, norm)
    b = len(per_sample)
    w = np.full(b, 1.0 / b) if weights is None else np.asarray(weights, dtype=float)
    grads = model.backward(cache, d_iou * w[:, None], d_lab * w[:, None], d_sft * w[:, None, None])
    return float(np.dot(w, per_sample)), grads, cache
