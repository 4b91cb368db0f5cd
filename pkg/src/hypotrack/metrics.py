"""Tracking evaluation: pairwise IDF, identity measures and CLEAR-MOT counts.

Trajectories on both sides are given as mappings ``identity -> (T, 4)`` box
arrays over the whole sequence, with all-zero rows for absent frames.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import GroundTruthTrajectory, Tracklet, box_absent, box_iou

MATCH_IOU = 0.5
MOSTLY_TRACKED = 0.8
MOSTLY_LOST = 0.2
_INVALID = 1e6


def idf_boxes(t: np.ndarray, g: np.ndarray) -> float:
    """Matched-detection F-score of two aligned ``(N, 4)`` box sequences."""
    t = np.asarray(t, dtype=float)
    g = np.asarray(g, dtype=float)
    if t.shape != g.shape:
        raise ValueError(f"sequence shapes differ: {t.shape} vs {g.shape}")
    tp, gp = ~box_absent(t), ~box_absent(g)
    matched = np.count_nonzero(tp & gp & (box_iou(t, g) > MATCH_IOU))
    den = np.count_nonzero(tp) + np.count_nonzero(gp)
    return 2.0 * matched / den if den else 0.0


def idf_pair(t: Tracklet, g: GroundTruthTrajectory) -> float:
    return idf_boxes(t.boxes, g.boxes)


@dataclass
class FrameMatch:
    matches: list  # (gt id, output id, iou)
    fp: int
    fn: int
    switches: list = field(default_factory=list)  # (gt id, previous output id, new output id)


def match_frame(outputs: Mapping, gts: Mapping, prior: Mapping) -> FrameMatch:
    """Correspond the boxes of one frame.

    ``outputs`` and ``gts`` map identities to boxes present in the frame;
    ``prior`` maps a ground-truth id to the output id it was last matched
    with. Still-valid prior matches are kept; the remaining pairs with IoU
    above 0.5 are assigned to maximise the match count, then total IoU.
    ``prior`` is not modified.
    """
    out_ids = sorted(outputs)
    gt_ids = sorted(gts)
    matches = []
    used_out: set = set()
    used_gt: set = set()
    for g in gt_ids:
        h = prior.get(g)
        if h is None or h not in outputs or h in used_out:
            continue
        v = float(box_iou(np.asarray(gts[g], float), np.asarray(outputs[h], float)))
        if v > MATCH_IOU:
            matches.append((g, h, v))
            used_out.add(h)
            used_gt.add(g)
    rest_g = [g for g in gt_ids if g not in used_gt]
    rest_o = [h for h in out_ids if h not in used_out]
    switches = []
    if rest_g and rest_o:
        gb = np.array([gts[g] for g in rest_g], dtype=float)
        ob = np.array([outputs[h] for h in rest_o], dtype=float)
        ious = box_iou(gb[:, None, :], ob[None, :, :])
        cost = np.where(ious > MATCH_IOU, 1.0 - ious, _INVALID)
        for r, c in zip(*linear_sum_assignment(cost)):
            if ious[r, c] > MATCH_IOU:
                g, h = rest_g[r], rest_o[c]
                matches.append((g, h, float(ious[r, c])))
                if g in prior and prior[g] != h:
                    switches.append((g, prior[g], h))
    return FrameMatch(matches, fp=len(outputs) - len(matches), fn=len(gts) - len(matches),
                      switches=switches)


def _as_mapping(trajectories) -> dict:
    if isinstance(trajectories, Mapping):
        return {k: np.asarray(v, dtype=float).reshape(-1, 4) for k, v in trajectories.items()}
    out = {}
    for t in trajectories:
        if isinstance(t, GroundTruthTrajectory):
            out[t.person_id] = np.asarray(t.boxes)
        else:
            raise TypeError(f"cannot read trajectory of type {type(t).__name__}")
    return out


def _n_frames(*maps) -> int:
    return max((len(v) for m in maps for v in m.values()), default=0)


def _pad(boxes: np.ndarray, n: int) -> np.ndarray:
    if len(boxes) >= n:
        return boxes
    return np.vstack([boxes, np.zeros((n - len(boxes), 4))])


@dataclass
class IdentityCounts:
    idtp: int
    idfp: int
    idfn: int

    @property
    def idf1(self) -> float:
        den = 2 * self.idtp + self.idfp + self.idfn
        return 2 * self.idtp / den if den else 0.0

    @property
    def idp(self) -> float:
        den = self.idtp + self.idfp
        return self.idtp / den if den else 0.0

    @property
    def idr(self) -> float:
        den = self.idtp + self.idfn
        return self.idtp / den if den else 0.0


def identity_metrics(outputs, gts) -> IdentityCounts:
    """One-to-one identity matching maximising correctly identified detections.

    A detection is correctly identified when its output identity is matched
    to the ground-truth identity and their boxes overlap with IoU above 0.5
    in that frame. Unmatched identities are allowed on both sides.
    """
    outputs, gts = _as_mapping(outputs), _as_mapping(gts)
    n = _n_frames(outputs, gts)
    ob = np.array([_pad(v, n) for v in outputs.values()], dtype=float).reshape(len(outputs), n, 4)
    gb = np.array([_pad(v, n) for v in gts.values()], dtype=float).reshape(len(gts), n, 4)
    n_out = int(np.count_nonzero(~box_absent(ob)))
    n_gt = int(np.count_nonzero(~box_absent(gb)))
    if len(ob) == 0 or len(gb) == 0:
        return IdentityCounts(0, n_out, n_gt)
    hits = np.count_nonzero(box_iou(gb[:, None], ob[None]) > MATCH_IOU, axis=-1)  # (G, O)
    r, c = linear_sum_assignment(hits, maximize=True)
    idtp = int(hits[r, c].sum())
    return IdentityCounts(idtp, n_out - idtp, n_gt - idtp)


@dataclass
class MetricsReport:
    """Summary measures; ratios in [0, 1] except MOTA, which can be negative."""

    IDF1: float
    IDP: float
    IDR: float
    MOTA: float
    MOTP: float
    FAF: float
    MT: int
    ML: int
    FP: int
    FN: int
    IDs: int
    Frag: int

    COLUMNS = ("IDF1", "IDP", "IDR", "MOTA", "MOTP", "FAF", "MT", "ML", "FP", "FN", "ID Sw.", "Frag")
    _PERCENT = ("IDF1", "IDP", "IDR", "MOTA", "MOTP")

    def values(self) -> list:
        d = asdict(self)
        return [d[k] for k in ("IDF1", "IDP", "IDR", "MOTA", "MOTP", "FAF", "MT", "ML", "FP", "FN",
                               "IDs", "Frag")]

    def csv_header(self) -> str:
        return ",".join(self.COLUMNS)

    def csv_row(self) -> str:
        return ",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in self.values())

    def table(self) -> str:
        cells = []
        for name, v in zip(self.COLUMNS, self.values()):
            if name in self._PERCENT:
                cells.append(f"{100 * v:.1f}")
            elif isinstance(v, float):
                cells.append(f"{v:.3f}")
            else:
                cells.append(str(v))
        widths = [max(len(a), len(b)) for a, b in zip(self.COLUMNS, cells)]
        head = "  ".join(a.rjust(w) for a, w in zip(self.COLUMNS, widths))
        row = "  ".join(b.rjust(w) for b, w in zip(cells, widths))
        return head + "\n" + row


def report(outputs, gts, n_frames: int | None = None) -> MetricsReport:
    """All measures for one sequence.

    Raises ``ValueError`` when the ground truth holds no boxes, since MOTA is
    undefined then. MOTP is NaN when nothing was matched.
    """
    outputs, gts = _as_mapping(outputs), _as_mapping(gts)
    n = max(_n_frames(outputs, gts), n_frames or 0)
    outputs = {k: _pad(v, n) for k, v in outputs.items()}
    gts = {k: _pad(v, n) for k, v in gts.items()}
    out_present = {k: ~box_absent(v) for k, v in outputs.items()}
    gt_present = {k: ~box_absent(v) for k, v in gts.items()}
    total_gt = sum(int(p.sum()) for p in gt_present.values())
    if total_gt == 0:
        raise ValueError("ground truth holds no boxes; MOTA is undefined")

    prior: dict = {}
    tracked = {k: np.zeros(n, dtype=bool) for k in gts}
    fp = fn = ids = 0
    iou_sum, n_match = 0.0, 0
    for f in range(n):
        fo = {k: outputs[k][f] for k in outputs if out_present[k][f]}
        fg = {k: gts[k][f] for k in gts if gt_present[k][f]}
        m = match_frame(fo, fg, prior)
        fp += m.fp
        fn += m.fn
        ids += len(m.switches)
        for g, h, v in m.matches:
            prior[g] = h
            tracked[g][f] = True
            iou_sum += v
            n_match += 1

    mt = ml = frag = 0
    for k, p in gt_present.items():
        life = int(p.sum())
        if life == 0:
            continue
        cover = tracked[k].sum() / life
        mt += cover >= MOSTLY_TRACKED
        ml += cover <= MOSTLY_LOST
        frag += _fragments(tracked[k][p])

    idc = identity_metrics(outputs, gts)
    return MetricsReport(
        IDF1=idc.idf1, IDP=idc.idp, IDR=idc.idr,
        MOTA=1.0 - (fp + fn + ids) / total_gt,
        MOTP=iou_sum / n_match if n_match else math.nan,
        FAF=fp / n if n else 0.0,
        MT=int(mt), ML=int(ml), FP=fp, FN=fn, IDs=ids, Frag=frag,
    )


def _fragments(tracked: np.ndarray) -> int:
    """Tracked-to-untracked transitions before the last tracked frame.

    ``tracked`` covers only the frames where the person is present.
    """
    hit = np.flatnonzero(tracked)
    if len(hit) == 0:
        return 0
    seg = tracked[hit[0]:hit[-1] + 1]
    return int(np.count_nonzero(seg[:-1] & ~seg[1:]))


def tracks_to_mapping(tracks: Sequence, n_frames: int) -> dict:
    """Stitched tracks as ``id -> (n_frames, 4)`` box arrays."""
    out = {}
    for t in tracks:
        boxes = np.zeros((n_frames, 4))
        for f, (box, _) in t.frames.items():
            boxes[f] = box
        out[t.track_id] = boxes
    return out


def gts_to_mapping(gts: Sequence[GroundTruthTrajectory]) -> dict:
    return {g.person_id: np.asarray(g.boxes) for g in gts}
