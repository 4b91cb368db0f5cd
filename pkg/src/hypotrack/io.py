"""MOTChallenge text files and the in-memory sequence bundle.

Frames are 1-based in files and 0-based in memory. Lines starting with ``#``
are comments; output writers use them for the run header.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .features import EmbeddingTable
from .geometry import BoundingBox, Detection, GroundTruthTrajectory


@dataclass
class SequenceBundle:
    detections: list
    n_frames: int
    gts: Optional[list] = None
    embeddings: Optional[EmbeddingTable] = None
    fps: float = 3.0
    image_width: float = 1920.0
    image_height: float = 1080.0
    name: str = "sequence"

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        for d in self.detections:
            if not 0 <= d.frame < self.n_frames:
                raise ValueError(f"detection {d.detection_id} frame {d.frame} outside [0, {self.n_frames})")

    def frame_detections(self) -> list:
        out: list = [[] for _ in range(self.n_frames)]
        for d in self.detections:
            out[d.frame].append(d)
        return out

    def gt_mapping(self) -> dict:
        return {g.person_id: np.asarray(g.boxes) for g in (self.gts or [])}


class FormatError(ValueError):
    pass


@dataclass
class _Row:
    frame: int
    ident: int
    box: tuple
    conf: float
    extra: tuple = field(default_factory=tuple)


def _read_rows(path) -> list[_Row]:
    rows = []
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = [p.strip() for p in s.split(",")]
        if len(parts) < 6:
            raise FormatError(f"{path}:{lineno}: expected at least 6 fields, got {len(parts)}")
        try:
            frame = int(float(parts[0]))
            ident = int(float(parts[1]))
            box = tuple(float(p) for p in parts[2:6])
            conf = float(parts[6]) if len(parts) > 6 else 1.0
            extra = tuple(float(p) for p in parts[7:])
        except ValueError as e:
            raise FormatError(f"{path}:{lineno}: {e}") from None
        if frame < 1:
            raise FormatError(f"{path}:{lineno}: frame numbers start at 1, got {frame}")
        if not (np.all(np.isfinite(box)) and np.isfinite(conf)):
            raise FormatError(f"{path}:{lineno}: non-finite value")
        if box[2] < 0 or box[3] < 0:
            raise FormatError(f"{path}:{lineno}: negative box size")
        rows.append(_Row(frame - 1, ident, box, conf, extra))
    return rows


def read_seqinfo(path) -> dict:
    """Frame count, rate and image size from a ``seqinfo.ini`` file."""
    cp = configparser.ConfigParser()
    cp.read(path)
    sec = cp["Sequence"] if "Sequence" in cp else {}
    out = {}
    for key, name, conv in (("seqlength", "n_frames", int), ("framerate", "fps", float),
                            ("imwidth", "image_width", float), ("imheight", "image_height", float),
                            ("name", "name", str)):
        if key in sec:
            out[name] = conv(sec[key])
    return out


def read_detections(path) -> list[Detection]:
    """Detections in file order; the n-th data line gets detection id n - 1."""
    dets = [Detection(r.frame, BoundingBox(*r.box), r.conf, k) for k, r in enumerate(_read_rows(path))]
    dets.sort(key=lambda d: (d.frame, d.detection_id))
    return dets


def read_trajectories(path, n_frames: Optional[int] = None, filter_gt: bool = True) -> list[GroundTruthTrajectory]:
    """Trajectories grouped by identity, as ``(n_frames, 4)`` boxes.

    With ``filter_gt``, lines carrying a zero evaluation flag or a class other
    than 1 (the benchmark's ground-truth extension columns) are skipped.
    """
    rows = _read_rows(path)
    if filter_gt:
        rows = [r for r in rows if not r.extra or (r.conf != 0 and int(r.extra[0]) == 1)]
    if n_frames is None:
        n_frames = max((r.frame for r in rows), default=-1) + 1
    by_id: dict = {}
    for r in rows:
        if r.frame >= n_frames:
            raise FormatError(f"{path}: frame {r.frame + 1} beyond sequence length {n_frames}")
        boxes = by_id.setdefault(r.ident, np.zeros((n_frames, 4)))
        if np.any(boxes[r.frame] != 0):
            raise FormatError(f"{path}: identity {r.ident} appears twice in frame {r.frame + 1}")
        boxes[r.frame] = r.box
    return [GroundTruthTrajectory(k, by_id[k]) for k in sorted(by_id)]


def parse_motchallenge(detections_path=None, gt_path=None, embeddings_path=None, seqinfo_path=None,
                       fps: Optional[float] = None) -> SequenceBundle:
    """Read a sequence; a ``seqinfo.ini`` next to the detections is used when present."""
    info: dict = {}
    if seqinfo_path is None and detections_path is not None:
        cand = Path(detections_path).parent.parent / "seqinfo.ini"
        if cand.exists():
            seqinfo_path = cand
    if seqinfo_path is not None:
        info = read_seqinfo(seqinfo_path)
    dets = read_detections(detections_path) if detections_path is not None else []
    gts = None
    n_frames = info.get("n_frames")
    if n_frames is None:
        n_frames = max((d.frame for d in dets), default=-1) + 1
    if gt_path is not None:
        gts = read_trajectories(gt_path)
        n_frames = max(n_frames, max((len(g) for g in gts), default=0))
        gts = [GroundTruthTrajectory(g.person_id, _pad(g.boxes, n_frames)) for g in gts]
    emb = EmbeddingTable.load(embeddings_path) if embeddings_path is not None else None
    return SequenceBundle(dets, n_frames, gts, emb,
                          fps=fps if fps is not None else info.get("fps", 3.0),
                          image_width=info.get("image_width", 1920.0),
                          image_height=info.get("image_height", 1080.0),
                          name=info.get("name", Path(detections_path or gt_path or "sequence").stem))


def _pad(boxes: np.ndarray, n: int) -> np.ndarray:
    if len(boxes) >= n:
        return np.asarray(boxes)
    return np.vstack([boxes, np.zeros((n - len(boxes), 4))])


def _fmt(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 2 ** 53 else repr(x)


def _header_lines(header: Optional[str]) -> list[str]:
    if not header:
        return []
    return ["# " + line if line else "#" for line in header.splitlines()]


def _write(path, header: Optional[str], lines: Iterable[str]) -> None:
    out = _header_lines(header) + list(lines)
    Path(path).write_text("".join(line + "\n" for line in out))


def write_results(trajectories: Mapping, path, header: Optional[str] = None) -> None:
    """One line per (frame, identity) holding a box; confidence 1."""
    lines = []
    for f, ident, box in sorted(_iter_boxes(trajectories), key=lambda x: (x[0], x[1])):
        lines.append(f"{f + 1},{ident},{','.join(_fmt(v) for v in box)},1,-1,-1,-1")
    _write(path, header, lines)


def _iter_boxes(trajectories: Mapping):
    for ident, boxes in trajectories.items():
        boxes = np.asarray(boxes, dtype=float)
        for f in np.flatnonzero(np.any(boxes != 0, axis=1)):
            yield int(f), int(ident), boxes[f]


def read_results(path, n_frames: Optional[int] = None) -> dict:
    return {g.person_id: np.asarray(g.boxes) for g in read_trajectories(path, n_frames, filter_gt=False)}


def write_detections(detections: Sequence[Detection], path, header: Optional[str] = None) -> None:
    """Raw detections in id order, so re-reading reproduces the ids."""
    ordered = sorted(detections, key=lambda d: d.detection_id)
    if [d.detection_id for d in ordered] != list(range(len(ordered))):
        raise ValueError("detection ids must be 0..count-1 to round-trip through line order")
    lines = [f"{d.frame + 1},-1,{','.join(_fmt(v) for v in d.box.as_array())},{_fmt(d.confidence)}"
             for d in ordered]
    _write(path, header, lines)


def write_ground_truth(gts: Sequence[GroundTruthTrajectory], path, header: Optional[str] = None) -> None:
    """Ground truth with evaluation flag 1, class 1 and visibility 1."""
    lines = []
    for f, ident, box in sorted(_iter_boxes({g.person_id: g.boxes for g in gts}), key=lambda x: (x[0], x[1])):
        lines.append(f"{f + 1},{ident},{','.join(_fmt(v) for v in box)},1,1,1")
    _write(path, header, lines)


def write_seqinfo(bundle: SequenceBundle, path) -> None:
    cp = configparser.ConfigParser()
    cp["Sequence"] = {"name": bundle.name, "frameRate": _fmt(bundle.fps), "seqLength": str(bundle.n_frames),
                      "imWidth": _fmt(bundle.image_width), "imHeight": _fmt(bundle.image_height)}
    with open(path, "w") as fh:
        cp.write(fh)
