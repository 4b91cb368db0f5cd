"""Seeded synthetic pedestrian scenes with ground truth.

People walk along straight lines; in the crossing pattern half of them walk
left-to-right and half right-to-left through a shared band, so paths cross
and boxes occlude one another. The detector model adds Gaussian jitter,
drops boxes at the miss rate, and adds spurious boxes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import BoundingBox, Detection, GroundTruthTrajectory
from .io import SequenceBundle

PATTERNS = ("crossing", "linear")


@dataclass(frozen=True)
class SceneSpec:
    n_people: int = 6
    pattern: str = "crossing"
    noise: float = 2.0
    miss_rate: float = 0.1
    fp_rate: float = 0.05
    n_frames: int = 36
    fps: float = 3.0
    image_width: float = 640.0
    image_height: float = 360.0
    seed: int = 0

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}; expected one of {PATTERNS}")
        if not 0.0 <= self.miss_rate <= 1.0:
            raise ValueError(f"miss rate must lie in [0, 1], got {self.miss_rate}")
        if not 0.0 <= self.fp_rate < 1.0:
            raise ValueError(f"false-positive rate must lie in [0, 1), got {self.fp_rate}")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if self.n_people < 0 or self.n_frames < 1:
            raise ValueError("need n_people >= 0 and n_frames >= 1")


def _paths(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Ground-truth boxes ``(P, T, 4)``, zero outside each person's visible span."""
    p, t = spec.n_people, spec.n_frames
    w_img, h_img = spec.image_width, spec.image_height
    out = np.zeros((p, t, 4))
    frames = np.arange(t, dtype=float)
    for k in range(p):
        height = rng.uniform(0.2, 0.3) * h_img
        width = height * rng.uniform(0.35, 0.45)
        # speed in pixels per frame, scaled with the frame interval
        speed = rng.uniform(0.3, 0.6) * height / spec.fps
        if spec.pattern == "crossing":
            direction = 1.0 if k % 2 == 0 else -1.0
            y0 = h_img * 0.5 - height / 2 + rng.uniform(-0.15, 0.15) * h_img
            vy = rng.uniform(-0.1, 0.1) * speed
        else:
            direction = 1.0
            y0 = (k + 0.5) / max(p, 1) * (h_img - height)
            vy = 0.0
        # choose the time the person reaches the image centre
        t_mid = rng.uniform(0.25, 0.75) * (t - 1)
        x_mid = w_img / 2 - width / 2 + rng.uniform(-0.1, 0.1) * w_img
        x = x_mid + direction * speed * (frames - t_mid)
        y = y0 + vy * (frames - t_mid)
        inside = (x > -width / 2) & (x + width / 2 < w_img) & (y > -height / 2) & (y + height / 2 < h_img)
        out[k, inside] = np.stack([x, y, np.full(t, width), np.full(t, height)], axis=1)[inside]
    return out


def synth_scene(spec: SceneSpec | None = None, **overrides) -> SequenceBundle:
    """Generate one scene; identical specs give identical bundles."""
    if spec is None:
        spec = SceneSpec(**overrides)
    elif overrides:
        spec = SceneSpec(**{**spec.__dict__, **overrides})
    rng = np.random.default_rng(spec.seed)
    gt = _paths(spec, rng)
    raw = []  # (frame, box, confidence)
    for f in range(spec.n_frames):
        for k in range(spec.n_people):
            box = gt[k, f]
            if not np.any(box != 0):
                continue
            if rng.random() < spec.miss_rate:
                continue
            jitter = rng.normal(0.0, spec.noise, size=4) if spec.noise > 0 else np.zeros(4)
            b = box + jitter
            b[2:] = np.maximum(b[2:], 1.0)
            raw.append((f, b, float(rng.uniform(0.5, 1.0))))
        n_fp = rng.binomial(spec.n_people, spec.fp_rate) if spec.n_people else 0
        for _ in range(n_fp):
            h = rng.uniform(0.15, 0.3) * spec.image_height
            w = h * rng.uniform(0.35, 0.45)
            b = np.array([rng.uniform(0, spec.image_width - w), rng.uniform(0, spec.image_height - h), w, h])
            raw.append((f, b, float(rng.uniform(0.0, 0.7))))
    # shuffle within each frame so detection ids carry no identity order
    order = sorted(range(len(raw)), key=lambda i: (raw[i][0], rng.random()))
    dets = [Detection(raw[i][0], BoundingBox.from_array(raw[i][1]), raw[i][2], k)
            for k, i in enumerate(order)]
    gts = [GroundTruthTrajectory(k + 1, gt[k]) for k in range(spec.n_people) if np.any(gt[k] != 0)]
    return SequenceBundle(dets, spec.n_frames, gts, None, fps=spec.fps, image_width=spec.image_width,
                          image_height=spec.image_height, name=f"synth-{spec.seed}")


def synth_suite(n_scenes: int = 20, seed: int = 0, people=(4, 8), **kw) -> list[SequenceBundle]:
    """A list of crossing scenes with person counts drawn from ``people`` (inclusive)."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_scenes):
        n = int(rng.integers(people[0], people[1] + 1))
        out.append(synth_scene(SceneSpec(n_people=n, seed=int(rng.integers(2 ** 31)), **kw)))
    return out
