"""Run configuration as flat ``key = value`` text.

Every key of :class:`RunConfig` may appear in a config file; command-line
flags override file values. The serialised form is written as a comment
header into every output file.
"""
from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from .engine import EngineConfig
from .features import FeatureConfig


@dataclass(frozen=True)
class RunConfig:
    # selection and generation
    c_iou: float = 0.6
    c_score: float = 0.6
    selection: str = "greedy"
    pruning: str = "paper"
    prune_score: float = 0.5
    prune_count: int = 20
    fast_cutoff: Optional[float] = None
    length_rule: str = "none"
    exact_limit: int = 25
    # batches
    fps: float = 3.0
    batch_seconds_train: float = 3.0
    batch_seconds_infer: float = 6.0
    # features
    neighbors: int = 4
    use_appearance: bool = False
    image_width: Optional[float] = None
    image_height: Optional[float] = None
    autocontext: bool = False
    # model
    embed: int = 64
    hidden: int = 300
    # training
    lr: float = 0.001
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
    loss_norm: str = "squared"
    dataset: str = "generated"
    min_bin_samples: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if self.batch_seconds_train <= 0 or self.batch_seconds_infer <= 0:
            raise ValueError("batch lengths must be positive")
        if self.dataset not in ("generated", "near_gt", "seeded"):
            raise ValueError(f"unknown dataset mode {self.dataset!r}")
        if self.hard_mining < 1 or self.minibatch < 1:
            raise ValueError("hard_mining and minibatch must be >= 1")
        if self.min_bin_samples < 0:
            raise ValueError("min_bin_samples must be >= 0")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        self.engine()  # validates engine fields

    @staticmethod
    def frames(seconds: float, fps: float) -> int:
        return max(1, int(round(seconds * fps)))

    @property
    def train_frames(self) -> int:
        return self.frames(self.batch_seconds_train, self.fps)

    @property
    def infer_frames(self) -> int:
        return self.frames(self.batch_seconds_infer, self.fps)

    def engine(self, batch_frames: Optional[int] = None) -> EngineConfig:
        return EngineConfig(c_iou=self.c_iou, c_score=self.c_score,
                            batch_frames=batch_frames or self.infer_frames, selection=self.selection,
                            pruning=self.pruning, prune_score=self.prune_score, prune_count=self.prune_count,
                            fast_cutoff=self.fast_cutoff, length_rule=self.length_rule,
                            exact_limit=self.exact_limit)

    def features(self, image_width: float = 1920.0, image_height: float = 1080.0) -> FeatureConfig:
        return FeatureConfig(neighbors=self.neighbors, use_appearance=self.use_appearance,
                             image_width=self.image_width or image_width,
                             image_height=self.image_height or image_height)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # ------------------------------------------------------------- text form

    def dumps(self) -> str:
        return "\n".join(f"{f.name} = {_format(getattr(self, f.name))}" for f in fields(self)) + "\n"

    @classmethod
    def loads(cls, text: str, base: Optional["RunConfig"] = None) -> "RunConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            if "=" not in s:
                raise ValueError(f"config line {lineno}: expected 'key = value'")
            key, raw = (p.strip() for p in s.split("=", 1))
            values[key] = raw
        return (base or cls()).with_strings(values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.loads(Path(path).read_text())

    def with_strings(self, values: dict) -> "RunConfig":
        """Copy with fields replaced by values parsed from strings."""
        hints = typing.get_type_hints(type(self))
        known = {f.name for f in fields(self)}
        out = {}
        for key, raw in values.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            out[key] = _parse(raw, hints[key], key)
        return dataclasses.replace(self, **out)


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(raw: str, hint, key: str):
    raw = raw.strip()
    args = typing.get_args(hint)
    if args and type(None) in args:
        if raw.lower() in ("none", ""):
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError(raw)
            return v
        return raw
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None
