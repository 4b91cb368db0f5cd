"""Binary checkpoint format.

Layout (all little-endian)::

    magic     8 bytes  b"HTCKPT\\x00\\x00"
    version   u32
    F E H M   u32 x 4   features, embedding, hidden, social neighbours
    flags     u32       bit 0: optimizer state appended; other bits copied from the model
    params    float64 blobs in PARAM_NAMES order, then BUFFER_NAMES order
    [optimizer: lr beta1 beta2 eps (f64 x 4), step (u64),
                first moments then second moments in PARAM_NAMES order]

Shapes are implied by the header, so blobs carry no per-array metadata.
"""
from __future__ import annotations

import struct
from typing import Optional

import numpy as np

from .network import BUFFER_NAMES, PARAM_NAMES, ScorerModel
from .optim import OptimizerState

MAGIC = b"HTCKPT\x00\x00"
VERSION = 1
FLAG_OPTIMIZER = 1


def _write(fh, arr: np.ndarray) -> None:
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(path, model: ScorerModel, state: Optional[OptimizerState] = None) -> None:
    flags = (model.flags & ~FLAG_OPTIMIZER) | (FLAG_OPTIMIZER if state is not None else 0)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<6I", VERSION, model.n_features, model.embed, model.hidden,
                             model.neighbors, flags))
        for k in PARAM_NAMES:
            _write(fh, model.params[k])
        for k in BUFFER_NAMES:
            _write(fh, model.buffers[k])
        if state is not None:
            fh.write(struct.pack("<4dQ", state.lr, state.beta1, state.beta2, state.eps, state.step))
            for k in PARAM_NAMES:
                _write(fh, state.m[k])
            for k in PARAM_NAMES:
                _write(fh, state.v[k])


def load_checkpoint(path):
    """Return ``(model, optimizer_state_or_None)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    version, f, e, h, m, flags = struct.unpack_from("<6I", raw, pos)
    pos += 24
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    model = ScorerModel(f, embed=e, hidden=h, neighbors=m, flags=flags & ~FLAG_OPTIMIZER, seed=None)

    def read(shape):
        nonlocal pos
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).astype(float)
        pos += 8 * count
        return arr

    for k in PARAM_NAMES:
        model.params[k] = read(model.params[k].shape)
    for k in BUFFER_NAMES:
        model.buffers[k] = read(model.buffers[k].shape)
    state = None
    if flags & FLAG_OPTIMIZER:
        lr, b1, b2, eps, step = struct.unpack_from("<4dQ", raw, pos)
        pos += 40
        state = OptimizerState(lr=lr, beta1=b1, beta2=b2, eps=eps, step=step)
        for k in PARAM_NAMES:
            state.m[k] = read(model.params[k].shape)
        for k in PARAM_NAMES:
            state.v[k] = read(model.params[k].shape)
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return model, state
