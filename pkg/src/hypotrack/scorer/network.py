"""Per-frame tracklet regressor.

Input features (plus a presence channel) go through an affine embedding and
batch normalisation, then a single-layer bidirectional LSTM. Three heads read
the concatenated hidden states of every frame:

* ``iou``  sigmoid, predicted IoU of the frame's box with the true box
* ``lab``  sigmoid, predicted presence of the person in the frame
* ``sft``  linear, box correction in image-relative units
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import expit

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class Predictions:
    iou: np.ndarray  # (B, N)
    lab: np.ndarray  # (B, N)
    sft: np.ndarray  # (B, N, 4)

    def __len__(self) -> int:
        return self.iou.shape[0]

    def sample(self, b: int) -> "Predictions":
        return Predictions(self.iou[b:b + 1], self.lab[b:b + 1], self.sft[b:b + 1])


# Trainable parameters, in checkpoint order. Buffers follow them.
PARAM_NAMES = (
    "emb_W", "emb_b", "bn_gamma", "bn_beta",
    "fwd_W", "fwd_b", "bwd_W", "bwd_b",
    "iou_W", "iou_b", "lab_W", "lab_b", "sft_W", "sft_b",
)
BUFFER_NAMES = ("bn_mean", "bn_var")


class ScorerModel:
    """Embedding + batch norm + BiLSTM + three per-frame heads.

    ``n_features`` excludes the presence flag, which the model appends itself.
    """

    def __init__(self, n_features: int, embed: int = 64, hidden: int = 300,
                 seed: Optional[int] = 0, neighbors: int = 4, flags: int = 0):
        self.n_features = n_features
        self.embed = embed
        self.hidden = hidden
        self.neighbors = neighbors
        self.flags = flags
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        rng = np.random.default_rng(seed)
        fin, e, h = n_features + 1, embed, hidden

        def uniform(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        self.params["emb_W"] = uniform((fin, e), fin)
        self.params["emb_b"] = uniform((e,), fin)
        self.params["bn_gamma"] = np.ones(e)
        self.params["bn_beta"] = np.zeros(e)
        for d in ("fwd", "bwd"):
            self.params[f"{d}_W"] = uniform((e + h, 4 * h), e + h)
            self.params[f"{d}_b"] = uniform((4 * h,), e + h)
        for name, k in (("iou", 1), ("lab", 1), ("sft", 4)):
            self.params[f"{name}_W"] = uniform((2 * h, k), 2 * h)
            self.params[f"{name}_b"] = uniform((k,), 2 * h)
        self.buffers["bn_mean"] = np.zeros(e)
        self.buffers["bn_var"] = np.ones(e)

    def copy(self) -> "ScorerModel":
        other = ScorerModel.__new__(ScorerModel)
        other.__dict__.update({k: v for k, v in self.__dict__.items() if k not in ("params", "buffers")})
        other.params = OrderedDict((k, v.copy()) for k, v in self.params.items())
        other.buffers = OrderedDict((k, v.copy()) for k, v in self.buffers.items())
        return other

    def zero_(self) -> "ScorerModel":
        for v in self.params.values():
            v[...] = 0.0
        return self

    @property
    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    # ------------------------------------------------------------------ forward

    def forward(self, x: np.ndarray, presence: np.ndarray, training: bool = False,
                keep_cache: bool = False):
        """Predictions for every frame of ``x`` with shape ``(B, N, F)``.

        In training mode batch norm uses the statistics of all ``B * N``
        frames; otherwise the running averages. Returns ``(preds, cache)``
        with ``cache`` None unless requested.
        """
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            x = x[None]
            presence = np.asarray(presence)[None]
        b, n, f = x.shape
        if f != self.n_features:
            raise ValueError(f"model expects {self.n_features} features, got {f}")
        p = self.params
        xin = np.concatenate([x, np.asarray(presence, dtype=float)[..., None]], axis=-1)
        z = xin @ p["emb_W"] + p["emb_b"]
        if training:
            flat = z.reshape(-1, self.embed)
            mean = flat.mean(axis=0)
            var = flat.var(axis=0)
        else:
            mean = self.buffers["bn_mean"]
            var = self.buffers["bn_var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        zh = (z - mean) * inv_std
        y = p["bn_gamma"] * zh + p["bn_beta"]

        hf, cf_cache = self._lstm(y, p["fwd_W"], p["fwd_b"], keep_cache)
        hb_rev, cb_cache = self._lstm(y[:, ::-1], p["bwd_W"], p["bwd_b"], keep_cache)
        hb = hb_rev[:, ::-1]
        hcat = np.concatenate([hf, hb], axis=-1)
        iou = expit(hcat @ p["iou_W"] + p["iou_b"])[..., 0]
        lab = expit(hcat @ p["lab_W"] + p["lab_b"])[..., 0]
        sft = hcat @ p["sft_W"] + p["sft_b"]
        if not (np.all(np.isfinite(iou)) and np.all(np.isfinite(lab)) and np.all(np.isfinite(sft))):
            raise NonFiniteError("non-finite activations in forward pass")
        preds = Predictions(iou, lab, sft)
        cache = None
        if keep_cache:
            cache = dict(xin=xin, zh=zh, inv_std=inv_std, y=y, hcat=hcat, fwd=cf_cache,
                         bwd=cb_cache, preds=preds, training=training, mean=mean, var=var)
        return preds, cache

    def _lstm(self, y, W, bias, keep_cache):
        b, n, _ = y.shape
        hsz = self.hidden
        h = np.zeros((b, hsz))
        c = np.zeros((b, hsz))
        hs = np.empty((b, n, hsz))
        steps = [] if keep_cache else None
        for t in range(n):
            inp = np.concatenate([y[:, t], h], axis=1)
            a = inp @ W + bias
            i = expit(a[:, :hsz])
            fg = expit(a[:, hsz:2 * hsz])
            o = expit(a[:, 2 * hsz:3 * hsz])
            g = np.tanh(a[:, 3 * hsz:])
            c_prev = c
            c = fg * c_prev + i * g
            tc = np.tanh(c)
            h = o * tc
            hs[:, t] = h
            if keep_cache:
                steps.append((inp, i, fg, o, g, c_prev, tc))
        return hs, steps

    # ----------------------------------------------------------------- backward

    def backward(self, cache: dict, d_iou: np.ndarray, d_lab: np.ndarray, d_sft: np.ndarray):
        """Gradients of a scalar loss given its derivatives w.r.t. the predictions."""
        p = self.params
        preds: Predictions = cache["preds"]
        grads = OrderedDict((k, np.zeros_like(v)) for k, v in p.items())
        hcat = cache["hcat"]
        h2 = hcat.reshape(-1, 2 * self.hidden)

        da_iou = (d_iou * preds.iou * (1.0 - preds.iou))[..., None]
        da_lab = (d_lab * preds.lab * (1.0 - preds.lab))[..., None]
        grads["iou_W"] = h2.T @ da_iou.reshape(-1, 1)
        grads["iou_b"] = da_iou.reshape(-1, 1).sum(axis=0)
        grads["lab_W"] = h2.T @ da_lab.reshape(-1, 1)
        grads["lab_b"] = da_lab.reshape(-1, 1).sum(axis=0)
        grads["sft_W"] = h2.T @ d_sft.reshape(-1, 4)
        grads["sft_b"] = d_sft.reshape(-1, 4).sum(axis=0)
        dh = da_iou @ p["iou_W"].T + da_lab @ p["lab_W"].T + d_sft @ p["sft_W"].T

        hsz = self.hidden
        dy_f, grads["fwd_W"], grads["fwd_b"] = self._lstm_backward(cache["fwd"], dh[..., :hsz], p["fwd_W"])
        dy_b_rev, grads["bwd_W"], grads["bwd_b"] = self._lstm_backward(
            cache["bwd"], dh[..., hsz:][:, ::-1], p["bwd_W"])
        dy = dy_f + dy_b_rev[:, ::-1]

        zh = cache["zh"]
        e = self.embed
        dy2 = dy.reshape(-1, e)
        zh2 = zh.reshape(-1, e)
        grads["bn_gamma"] = np.sum(dy2 * zh2, axis=0)
        grads["bn_beta"] = dy2.sum(axis=0)
        dzh = dy2 * p["bn_gamma"]
        if cache["training"]:
            m = dzh.shape[0]
            dz = cache["inv_std"] / m * (m * dzh - dzh.sum(axis=0) - zh2 * np.sum(dzh * zh2, axis=0))
        else:
            dz = dzh * cache["inv_std"]
        xin2 = cache["xin"].reshape(-1, self.n_features + 1)
        grads["emb_W"] = xin2.T @ dz
        grads["emb_b"] = dz.sum(axis=0)
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter {k}")
        return grads

    def _lstm_backward(self, steps, dh_out, W):
        b, n, hsz = dh_out.shape
        e = self.embed
        dW = np.zeros_like(W)
        db = np.zeros(W.shape[1])
        dy = np.zeros((b, n, e))
        dh_next = np.zeros((b, hsz))
        dc_next = np.zeros((b, hsz))
        for t in reversed(range(n)):
            inp, i, fg, o, g, c_prev, tc = steps[t]
            dh = dh_out[:, t] + dh_next
            do = dh * tc
            dc = dc_next + dh * o * (1.0 - tc * tc)
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            da = np.concatenate([di * i * (1.0 - i), df * fg * (1.0 - fg),
                                 do * o * (1.0 - o), dg * (1.0 - g * g)], axis=1)
            dW += inp.T @ da
            db += da.sum(axis=0)
            dinp = da @ W.T
            dy[:, t] = dinp[:, :e]
            dh_next = dinp[:, e:]
            dc_next = dc * fg
        return dy, dW, db

    def update_running_stats(self, cache: dict) -> None:
        self.buffers["bn_mean"] = BN_MOMENTUM * self.buffers["bn_mean"] + (1 - BN_MOMENTUM) * cache["mean"]
        self.buffers["bn_var"] = BN_MOMENTUM * self.buffers["bn_var"] + (1 - BN_MOMENTUM) * cache["var"]

    def predict(self, x: np.ndarray, presence: np.ndarray, chunk: int = 4096) -> Predictions:
        """Inference-mode forward in chunks along the batch axis."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            return self.forward(x, presence)[0]
        if len(x) <= chunk:
            return self.forward(x, presence)[0]
        parts = [self.forward(x[s:s + chunk], presence[s:s + chunk])[0] for s in range(0, len(x), chunk)]
        return Predictions(np.concatenate([q.iou for q in parts]), np.concatenate([q.lab for q in parts]),
                           np.concatenate([q.sft for q in parts]))
