"""Causal LSTM lifting of normalised 2D joints to root-relative 3D joints.

Each step sees the embedded 2D pose of the current frame and the previous
predicted 3D pose (zeros at frame 0); the output is re-rooted so the pelvis
is exactly at the origin.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import ParamStore, Tensor
from .errors import ConfigError, DimensionError
from .metrics import loss_pred, mpjpe

PREFIX = "lift"


@dataclass
class Lifter:
    K: int = 17
    embed: int = 256
    hidden: int = 256
    store: ParamStore = field(default_factory=ParamStore)

    def init(self, rng, zero: bool = False) -> "Lifter":
        K = self.K
        layers.init_linear(self.store, f"{PREFIX}.embed", 2 * K, self.embed, rng, zero=zero)
        layers.init_lstm(self.store, f"{PREFIX}.lstm", self.embed + 3 * K, self.hidden, rng, zero=zero)
        layers.init_linear(self.store, f"{PREFIX}.head", self.hidden, 3 * K, rng, scale=0.1, zero=zero)
        if not zero:
            # start with remembering cells
            b = self.store[f"{PREFIX}.lstm.x.b"]
            b[self.hidden:2 * self.hidden] = 1.0
        return self

    def lift_t(self, p2d) -> Tensor:
        """``p2d`` (..., T, K, 2) normalised coordinates -> (..., T, K, 3) tensor."""
        p2d = np.asarray(p2d)
        if p2d.ndim < 3 or p2d.shape[-2:] != (self.K, 2):
            raise DimensionError(f"lifter expects (..., T, {self.K}, 2), got {p2d.shape}")
        if p2d.ndim == 3:
            out = self.lift_t(p2d[None])
            return out.reshape(out.shape[1:])
        lead, T = p2d.shape[:-3], p2d.shape[-3]
        K, H = self.K, self.hidden
        emb = ad.relu(layers.linear(self.store, f"{PREFIX}.embed", p2d.reshape(lead + (T, 2 * K))))
        h = c = ad.Tensor(np.zeros(lead + (H,)))
        prev = ad.Tensor(np.zeros(lead + (3 * K,)))
        frames = []
        for t in range(T):
            x = ad.concat([emb[..., t, :], prev], axis=-1)
            h, c = layers.lstm_step(self.store, f"{PREFIX}.lstm", x, h, c, H)
            raw = layers.linear(self.store, f"{PREFIX}.head", h).reshape(lead + (K, 3))
            pose = raw - raw[..., 0:1, :]
            frames.append(pose)
            prev = pose.reshape(lead + (3 * K,))
        return ad.stack(frames, axis=-3)

    def lift(self, p2d) -> np.ndarray:
        out = self.lift_t(p2d).numpy().astype(np.float64)
        out[..., 0, :] = 0.0
        return out


@dataclass
class LifterTrainResult:
    losses: list = field(default_factory=list)
    heldout_mpjpe: list = field(default_factory=list)


def pretrain_lifter(lifter: Lifter, pairs, epochs: int = 100, lr: float = 5e-4, batch: int = 16,
                    heldout=None, seed: int = 0, log=None, start_epoch: int = 0) -> LifterTrainResult:
    """Minimise mean L1 over ``(p2d T x K x 2, p3d T x K x 3)`` pairs of equal length."""
    if not pairs:
        raise ConfigError("pretrain_lifter needs a non-empty dataset")
    x = np.stack([p[0] for p in pairs])
    y = np.stack([p[1] for p in pairs])
    result = LifterTrainResult()
    for epoch in range(start_epoch, epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(x))
        total = 0.0
        for i in range(0, len(order), batch):
            idx = order[i:i + batch]
            with ad.Tape() as tape:
                loss = loss_pred(lifter.lift_t(x[idx]), y[idx])
            ad.backward(loss, tape, lifter.store)
            ad.adam_step(lifter.store, lr)
            total += loss.item() * len(idx)
        result.losses.append(total / len(x))
        if heldout:
            result.heldout_mpjpe.append(evaluate_lifter(lifter, heldout))
        if log is not None:
            log(epoch, result.losses[-1], result.heldout_mpjpe[-1] if heldout else float("nan"))
    return result


def evaluate_lifter(lifter: Lifter, pairs) -> float:
    x = np.stack([p[0] for p in pairs])
    y = np.stack([p[1] for p in pairs])
    return mpjpe(lifter.lift(x), y)
