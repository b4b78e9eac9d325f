"""Occlusion detector: confidence smoothing, a learned temporal offset, thresholding.

Raw detector confidences ``S`` are blended with the previous frame
(``S' = a*S_t + (1-a)*S_{t-1}``), a small GRU shared across joints reads the
raw history ``S_0..S_{t-1}`` and emits an offset, and ``S'' = clamp(S' + offset)``
is thresholded into visible / occluded sets.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import ParamStore, Tensor
from .errors import ConfigError, ContractError, DimensionError

DETECTOR_MODES = ("spatial", "temporal", "full")
HIDDEN = 16
PREFIX = "det"


def weighted_confidence(s, alpha: float) -> np.ndarray:
    """Blend each frame with its predecessor; frame 0 is passed through."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    s = np.asarray(s, np.float64)
    out = s.copy()
    out[..., 1:, :] = alpha * s[..., 1:, :] + (1.0 - alpha) * s[..., :-1, :]
    return out


@dataclass
class VisibilityReport:
    visible: np.ndarray  # T x K bool
    confidence_final: np.ndarray  # T x K
    thred: float

    @property
    def occluded(self) -> np.ndarray:
        return ~self.visible

    def to_json(self) -> dict:
        return {"visible": self.visible.tolist(),
                "confidence_final": np.round(self.confidence_final.astype(np.float64), 6).tolist(),
                "thred": self.thred}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def all_visible(cls, T: int, K: int, thred: float = 0.6) -> "VisibilityReport":
        return cls(np.ones((T, K), bool), np.ones((T, K)), thred)


def partition(s_dprime, thred: float) -> VisibilityReport:
    """Visible iff ``S'' >= thred``; the boundary value counts as visible."""
    if not 0.0 < thred < 1.0:
        raise ConfigError(f"thred must lie in (0, 1), got {thred}")
    s_dprime = np.asarray(s_dprime)
    return VisibilityReport(s_dprime >= thred, s_dprime, thred)


@dataclass
class Detector:
    alpha: float = 0.8
    thred: float = 0.6
    mode: str = "full"
    store: ParamStore = field(default_factory=ParamStore)

    def __post_init__(self):
        if self.mode not in DETECTOR_MODES:
            raise ConfigError(f"detector mode must be one of {DETECTOR_MODES}, got {self.mode!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 < self.thred < 1.0:
            raise ConfigError(f"thred must lie in (0, 1), got {self.thred}")

    def init(self, rng, zero: bool = False) -> "Detector":
        layers.init_gru(self.store, f"{PREFIX}.gru", 1, HIDDEN, rng, zero=zero)
        # zero head: the untrained detector is the plain weighted confidence
        layers.init_linear(self.store, f"{PREFIX}.head", HIDDEN, 1, rng, zero=True)
        return self

    # ---------------------------------------------------------------- forward

    def rnn_outputs(self, s) -> Tensor:
        """Head output for frames 1..T-1 from the raw history, shape (..., T-1, K)."""
        s = np.asarray(s)
        if s.shape[-2] < 2:
            raise ContractError("temporal offset needs at least one frame of history")
        # joints become independent sequences sharing the GRU
        hist = np.swapaxes(s[..., :-1, :], -1, -2)[..., None]  # (..., K, T-1, 1)
        states = layers.gru(self.store, f"{PREFIX}.gru", hist, HIDDEN)
        h = ad.stack(states, axis=-2)  # (..., K, T-1, H)
        out = layers.linear(self.store, f"{PREFIX}.head", h)[..., 0]
        return ad.swapaxes(out, -1, -2)

    def temporal_offset(self, s) -> Tensor:
        """Offsets for every frame (frame 0 is 0), shape like ``s``."""
        s = np.asarray(s)
        zero = ad.Tensor(np.zeros(s.shape[:-2] + (1, s.shape[-1])))
        if s.shape[-2] == 1:
            return zero
        return ad.concat([zero, self.rnn_outputs(s)], axis=-2)

    def final_confidence_t(self, s) -> Tensor:
        s = np.asarray(s, np.float64)
        if s.ndim < 2:
            raise DimensionError(f"confidences must be (..., T, K), got {s.shape}")
        s_prime = weighted_confidence(s, self.alpha)
        if self.mode == "spatial":
            return ad.Tensor(s_prime)
        if self.mode == "temporal":
            # no smoothing term; frame 0 has no history and keeps its raw score
            if s.shape[-2] == 1:
                return ad.Tensor(s)
            out = ad.concat([ad.Tensor(s[..., :1, :]), self.rnn_outputs(s)], axis=-2)
            return ad.clip(out, 0.0, 1.0)
        return ad.clip(self.temporal_offset(s) + s_prime, 0.0, 1.0)

    def final_confidence(self, s) -> np.ndarray:
        return self.final_confidence_t(s).numpy().astype(np.float64)

    def detect(self, s) -> VisibilityReport:
        return partition(self.final_confidence(s), self.thred)

    def save(self, path) -> None:
        doc = {"alpha": self.alpha, "thred": self.thred, "mode": self.mode, "params": self.store.to_json()}
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path) -> "Detector":
        doc = json.loads(Path(path).read_text())
        det = cls(doc["alpha"], doc["thred"], doc["mode"])
        det.init(np.random.default_rng(0), zero=True)
        det.store.load_json(doc["params"])
        return det


# ------------------------------------------------------------------ training


def f1_occluded(pred_visible, true_visible) -> float:
    """F1 with the occluded class as positive."""
    p = ~np.asarray(pred_visible, bool)
    t = ~np.asarray(true_visible, bool)
    tp = float((p & t).sum())
    fp = float((p & ~t).sum())
    fn = float((~p & t).sum())
    if tp == 0.0:
        return 1.0 if fp == 0.0 and fn == 0.0 else 0.0
    return 2 * tp / (2 * tp + fp + fn)


def detector_f1(det: Detector, data) -> float:
    preds, truth = [], []
    for conf, vis in data:
        preds.append(det.detect(conf).visible.reshape(-1))
        truth.append(np.asarray(vis, bool).reshape(-1))
    return f1_occluded(np.concatenate(preds), np.concatenate(truth))


def _batches(data, batch: int, rng):
    """Shuffled batches of equal-length sequences."""
    by_len: dict[int, list[int]] = {}
    for i, (conf, _) in enumerate(data):
        by_len.setdefault(len(conf), []).append(i)
    out = []
    for idx in by_len.values():
        idx = list(rng.permutation(idx))
        out += [idx[i:i + batch] for i in range(0, len(idx), batch)]
    return [out[i] for i in rng.permutation(len(out))]


@dataclass
class DetectorTrainResult:
    losses: list = field(default_factory=list)
    heldout_f1: float = float("nan")


DETECTOR_LOSSES = ("margin", "mse")


def detector_loss(s_dprime: Tensor, visible, thred: float, kind: str = "margin", margin: float = 0.05) -> Tensor:
    """Training loss for ``S''`` against boolean visibility labels.

    ``mse`` regresses ``S''`` onto the 0/1 label. ``margin`` is a squared hinge
    that only penalises scores closer than ``margin`` to the wrong side of
    ``thred``, which is what the thresholded output is judged on.
    """
    label = np.asarray(visible, np.float64)
    if kind == "mse":
        return ad.mean(ad.square(s_dprime - label))
    if kind != "margin":
        raise ConfigError(f"detector loss must be one of {DETECTOR_LOSSES}, got {kind!r}")
    sign = 2.0 * label - 1.0
    return ad.mean(ad.square(ad.relu(margin - (s_dprime - thred) * sign)))


def train_detector(det: Detector, data, epochs: int = 20, lr: float = 5e-3, batch: int = 32,
                   heldout=None, seed: int = 0, loss: str = "margin", log=None,
                   start_epoch: int = 0) -> DetectorTrainResult:
    """Fit the offset GRU on ``(conf T x K, visible T x K)`` pairs; see :func:`detector_loss`."""
    if not data:
        raise ConfigError("train_detector needs a non-empty dataset")
    if loss not in DETECTOR_LOSSES:
        raise ConfigError(f"detector loss must be one of {DETECTOR_LOSSES}, got {loss!r}")
    result = DetectorTrainResult()
    if det.mode == "spatial":
        # nothing to learn
        result.losses = [_eval_loss(det, data, loss)] * (epochs - start_epoch)
    else:
        for epoch in range(start_epoch, epochs):
            total, count = 0.0, 0
            # per-epoch stream so a resumed run sees the same batches
            for idx in _batches(data, batch, np.random.default_rng([seed, epoch])):
                conf = np.stack([data[i][0] for i in idx])
                label = np.stack([data[i][1] for i in idx])
                with ad.Tape() as tape:
                    value = detector_loss(det.final_confidence_t(conf), label, det.thred, loss)
                ad.backward(value, tape, det.store)
                ad.adam_step(det.store, lr)
                total += value.item() * len(idx)
                count += len(idx)
            result.losses.append(total / count)
            if log is not None:
                log(epoch, result.losses[-1])
    if heldout:
        result.heldout_f1 = detector_f1(det, heldout)
    return result


def _eval_loss(det: Detector, data, kind: str) -> float:
    return float(np.mean([detector_loss(det.final_confidence_t(c), v, det.thred, kind).item() for c, v in data]))
