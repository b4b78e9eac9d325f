"""DCT-domain MLP-Mixer motion prediction and causal completion of occluded joints.

``predict`` maps an N-frame root-relative history to L future frames:
DCT over time, a spatial FC, ``m`` residual blocks mixing along the
frequency axis with layer norm over features, a second spatial FC, an
``L x N`` frequency projection, an L-point IDCT, and finally the last
observed frame added back as an anchor.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import ConfigError, ContractError, DimensionError
from .metrics import loss_pred, per_joint_error

PREFIX = "mix"


@lru_cache(maxsize=None)
def _dct_matrix(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    B = np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    B[0] *= np.sqrt(1.0 / n)
    B[1:] *= np.sqrt(2.0 / n)
    B.setflags(write=False)
    return B


@dataclass(frozen=True)
class DctBasis:
    """Orthonormal DCT-II basis; ``matrix[k, i] = c_k cos(pi (2i+1) k / 2n)``."""

    n: int

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"DCT length must be positive, got {self.n}")

    @property
    def matrix(self) -> np.ndarray:
        return _dct_matrix(self.n)


def dct(x, axis: int = 0) -> np.ndarray:
    x = np.moveaxis(np.asarray(x, np.float64), axis, -1)
    return np.moveaxis(x @ _dct_matrix(x.shape[-1]).T, -1, axis)


def idct(X, axis: int = 0) -> np.ndarray:
    X = np.moveaxis(np.asarray(X, np.float64), axis, -1)
    return np.moveaxis(X @ _dct_matrix(X.shape[-1]), -1, axis)


@dataclass
class MixerConfig:
    K: int = 17
    N: int = 16
    L: int = 8
    m: int = 48

    def __post_init__(self):
        if min(self.K, self.N, self.L, self.m) < 1:
            raise ConfigError(f"mixer sizes must be positive: {self}")

    @property
    def C(self) -> int:
        return 3 * self.K


@dataclass
class MotionPredictor:
    cfg: MixerConfig = field(default_factory=MixerConfig)
    store: ParamStore = field(default_factory=ParamStore)

    def init(self, rng, zero: bool = False, ln_gain: float = 0.1) -> "MotionPredictor":
        c = self.cfg
        C, N, L = c.C, c.N, c.L
        s = self.store

        def rand(shape, fan_in):
            return np.zeros(shape) if zero else rng.normal(0.0, np.sqrt(1.0 / fan_in), size=shape)

        s.add(f"{PREFIX}.w0", rand((C, C), C))
        s.add(f"{PREFIX}.b0", np.zeros(C))
        for i in range(c.m):
            s.add(f"{PREFIX}.blk{i}.w", rand((N, N), N))
            s.add(f"{PREFIX}.blk{i}.b", np.zeros(C))
            s.add(f"{PREFIX}.blk{i}.g", np.full(C, 0.0 if zero else ln_gain))
            s.add(f"{PREFIX}.blk{i}.beta", np.zeros(C))
        # output FC starts at zero so the untrained predictor copies the last frame;
        # the frequency projection starts as truncation to the lowest L coefficients
        s.add(f"{PREFIX}.w_out", np.zeros((C, C)))
        s.add(f"{PREFIX}.b_out", np.zeros(C))
        s.add(f"{PREFIX}.w_t", np.zeros((L, N)) if zero else np.eye(L, N) * np.sqrt(L / N))
        return self

    # ---------------------------------------------------------------- forward

    def delta_t(self, history) -> Tensor:
        """Network output before the anchor, (..., L, C) for a (..., N, K, 3) history."""
        c, s = self.cfg, self.store
        shape = tuple(history.shape)
        if len(shape) < 3 or shape[-2:] != (c.K, 3):
            raise DimensionError(f"history must be (..., N, {c.K}, 3), got {shape}")
        if shape[-3] != c.N:
            raise ContractError(f"history must hold exactly N={c.N} frames, got {shape[-3]}")
        lead = shape[:-3]
        if isinstance(history, Tensor):
            z = ad.matmul(ad.Tensor(_dct_matrix(c.N)), ad.reshape(history, lead + (c.N, c.C)))
        else:
            z = ad.Tensor(_dct_matrix(c.N) @ np.asarray(history).reshape(lead + (c.N, c.C)))
        z = ad.matmul(z, s.param(f"{PREFIX}.w0")) + s.param(f"{PREFIX}.b0")
        for i in range(c.m):
            p = f"{PREFIX}.blk{i}"
            y = ad.matmul(s.param(f"{p}.w"), z) + s.param(f"{p}.b")
            z = z + ad.layer_norm(y, s.param(f"{p}.g"), s.param(f"{p}.beta"))
        z = ad.matmul(z, s.param(f"{PREFIX}.w_out")) + s.param(f"{PREFIX}.b_out")
        z = ad.matmul(s.param(f"{PREFIX}.w_t"), z)
        return ad.matmul(ad.Tensor(_dct_matrix(c.L).T), z)

    def predict_t(self, history) -> Tensor:
        """(..., N, K, 3) history -> (..., L, K, 3) tensor prediction."""
        c = self.cfg
        if not isinstance(history, Tensor):
            history = np.asarray(history)
        lead = tuple(history.shape[:-3])
        delta = self.delta_t(history)
        anchor = ad.reshape(ad.as_tensor(history)[..., -1:, :, :], lead + (1, c.C))
        return ad.reshape(delta + anchor, lead + (c.L, c.K, 3))

    def predict(self, history) -> np.ndarray:
        """Numpy prediction; the anchor is added in float64 so a zero network copies exactly."""
        c = self.cfg
        history = np.asarray(history, np.float64)
        delta = self.delta_t(history).numpy().astype(np.float64)
        return history[..., -1:, :, :] + delta.reshape(history.shape[:-3] + (c.L, c.K, 3))

    # ------------------------------------------------------------ completion

    def complete(self, seq, visible) -> np.ndarray:
        """Causally replace occluded joints with predicted frame 1, front to back.

        ``seq`` (..., T, K, 3) and ``visible`` (..., T, K). Visible entries are
        returned bit-identical; frames without occlusion are untouched.
        """
        seq = np.asarray(seq, np.float64)
        visible = np.asarray(visible, bool)
        if seq.shape[:-1] != visible.shape:
            raise DimensionError(f"sequence {seq.shape} and visibility {visible.shape} disagree")
        single = seq.ndim == 3
        if single:
            seq, visible = seq[None], visible[None]
        out = seq.copy()
        N = self.cfg.N
        T = seq.shape[1]
        occ_frames = ~visible.all(axis=-1)  # (B, T)
        if occ_frames.any():
            # every clip is padded by N copies of its frame 0; only the part that
            # is actually read differs from the per-clip minimal padding rule
            work = np.concatenate([np.repeat(out[:, :1], N, axis=1), out], axis=1)
            for t in range(T):
                clips = np.nonzero(occ_frames[:, t])[0]
                if clips.size == 0:
                    continue
                hist = work[clips, t:t + N]
                pred = self.predict(hist)[:, 0]
                occ = ~visible[clips, t]
                frame = work[clips, t + N]
                frame[occ] = pred[occ]
                work[clips, t + N] = frame
            out = work[:, N:]
        return out[0] if single else out


def pad_short_prefix(seq, N: int, first_occluded: int | None = None) -> tuple[np.ndarray, int]:
    """Prepend copies of frame 0 until ``N`` frames precede the first occluded frame.

    Returns the padded sequence and the number of frames prepended.
    """
    seq = np.asarray(seq)
    if first_occluded is None:
        first_occluded = len(seq)
    pad = max(0, N - first_occluded)
    if pad == 0:
        return seq, 0
    return np.concatenate([np.repeat(seq[:1], pad, axis=0), seq], axis=0), pad


def zero_velocity(history, L: int) -> np.ndarray:
    history = np.asarray(history)
    return np.repeat(history[..., -1:, :, :], L, axis=-3)


# ------------------------------------------------------------------ training


def make_windows(sequences, N: int, L: int, stride: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Cut ``(history N, future L)`` window pairs from (T, K, 3) sequences."""
    hist, fut = [], []
    for seq in sequences:
        seq = np.asarray(seq)
        for s in range(0, len(seq) - N - L + 1, stride):
            hist.append(seq[s:s + N])
            fut.append(seq[s + N:s + N + L])
    if not hist:
        raise ConfigError(f"no sequence is long enough for N={N}, L={L} windows")
    return np.stack(hist), np.stack(fut)


@dataclass
class PredictorTrainResult:
    losses: list = field(default_factory=list)
    heldout_mpjpe: list = field(default_factory=list)
    baseline_mpjpe: float = float("nan")


def evaluate_predictor(pred: MotionPredictor, hist, fut, frames: int | None = None) -> float:
    """Mean per-joint error (mm, root-aligned) over the first ``frames`` predicted frames."""
    frames = frames or pred.cfg.L
    out = np.concatenate([pred.predict(hist[i:i + 512]) for i in range(0, len(hist), 512)])
    return float(per_joint_error(out[:, :frames], fut[:, :frames]).mean())


def pretrain_predictor(pred: MotionPredictor, hist, fut, epochs: int = 100, lr: float = 5e-4,
                       batch: int = 128, heldout=None, seed: int = 0, log=None,
                       start_epoch: int = 0) -> PredictorTrainResult:
    """Minimise mean L1 over all L predicted frames of ``(history, future)`` windows."""
    if len(hist) == 0:
        raise ConfigError("pretrain_predictor needs a non-empty dataset")
    if hist.shape[1] != pred.cfg.N or fut.shape[1] != pred.cfg.L:
        raise DimensionError(f"windows {hist.shape[1]}:{fut.shape[1]} do not match N:L "
                             f"{pred.cfg.N}:{pred.cfg.L}")
    result = PredictorTrainResult()
    if heldout is not None:
        h_hist, h_fut = heldout
        result.baseline_mpjpe = float(per_joint_error(zero_velocity(h_hist, pred.cfg.L), h_fut).mean())
    for epoch in range(start_epoch, epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(hist))
        total = 0.0
        for i in range(0, len(order), batch):
            idx = order[i:i + batch]
            with ad.Tape() as tape:
                loss = loss_pred(pred.predict_t(hist[idx]), fut[idx])
            ad.backward(loss, tape, pred.store)
            ad.adam_step(pred.store, lr)
            total += loss.item() * len(idx)
        result.losses.append(total / len(hist))
        if heldout is not None:
            result.heldout_mpjpe.append(evaluate_predictor(pred, *heldout))
        if log is not None:
            log(epoch, result.losses[-1], result.heldout_mpjpe[-1] if heldout is not None else float("nan"))
    return result



def complete_t(pred: MotionPredictor, seq, visible) -> Tensor:
    """Differentiable variant of :meth:`MotionPredictor.complete` for (B, T, K, 3) inputs.

    Used only when the de-occlusion stage is fine-tuned end to end.
    """
    seq = ad.as_tensor(seq)
    visible = np.asarray(visible, bool)
    N = pred.cfg.N
    frames = [seq[:, :1]] * N
    for t in range(seq.shape[1]):
        cur = seq[:, t:t + 1]
        vis = visible[:, t]
        if not vis.all():
            p1 = pred.predict_t(ad.concat(frames[-N:], axis=1))[:, :1]
            keep = vis[:, None, :, None].astype(np.float64)
            cur = cur * keep + p1 * (1.0 - keep)
        frames.append(cur)
    return ad.concat(frames[N:], axis=1)
