"""Parameter initialisers and small network building blocks over :mod:`autodiff`.

Layers are plain functions of ``(store, prefix, inputs)``; parameters live in
the store under ``prefix + "." + suffix``.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor


def init_linear(store: ParamStore, prefix: str, n_in: int, n_out: int, rng, scale: float = 1.0,
                zero: bool = False, bias=None) -> None:
    if zero:
        w = np.zeros((n_in, n_out))
    else:
        w = rng.normal(0.0, scale * np.sqrt(1.0 / n_in), size=(n_in, n_out))
    store.add(f"{prefix}.w", w)
    store.add(f"{prefix}.b", np.zeros(n_out) if bias is None else bias)


def linear(store: ParamStore, prefix: str, x) -> Tensor:
    return ad.matmul(x, store.param(f"{prefix}.w")) + store.param(f"{prefix}.b")


def init_mlp(store, prefix, sizes, rng, out_scale=1.0, out_bias=None) -> None:
    """Hidden layers get He-style init; the output layer is scaled by ``out_scale``."""
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        init_linear(store, f"{prefix}.l{i}", a, b, rng,
                    scale=out_scale if last else np.sqrt(2.0),
                    zero=last and out_scale == 0.0,
                    bias=out_bias if last else None)


def mlp(store: ParamStore, prefix: str, x, n_layers: int = 2) -> Tensor:
    for i in range(n_layers):
        x = linear(store, f"{prefix}.l{i}", x)
        if i < n_layers - 1:
            x = ad.relu(x)
    return x


# ------------------------------------------------------------------ recurrent


def init_gru(store: ParamStore, prefix: str, n_in: int, hidden: int, rng, zero: bool = False) -> None:
    # gate order: update, reset, candidate
    init_linear(store, f"{prefix}.x", n_in, 3 * hidden, rng, zero=zero)
    if zero:
        store.add(f"{prefix}.h", np.zeros((hidden, 3 * hidden)))
    else:
        store.add(f"{prefix}.h", rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, 3 * hidden)))


def gru_step(store: ParamStore, prefix: str, xw: Tensor, h: Tensor, hidden: int) -> Tensor:
    """One GRU update given the precomputed input projection ``xw`` (..., 3H)."""
    hw = ad.matmul(h, store.param(f"{prefix}.h"))
    z = ad.sigmoid(xw[..., :hidden] + hw[..., :hidden])
    r = ad.sigmoid(xw[..., hidden:2 * hidden] + hw[..., hidden:2 * hidden])
    n = ad.tanh(xw[..., 2 * hidden:] + r * hw[..., 2 * hidden:])
    return n + z * (h - n)


def gru(store: ParamStore, prefix: str, x, hidden: int) -> list[Tensor]:
    """Causal GRU over axis -2 of ``x`` (..., T, D); returns hidden states per step."""
    x = ad.as_tensor(x)
    if x.ndim == 2:
        return [h.reshape(h.shape[1:]) for h in gru(store, prefix, x.reshape((1,) + x.shape), hidden)]
    xw = linear(store, f"{prefix}.x", x)
    h = ad.Tensor(np.zeros(x.shape[:-2] + (hidden,)))
    out = []
    for t in range(x.shape[-2]):
        h = gru_step(store, prefix, xw[..., t, :], h, hidden)
        out.append(h)
    return out


def init_lstm(store: ParamStore, prefix: str, n_in: int, hidden: int, rng, zero: bool = False) -> None:
    # gate order: input, forget, cell, output
    init_linear(store, f"{prefix}.x", n_in, 4 * hidden, rng, zero=zero)
    if zero:
        store.add(f"{prefix}.h", np.zeros((hidden, 4 * hidden)))
    else:
        store.add(f"{prefix}.h", rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, 4 * hidden)))


def lstm_step(store, prefix, x, h, c, hidden):
    gates = linear(store, f"{prefix}.x", x) + ad.matmul(h, store.param(f"{prefix}.h"))
    i = ad.sigmoid(gates[..., :hidden])
    f = ad.sigmoid(gates[..., hidden:2 * hidden])
    g = ad.tanh(gates[..., 2 * hidden:3 * hidden])
    o = ad.sigmoid(gates[..., 3 * hidden:])
    c = f * c + i * g
    h = o * ad.tanh(c)
    return h, c
