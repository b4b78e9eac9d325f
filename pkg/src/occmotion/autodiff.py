"""Dense tensors with tape-based reverse-mode differentiation.

Every learned component in the package runs on this module. Tensors wrap a
numpy array; operations on tensors that require gradients are appended to the
active :class:`Tape`, and :func:`backward` walks that record in reverse.
"""
from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError

_DTYPE = [np.float32]
_TAPES: list["Tape"] = []


def default_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def float64_mode():
    """Create all new tensors (and parameter leaves) in 64-bit precision."""
    _DTYPE.append(np.float64)
    try:
        yield
    finally:
        _DTYPE.pop()


class Tape:
    """Ordered record of the primitive ops executed while it is active."""

    def __init__(self):
        self.nodes: list[tuple["Tensor", tuple["Tensor", ...], Callable]] = []
        self.leaves: dict[tuple[int, str], "Tensor"] = {}
        self._stores: dict[int, "ParamStore"] = {}

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != default_dtype():
            arr = arr.astype(default_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    if requires:
        tape = active_tape()
        if tape is not None:
            tape.nodes.append((out, tuple(inputs), grad_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ----------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _record(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes with numpy broadcasting of the rest."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def grad(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ _swap(b.data)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # shared weight: fold batch axes into one GEMM
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _swap(a.data) @ g
        return ga, gb

    return _record(out, (a, b), grad)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _record(np.asarray(out), (a,), grad)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _record(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def grad(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(ts))
        )

    return _record(out, ts, grad)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def grad(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _record(out, ts, grad)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(Ellipsis))) or i is None for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def grad(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _record(np.array(out, copy=True), (a,), grad)


# -------------------------------------------------------------- elementwise


def _sigmoid_grad(g, out):
    return g * out * (1.0 - out)


def _tanh_grad(g, out):
    return g * (1.0 - out * out)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split on sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _record(out, (a,), lambda g: (_sigmoid_grad(g, out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (_tanh_grad(g, out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a, grad_floor: float = 0.0) -> Tensor:
    """Square root; ``grad_floor`` bounds the derivative near zero."""
    a = as_tensor(a)
    out = np.sqrt(a.data)
    denom = np.maximum(out, grad_floor) if grad_floor > 0 else out
    return _record(out, (a,), lambda g: (g * 0.5 / denom,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input is inside [lo, hi]."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def atan2(y, x) -> Tensor:
    y, x = as_tensor(y), as_tensor(x)
    r2 = x.data * x.data + y.data * y.data
    return _record(
        np.arctan2(y.data, x.data), (y, x), lambda g: (g * x.data / r2, -g * y.data / r2)
    )


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), grad)


LN_EPS = 1e-5


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if d < 1:
        raise ContractError("layer_norm needs a non-empty last axis")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm gain/bias {gain.shape}/{bias.shape} vs last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def grad(g):
        dxhat = g * gain.data
        gx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, d)
        return gx, (flat_g * xhat.reshape(-1, d)).sum(0), flat_g.sum(0)

    return _record(out, (x, gain, bias), grad)


# --------------------------------------------------------------- parameters


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    trainable: bool = True


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


class ParamStore:
    """Named parameter arrays with gradient buffers and optimizer moments."""

    def __init__(self):
        self.entries: dict[str, Param] = {}
        self.adam: dict[str, AdamState] = {}

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self.entries:
            raise ConfigError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=np.float32)
        if value.ndim == 0 or min(value.shape) < 1:
            raise DimensionError(f"parameter {name!r} has invalid shape {value.shape}")
        self.entries[name] = Param(value, np.zeros_like(value), trainable)

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name].value

    def __len__(self):
        return len(self.entries)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.entries if n.startswith(prefix)]

    def param(self, name: str) -> Tensor:
        """Leaf tensor for ``name``; registered on the active tape when trainable."""
        try:
            p = self.entries[name]
        except KeyError:
            raise ConfigError(f"unknown parameter {name!r}") from None
        tape = active_tape()
        if tape is None or not p.trainable:
            return Tensor(p.value, name=name)
        key = (id(self), name)
        leaf = tape.leaves.get(key)
        if leaf is None or leaf.data.dtype != default_dtype():
            leaf = Tensor(p.value, requires_grad=True, name=name)
            tape.leaves[key] = leaf
            tape._stores[id(self)] = self
        return leaf

    def set_trainable(self, prefix: str, flag: bool) -> None:
        for name in self.names(prefix):
            self.entries[name].trainable = flag

    def zero_grad(self) -> None:
        for p in self.entries.values():
            p.grad[...] = 0

    def grad_norm(self, prefix: str = "") -> float:
        return math.sqrt(sum(float((self.entries[n].grad.astype(np.float64) ** 2).sum()) for n in self.names(prefix)))

    def num_values(self) -> int:
        return sum(p.value.size for p in self.entries.values())

    def copy(self, dtype=np.float32) -> "ParamStore":
        new = ParamStore()
        for name, p in self.entries.items():
            new.entries[name] = Param(p.value.astype(dtype, copy=True), np.zeros(p.value.shape, dtype), p.trainable)
        for name, st in self.adam.items():
            new.adam[name] = AdamState(st.m.copy(), st.v.copy(), st.step)
        return new

    def merge(self, other: "ParamStore") -> None:
        for name, p in other.entries.items():
            if name in self.entries:
                raise ConfigError(f"duplicate parameter name {name!r}")
            self.entries[name] = p

    # checkpoint I/O --------------------------------------------------------

    def to_json(self) -> dict:
        return {
            name: {"shape": list(p.value.shape), "data": p.value.reshape(-1).tolist()}
            for name, p in self.entries.items()
        }

    def load_json(self, doc: dict, strict: bool = True) -> None:
        """Overwrite values from a checkpoint document.

        Unknown names and shape mismatches are rejected; with ``strict`` every
        parameter of this store must also be present in ``doc``.
        """
        for name, entry in doc.items():
            if name not in self.entries:
                raise ConfigError(f"checkpoint has unknown parameter {name!r}")
            shape = tuple(entry["shape"])
            target = self.entries[name].value
            if shape != target.shape:
                raise DimensionError(f"checkpoint shape {shape} for {name!r}, expected {target.shape}")
            data = np.asarray(entry["data"], dtype=np.float32)
            if data.size != target.size:
                raise DimensionError(f"checkpoint {name!r}: {data.size} values for shape {shape}")
            target[...] = data.reshape(shape)
        if strict:
            missing = set(self.entries) - set(doc)
            if missing:
                raise ConfigError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    def load(self, path, strict: bool = True) -> None:
        self.load_json(json.loads(Path(path).read_text()), strict=strict)

    def optimizer_json(self) -> dict:
        return {
            name: {"step": st.step, "m": st.m.reshape(-1).tolist(), "v": st.v.reshape(-1).tolist()}
            for name, st in self.adam.items()
        }

    def load_optimizer_json(self, doc: dict) -> None:
        for name, st in doc.items():
            shape = self.entries[name].value.shape
            self.adam[name] = AdamState(
                np.asarray(st["m"], np.float32).reshape(shape),
                np.asarray(st["v"], np.float32).reshape(shape),
                int(st["step"]),
            )


# ------------------------------------------------------------ differentiation


def backward(loss: Tensor, tape: Tape, store: ParamStore | None = None) -> dict[str, np.ndarray]:
    """Propagate d(loss) back through ``tape`` and add parameter gradients to the stores.

    Returns the gradients of this call keyed by parameter name. Gradients
    accumulate: calling twice without :meth:`ParamStore.zero_grad` sums them.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite at the tape boundary")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = _unbroadcast(np.asarray(gi), inp.shape)
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    result = {}
    stores = tape._stores if store is None else {id(store): store}
    for (sid, name), leaf in tape.leaves.items():
        if sid not in stores:
            continue
        g = grads.get(id(leaf))
        if g is None:
            continue
        entry = stores[sid].entries[name]
        entry.grad += g.astype(entry.grad.dtype)
        result[name] = g
    return result


def adam_step(
    store: ParamStore,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update of all trainable entries, then zero the gradients."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    for name, p in store.entries.items():
        if not p.trainable:
            continue
        st = store.adam.get(name)
        if st is None:
            st = store.adam[name] = AdamState(np.zeros_like(p.value), np.zeros_like(p.value))
        st.step += 1
        g = p.grad
        st.m *= b1
        st.m += (1 - b1) * g
        st.v *= b2
        st.v += (1 - b2) * g * g
        mhat = st.m / (1 - b1**st.step)
        vhat = st.v / (1 - b2**st.step)
        p.value -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.value.dtype)
    store.zero_grad()


# ------------------------------------------------------------- gradient check


@dataclass
class GradcheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def worst(self) -> tuple[str, float]:
        if not self.errors:
            return ("", 0.0)
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def passed(self) -> bool:
        return self.worst[1] <= self.tol


def gradcheck(
    fn: Callable[[ParamStore], Tensor],
    store: ParamStore,
    names: Iterable[str] | None = None,
    eps: float = 1e-5,
    samples: int = 4,
    seed: int = 0,
    tol: float = 1e-4,
) -> GradcheckReport:
    """Compare taped gradients with central differences in 64-bit precision.

    ``samples`` entries of each parameter are perturbed; the error reported per
    parameter is ``|analytic - numeric| / max(|analytic|, |numeric|)`` over the
    sampled entries (vector norms). When both sides sit below the
    finite-difference round-off level the gradient is analytically zero (for
    example a key bias under softmax) and the error is reported as 0.
    """
    rng = np.random.default_rng(seed)
    s64 = store.copy(np.float64)
    names = list(names) if names is not None else [n for n, p in s64.entries.items() if p.trainable]
    with float64_mode():
        with Tape() as tape:
            loss = fn(s64)
        analytic = backward(loss, tape, s64)
        noise = 100 * np.finfo(np.float64).eps * max(1.0, abs(loss.item())) / eps
        report = GradcheckReport(tol=tol)
        for name in names:
            value = s64.entries[name].value
            flat = value.reshape(-1)
            idx = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
            num = np.zeros(len(idx))
            ana = analytic.get(name, np.zeros_like(value)).reshape(-1)[idx]
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                fp = fn(s64).item()
                flat[i] = orig - eps
                fm = fn(s64).item()
                flat[i] = orig
                num[j] = (fp - fm) / (2 * eps)
            denom = max(np.linalg.norm(ana), np.linalg.norm(num))
            if denom <= noise:
                report.errors[name] = 0.0
                continue
            report.errors[name] = float(np.linalg.norm(ana - num) / denom)
    return report
