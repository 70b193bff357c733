"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Operations record themselves on the active :class:`Tape` only when a tape is
open and at least one input requires a gradient, so inference runs without
building a graph.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
import os
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

_DTYPES = {"f32": np.float32, "f64": np.float64}
_precision: contextvars.ContextVar[str] = contextvars.ContextVar(
    "ptx_precision", default=os.environ.get("PTX_PRECISION", "f32")
)
_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "ptx_tape", default=None
)

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def get_dtype() -> type:
    return _DTYPES[_precision.get()]


def set_precision(name: str) -> None:
    if name not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {name!r}")
    _precision.set(name)


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    if name not in _DTYPES:
        raise ValueError(f"precision must be one of {sorted(_DTYPES)}, got {name!r}")
    token = _precision.set(name)
    try:
        yield
    finally:
        _precision.reset(token)


class Tensor:
    """n-dimensional value. Leaves with ``requires_grad`` own a ``grad`` buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name
        self._node = None  # id of the producing tape record, None for leaves

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive operations.

    Records are appended as operations execute, so the list is already in
    topological order; :meth:`backward` walks it in reverse exactly once.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def edges(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(op name, input node ids, output node id); leaves have id -1."""
        out = []
        for rec in self.records:
            ins = tuple(-1 if t._node is None else t._node for t in rec.inputs)
            out.append((rec.op, ins, rec.output._node))
        return out

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._node is None:
            return
        grads: dict[int, np.ndarray] = {loss._node: np.ones_like(loss.data)}
        for idx in range(len(self.records) - 1, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            rec = self.records[idx]
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    inp.grad += gi
                elif inp._node in grads:
                    grads[inp._node] = grads[inp._node] + gi
                else:
                    grads[inp._node] = gi


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._node = None
    tape = _active_tape.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        out._node = len(tape.records)
        tape.records.append(_Record(op, inputs, out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ----------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return _make("scale", a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; also batched over leading axes of ``a`` (and ``b``)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if ad.ndim == 1:
            gb = np.outer(ad, g)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make("matmul", ad @ bd, (a, b), backward)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def take(a: Tensor, index) -> Tensor:
    src_shape, dt = a.shape, a.data.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dt)
        np.add.at(full, index, g)
        return (full,)

    return _make("take", np.ascontiguousarray(a.data[index]), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_wrap(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _make("mean", np.asarray(a.data.mean()), (a,),
                 lambda g: (np.broadcast_to(g / g.dtype.type(n), shape).copy(),))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the erf form of the normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    out = (xd * cdf).astype(xd.dtype, copy=False)

    def backward(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return ((g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),)

    return _make("gelu", out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: last extent {d} vs gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gamma.data

    def backward(g):
        ggam = (g * xhat).reshape(-1, d).sum(axis=0)
        gbet = g.reshape(-1, d).sum(axis=0)
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggam, gbet

    return _make("layer_norm", xhat * gd + beta.data, (x, gamma, beta), backward)


def _softmax(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def attention_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Row-stochastic attention weights softmax(q k^T / sqrt(dh)) on raw arrays."""
    dh = q.shape[-1]
    return _softmax((q @ np.swapaxes(k, -1, -2)) * q.dtype.type(1.0 / math.sqrt(dh)))


def softmax_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over [heads, n, dh] inputs (queries may differ in n)."""
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ValueError("softmax_attention expects [heads, n, dh] tensors")
    if q.shape[0] != k.shape[0] or k.shape[0] != v.shape[0] or q.shape[2] != k.shape[2]:
        raise ValueError(f"softmax_attention shape mismatch: q{q.shape} k{k.shape} v{v.shape}")
    if k.shape[1] != v.shape[1]:
        raise ValueError(f"softmax_attention: keys {k.shape} and values {v.shape} differ in length")
    qd, kd, vd = q.data, k.data, v.data
    c = qd.dtype.type(1.0 / math.sqrt(qd.shape[-1]))
    p = attention_weights(qd, kd)

    def backward(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gp = g @ np.swapaxes(vd, -1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gq = (gs @ kd) * c
        gk = (np.swapaxes(gs, -1, -2) @ qd) * c
        return gq, gk, gv

    return _make("attention", p @ vd, (q, k, v), backward)


def sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_loss(pred_logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy in the stable logits form."""
    y = target.data if isinstance(target, Tensor) else np.asarray(target)
    if y.shape != pred_logits.shape:
        raise ValueError(f"bce_loss shape mismatch: logits {pred_logits.shape} vs target {y.shape}")
    if y.size and (np.min(y) < 0 or np.max(y) > 1):
        raise ValueError("bce_loss: target values must lie in [0, 1]")
    z = pred_logits.data
    y = y.astype(z.dtype, copy=False)
    n = z.size
    loss = (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean()

    def backward(g):
        return ((sigmoid_np(z) - y) * (g / z.dtype.type(n)),)

    return _make("bce", np.asarray(loss, dtype=z.dtype), (pred_logits,), backward)


def upsample_matrix(n: int, dtype=np.float64) -> np.ndarray:
    """[2n, n] align-corners-false bilinear interpolation weights along one axis."""
    m = np.zeros((2 * n, n), dtype=dtype)
    for i in range(2 * n):
        src = max((i + 0.5) / 2.0 - 0.5, 0.0)
        lo = min(int(math.floor(src)), n - 1)
        hi = min(lo + 1, n - 1)
        w = src - lo
        m[i, lo] += 1.0 - w
        m[i, hi] += w
    return m


def bilinear_upsample2x(x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError(f"bilinear_upsample2x expects [h, w] with h, w >= 2, got {x.shape}")
    h, w = x.shape
    ah = upsample_matrix(h, x.data.dtype)
    aw = upsample_matrix(w, x.data.dtype)
    return _make("upsample2x", ah @ x.data @ aw.T, (x,), lambda g: (ah.T @ g @ aw,))


# ----------------------------------------------------------------------------
# finite-difference oracle


class GradCheckError(RuntimeError):
    pass


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    coords_per_tensor: int = 32,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar from the current contents of ``params``. Tensors
    with more than ``coords_per_tensor`` elements are checked on a seeded
    coordinate subsample. Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if get_dtype() is not np.float64:
        raise GradCheckError("grad_check requires 64-bit precision")
    if not 1e-6 <= step <= 1e-3:
        raise GradCheckError(f"step {step} outside [1e-6, 1e-3]")
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise GradCheckError(f"parameter {p.name!r} is not 64-bit")
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise GradCheckError("non-finite function value at the base point")
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= coords_per_tensor else rng.choice(n, coords_per_tensor, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f().data)
            flat[i] = orig - step
            fm = float(f().data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise GradCheckError(f"non-finite function value while perturbing {p.name!r}[{i}]")
            num = (fp - fm) / (2.0 * step)
            a = float(ga.reshape(-1)[i])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst
