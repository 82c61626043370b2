"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation accepts arbitrary leading (batch) dimensions, so the same
code path serves a single C x H x W feature map and a B x C x H x W batch.
Gradients are only recorded while a :class:`Tape` is active::

    with Tape() as tape:
        loss = cross_entropy(model(x), labels)
    grads = backward(tape, loss)
    grads[weight]  # ndarray with weight.shape
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

__all__ = [
    "DimensionError",
    "Tensor",
    "Tape",
    "Gradients",
    "Rng",
    "tensor",
    "zeros",
    "ones",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "conv1x1",
    "conv2d",
    "softmax_rows",
    "activation",
    "relu",
    "sigmoid",
    "gelu",
    "layer_norm",
    "reshape",
    "swapaxes",
    "sum_all",
    "mean",
    "max_axis",
    "concat",
    "cross_entropy",
    "backward",
    "check_gradients",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """An n-d float64 array plus autodiff bookkeeping.

    Tensors are treated as immutable values: operations always return new
    tensors, and nothing in the library writes into ``data`` after
    construction.
    """

    __slots__ = ("data", "requires_grad", "node_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return sum_all(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Ordered record of differentiable operations for one forward pass.

    Nodes are appended as operations execute, so the list is topologically
    sorted by construction. A tape is thread-local while active.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, op, inputs, output, backward_fn) -> None:
        output.node_id = len(self.nodes)
        self.nodes.append(_Node(op, tuple(inputs), output, backward_fn))

    def __len__(self) -> int:
        return len(self.nodes)


def _result(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    if requires:
        tape = _active_tape()
        if tape is not None:
            tape.record(op, inputs, out, backward_fn)
    return out


class Gradients(dict):
    """Maps tensors to gradient arrays; unreachable tensors read as zeros."""

    def __missing__(self, key: Tensor) -> np.ndarray:
        return np.zeros(key.shape)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse-mode sweep from a scalar ``loss`` recorded on ``tape``.

    Returns gradients for every leaf tensor (one not produced by a taped
    operation) that requires grad and is reachable from ``loss``. The tape
    is cleared afterwards.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    nid = loss.node_id
    if nid is None or nid >= len(tape.nodes) or tape.nodes[nid].output is not loss:
        raise ValueError("loss was not produced on this tape")

    acc: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    leaves = Gradients()
    for node in reversed(tape.nodes[: nid + 1]):
        g = acc.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = _unbroadcast(gi, inp.shape)
            if inp.node_id is None or tape.nodes[inp.node_id].output is not inp:
                leaves[inp] = leaves[inp] + gi if inp in leaves else gi
            else:
                key = id(inp)
                acc[key] = acc[key] + gi if key in acc else gi
    tape.nodes.clear()
    return leaves


# ---------------------------------------------------------------------------
# Elementwise and linear algebra
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    return _result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return _result(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, "scale", (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def _back(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _result(ad @ bd, "matmul", (a, b), _back)


def conv1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-pixel linear map ``out[o,h,w] = sum_c w[o,c] x[c,h,w] + b[o]``."""
    if x.ndim < 3 or w.ndim != 2 or x.shape[-3] != w.shape[1]:
        raise DimensionError(f"conv1x1: input {x.shape} does not match weight {w.shape}")
    if b.shape != (w.shape[0],):
        raise DimensionError(f"conv1x1: bias {b.shape} does not match weight {w.shape}")
    *lead, ci, h, wid = x.shape
    co = w.shape[0]
    xb = x.data.reshape(-1, ci, h * wid)
    wd = w.data
    out = (wd @ xb + b.data[:, None]).reshape(tuple(lead) + (co, h, wid))

    def _back(g):
        g2 = g.reshape(-1, co, h * wid)
        gx = (wd.T @ g2).reshape(x.shape)
        gw = np.einsum("bop,bcp->oc", g2, xb)
        return gx, gw, g2.sum(axis=(0, 2))

    return _result(out, "conv1x1", (x, w, b), _back)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution (cross-correlation) with zero padding.

    ``x`` is ``(..., C_in, H, W)``, ``w`` is ``(C_out, C_in, kh, kw)``.
    """
    if x.ndim < 3 or w.ndim != 4 or x.shape[-3] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} does not match weight {w.shape}")
    lead = x.shape[:-3]
    ci, h, wid = x.shape[-3:]
    co, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wid + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: input {x.shape} too small for kernel {w.shape}")

    xb = x.data.reshape((-1, ci, h, wid))
    nb = xb.shape[0]
    xp = np.pad(xb, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((nb, ci, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * (ho - 1) + 1 : stride,
                                  j : j + stride * (wo - 1) + 1 : stride]
    cols = cols.reshape(nb, ci * kh * kw, ho * wo)
    wmat = w.data.reshape(co, -1)
    out = (wmat @ cols + b.data[:, None]).reshape(lead + (co, ho, wo))

    def _back(g):
        g2 = g.reshape(nb, co, ho * wo)
        gw = np.einsum("bop,bkp->ok", g2, cols).reshape(w.shape)
        gb = g2.sum(axis=(0, 2))
        dcols = (wmat.T @ g2).reshape(nb, ci, kh, kw, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * (ho - 1) + 1 : stride,
                    j : j + stride * (wo - 1) + 1 : stride] += dcols[:, :, i, j]
        gx = dxp[:, :, padding : padding + h, padding : padding + wid]
        return gx.reshape(x.shape), gw, gb

    return _result(out, "conv2d", (x, w, b), _back)


# ---------------------------------------------------------------------------
# Nonlinearities and normalization
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


# expit rounds to exactly 0 or 1 for large |x|; clamp to the nearest
# representable values so outputs stay strictly inside (0, 1)
_SIGMOID_LO = np.finfo(np.float64).tiny
_SIGMOID_HI = 1.0 - 2.0 ** -53


def sigmoid(x: Tensor) -> Tensor:
    y = np.clip(expit(x.data), _SIGMOID_LO, _SIGMOID_HI)
    return _result(y, "sigmoid", (x,), lambda g: (g * y * (1.0 - y),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def _back(g):
        return (g * (cdf + xd * _INV_SQRT2PI * np.exp(-0.5 * xd * xd)),)

    return _result(xd * cdf, "gelu", (x,), _back)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "gelu": gelu}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilised by row-max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def _back(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, "softmax", (x,), _back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row (last axis) to zero mean, unit variance, then scale/shift."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    k = x.shape[-1]
    if gamma.shape != (k,) or beta.shape != (k,):
        raise DimensionError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs rows of {k}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    lead = tuple(range(xd.ndim - 1))

    def _back(g):
        dxhat = g * gd
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + beta.data, "layer_norm", (x, gamma, beta), _back)


# ---------------------------------------------------------------------------
# Shape manipulation and reductions
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _result(out, "reshape", (x,), lambda g: (g.reshape(old),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _result(np.swapaxes(x.data, a, b), "swapaxes", (x,),
                   lambda g: (np.swapaxes(g, a, b),))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), "sum", (x,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor, axis: int) -> Tensor:
    """Mean over one axis (axis removed)."""
    n = x.shape[axis]

    def _back(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _result(x.data.mean(axis=axis), "mean", (x,), _back)


def max_axis(x: Tensor, axis: int) -> Tensor:
    """Maximum over one axis, kept as a size-1 axis; ties route to the first index."""
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis)

    def _back(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, idx, g, axis=axis)
        return (gx,)

    return _result(out, "max", (x,), _back)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(out, "concat", tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over all leading positions."""
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)
    n = max(labels.size, 1)

    def _back(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, labels[..., None],
                          np.take_along_axis(grad, labels[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * (g / n),)

    return _result(np.asarray(-picked.sum() / n), "cross_entropy", (logits,), _back)


# ---------------------------------------------------------------------------
# Verification oracle
# ---------------------------------------------------------------------------


def check_gradients(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                    analytic: np.ndarray | None = None) -> float:
    """Max relative error between taped and central-difference gradients of ``f`` at ``x``.

    The error for each coordinate is ``|fd - an| / max(1, |an|)``. Pass
    ``analytic`` to compare a supplied gradient instead of the taped one.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError("check_gradients: h must lie in [1e-7, 1e-3]")
    base = x.data
    if analytic is None:
        probe = Tensor(base, requires_grad=True)
        with Tape() as tape:
            y = f(probe)
        analytic = backward(tape, y)[probe]
    analytic = np.asarray(analytic, dtype=np.float64).reshape(base.shape)

    flat = base.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        step = np.zeros(flat.size)
        step[i] = h
        hi = f(Tensor((flat + step).reshape(base.shape))).item()
        lo = f(Tensor((flat - step).reshape(base.shape))).item()
        numeric[i] = (hi - lo) / (2.0 * h)
    an = analytic.reshape(-1)
    if an.size == 0:
        return 0.0
    return float(np.max(np.abs(numeric - an) / np.maximum(1.0, np.abs(an))))


# ---------------------------------------------------------------------------
# Random numbers
# ---------------------------------------------------------------------------


class Rng:
    """Seeded Philox stream with deterministic named splitting.

    ``rng.split(k)`` derives an independent child stream from the root seed
    and the key path, without consuming anything from the parent. Draws
    from one stream are sequential, so identical seed plus identical call
    order gives identical values on every platform.
    """

    ALGORITHM = "philox4x64-10"

    def __init__(self, seed: int, path: Iterable[int] = ()):
        self.seed = int(seed) % (1 << 64)
        self.path = tuple(int(k) for k in path)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def split(self, *keys: int) -> "Rng":
        return Rng(self.seed, self.path + tuple(keys))

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def normal(self, size=None, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(size) * std

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"
