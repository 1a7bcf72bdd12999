"""A small reverse-mode autodiff engine over dense float64 numpy arrays.

Operations record themselves on the innermost active :class:`Tape` when at
least one input requires a gradient. Without an active tape every primitive
is a plain numpy forward computation.

    with Tape() as tape:
        x = Tensor(data, requires_grad=True)
        loss = sum_(relu(x) * 2.0)
    grads = tape.backward(loss)
    grads[x]
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # identity semantics: tensors are graph nodes
    __hash__ = object.__hash__

    def __eq__(self, other):
        return self is other

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / float(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications; backward replays it in reverse."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> "Gradients":
        if seed is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss or a seed, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        adj: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=np.float64)}
        keep: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = adj.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                k = id(inp)
                if k in adj:
                    adj[k] = adj[k] + gi
                else:
                    adj[k] = gi
                    keep[k] = inp
        return Gradients({k: (keep[k], v) for k, v in adj.items()})


class Gradients:
    """Adjoints of the tensors that were not produced on the tape (leaves)."""

    def __init__(self, table: dict[int, tuple[Tensor, np.ndarray]]):
        self._table = table

    def __getitem__(self, t: Tensor) -> np.ndarray:
        hit = self._table.get(id(t))
        if hit is None or hit[0] is not t:
            return np.zeros_like(t.data)
        return hit[1]

    def __contains__(self, t: Tensor) -> bool:
        hit = self._table.get(id(t))
        return hit is not None and hit[0] is t


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward, op: str) -> Tensor:
    rg = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=rg)
    if rg and _TAPES:
        _TAPES[-1].nodes.append(_Node(out, tuple(inputs), backward, op))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def scale(x, c: float) -> Tensor:
    x = _tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x) -> Tensor:
    x = _tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def log(x) -> Tensor:
    x = _tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def exp(x) -> Tensor:
    x = _tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def abs_(x) -> Tensor:
    """Absolute value; the subgradient at 0 is 0."""
    x = _tensor(x)
    s = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


def clamp(x, lo: float, hi: float) -> Tensor:
    x = _tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def sigmoid(x) -> Tensor:
    x = _tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def softmax(x, axis: int = -1) -> Tensor:
    x = _tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    sm = np.exp(y)
    return _make(y, (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),), "log_softmax")


# reductions and shape ----------------------------------------------------------


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _tensor(x)
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(y, (x,), back, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis, keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = _tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def getitem(x, idx) -> Tensor:
    x = _tensor(x)

    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), back, "getitem")


def matmul(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T if a.requires_grad else None,
                            a.data.T @ g if b.requires_grad else None), "matmul")


def weighted_sum(xs: Sequence[Tensor], w) -> Tensor:
    """Sum_k w[k] * xs[k] for a 1-D weight tensor and same-shape inputs."""
    xs = [_tensor(x) for x in xs]
    w = _tensor(w)
    if w.shape != (len(xs),):
        raise ShapeError(f"weighted_sum: weights {w.shape} for {len(xs)} inputs")
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ShapeError(f"weighted_sum: mixed shapes {shape} and {x.shape}")
    y = np.zeros(shape)
    for k, x in enumerate(xs):
        y += w.data[k] * x.data

    def back(g):
        gw = np.array([np.vdot(g, x.data) for x in xs]) if w.requires_grad else None
        return [g * w.data[k] if x.requires_grad else None for k, x in enumerate(xs)] + [gw]

    return _make(y, (*xs, w), back, "weighted_sum")


def add_n(xs: Sequence[Tensor]) -> Tensor:
    xs = [_tensor(x) for x in xs]
    shape = xs[0].shape
    for x in xs[1:]:
        if x.shape != shape:
            raise ShapeError(f"add_n: mixed shapes {shape} and {x.shape}")
    y = xs[0].data.copy()
    for x in xs[1:]:
        y += x.data
    return _make(y, xs, lambda g: [g] * len(xs), "add_n")


# image ops ---------------------------------------------------------------------


def _conv_data(x: np.ndarray, w: np.ndarray, dilation: int):
    """Same-padded stride-1 convolution as a single GEMM.

    The padded input is flattened per channel, so kernel tap (ky, kx) is the
    constant offset ``ky*dil*Wp + kx*dil`` into it and the column matrix is
    built from contiguous slices. One extra bottom row of padding keeps every
    slice in bounds; the ``Wp - W`` wrap-around columns are dropped at the end.
    Returns the output and the flattened padded input for the kernel gradient.
    """
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    if kh == 1 and kw == 1:
        out = np.matmul(w[:, :, 0, 0], x.reshape(B, C, H * W))
        return out.reshape(B, O, H, W), None
    ph, pw = dilation * (kh - 1) // 2, dilation * (kw - 1) // 2
    Wp = W + 2 * pw
    xp = np.zeros((C, B, H + 2 * ph + 1, Wp))
    xp[:, :, ph:ph + H, pw:pw + W] = x.transpose(1, 0, 2, 3)
    xf = xp.reshape(C, B, -1)
    cols = _columns(xf, kh, kw, dilation, Wp, H * Wp)
    wk = w.transpose(0, 2, 3, 1).reshape(O, -1)
    out = (wk @ cols).reshape(O, B, H, Wp)[..., :W].transpose(1, 0, 2, 3)
    return out, (xf, Wp)


def _columns(xf: np.ndarray, kh: int, kw: int, dilation: int, Wp: int, n: int) -> np.ndarray:
    C, B, _ = xf.shape
    cols = np.empty((kh * kw, C, B, n))
    for k in range(kh * kw):
        s = (k // kw) * dilation * Wp + (k % kw) * dilation
        cols[k] = xf[:, :, s:s + n]
    return cols.reshape(kh * kw * C, B * n)


def _conv_kernel_grad(g: np.ndarray, cache, kshape, dilation: int) -> np.ndarray:
    O, C, kh, kw = kshape
    xf, Wp = cache
    B, _, H, W = g.shape
    gp = np.zeros((O, B, H, Wp))
    gp[..., :W] = g.transpose(1, 0, 2, 3)
    cols = _columns(xf, kh, kw, dilation, Wp, H * Wp)
    gw = gp.reshape(O, -1) @ cols.T
    return gw.reshape(O, kh, kw, C).transpose(0, 3, 1, 2)


def conv2d(x, w, b=None, dilation: int = 1) -> Tensor:
    """Stride-1 'same' convolution of [B,C,H,W] by [O,C,kh,kw] (odd kernel sizes)."""
    x, w = _tensor(x), _tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
        raise ShapeError(f"conv2d: kernel {w.shape} must have odd spatial size")
    y, cache = _conv_data(x.data, w.data, dilation)
    inputs = [x, w]
    if b is not None:
        b = _tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias {b.shape} for {w.shape[0]} output channels")
        y = y + b.data[None, :, None, None]
        inputs.append(b)

    def back(g):
        gx = gw = None
        if x.requires_grad:
            wt = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx = _conv_data(g, np.ascontiguousarray(wt), dilation)[0]
        if w.requires_grad:
            if cache is None:
                B, O = g.shape[:2]
                gw = np.matmul(g.reshape(B, O, -1), x.data.reshape(B, x.shape[1], -1).transpose(0, 2, 1))
                gw = gw.sum(axis=0)[:, :, None, None]
            else:
                gw = _conv_kernel_grad(g, cache, w.shape, dilation)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(y, inputs, back, "conv2d")


def instance_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = _tensor(x), _tensor(gamma), _tensor(beta)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"instance_norm: affine {gamma.shape}/{beta.shape} for input {x.shape}")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gm = gamma.data[None, :, None, None]
    y = xhat * gm + beta.data[None, :, None, None]

    def back(g):
        dxhat = g * gm
        gx = inv * (dxhat - dxhat.mean(axis=(2, 3), keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=(2, 3), keepdims=True))
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _make(y, (x, gamma, beta), back, "instance_norm")


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of [B,C,H,W]."""
    x = _tensor(x)
    y = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def back(g):
        B, C, H, W = g.shape
        return (g.reshape(B, C, H // 2, 2, W // 2, 2).sum(axis=(3, 5)),)

    return _make(y, (x,), back, "upsample2x")


def downsample2x(x) -> Tensor:
    """2x2 average pooling of [B,C,H,W]."""
    x = _tensor(x)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"downsample2x: odd spatial size {x.shape}")
    y = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))
    return _make(y, (x,),
                 lambda g: (0.25 * g.repeat(2, axis=2).repeat(2, axis=3),), "downsample2x")


# gradient checking ------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    worst: tuple[int, tuple[int, ...]] | None
    passed: bool


def numeric_grad(f: Callable[..., float], inputs: Sequence[np.ndarray], h: float = 1e-5):
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    grads = []
    for x in inputs:
        g = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            old = x[idx]
            x[idx] = old + h
            fp = float(f(*inputs))
            x[idx] = old - h
            fm = float(f(*inputs))
            x[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, 1e-6 * max|n|, 1e-10)."""
    floor = max(1e-6 * float(np.max(np.abs(numeric), initial=0.0)), 1e-10)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5,
               tol: float = 1e-5, analytic: Sequence[np.ndarray] | None = None) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` against central differences.

    ``analytic`` overrides the tape gradients (used to check hand-written adjoints).
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    if analytic is None:
        with Tape() as tape:
            ts = [Tensor(x.copy(), requires_grad=True) for x in inputs]
            out = f(*ts)
        grads = tape.backward(out)
        analytic = [grads[t] for t in ts]
    numeric = numeric_grad(lambda *xs: float(f(*[Tensor(x) for x in xs])), inputs, h)
    worst, max_rel, max_abs = None, 0.0, 0.0
    for k, (a, n) in enumerate(zip(analytic, numeric)):
        if a.size == 0:
            continue
        rel = relative_error(np.asarray(a), n)
        i = np.unravel_index(int(np.argmax(rel)), rel.shape)
        if rel[i] >= max_rel:
            max_rel, worst = float(rel[i]), (k, tuple(int(v) for v in i))
        max_abs = max(max_abs, float(np.max(np.abs(a - n))))
    return GradCheckReport(max_rel, max_abs, worst, max_rel < tol)
