"""Small reverse-mode autodiff engine over numpy arrays.

Every op builds a node holding its parents and a closure that pushes the
output gradient back to them. ``Tensor.backward`` walks the graph in reverse
topological order. Only the handful of ops the volume networks and the
sentence encoder need are provided; broadcasting is limited to what
``_unbroadcast`` can undo (leading axes and size-1 axes).
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DivergenceError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (pure inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """An n-d array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _prev: tuple = ()):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._prev = _prev
        self._backward: Callable[[Tensor], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor; a scalar output seeds with 1."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(grad)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node)

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return mul(self, power(_lift(other, self), -1.0))

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result; attach the backward closure only when needed."""
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _prev=tuple(parents) if needs else ())
    if needs:
        # takes the node as an argument: a closure over ``out`` would form a cycle
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _lift(b, a)

    def bw(out):
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(out.grad, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(out):
        a._accum(-out.grad)

    return _make(-a.data, (a,), bw)


def mul(a: Tensor, b) -> Tensor:
    b = _lift(b, a)

    def bw(out):
        if a.requires_grad:
            a._accum(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(out.grad * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def power(a: Tensor, exponent: float) -> Tensor:
    def bw(out):
        a._accum(out.grad * exponent * a.data ** (exponent - 1))

    return _make(a.data ** exponent, (a,), bw)


def exp(a: Tensor) -> Tensor:
    val = np.exp(a.data)

    def bw(out):
        a._accum(out.grad * val)

    return _make(val, (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(out):
        a._accum(out.grad / a.data)

    return _make(np.log(a.data), (a,), bw)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the value was inside."""
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(out):
        a._accum(out.grad * inside)

    return _make(np.clip(a.data, lo, hi), (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(out):
        a._accum(out.grad * mask)

    return _make(a.data * mask, (a,), bw)


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    pos = a.data > 0
    neg_part = alpha * np.expm1(np.minimum(a.data, 0))
    val = np.where(pos, a.data, neg_part)

    def bw(out):
        a._accum(out.grad * np.where(pos, 1.0, neg_part + alpha).astype(a.dtype))

    return _make(val.astype(a.dtype), (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    val = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)

    def bw(out):
        a._accum(out.grad * val * (1.0 - val))

    return _make(val, (a,), bw)


def identity(a: Tensor) -> Tensor:
    return a


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "elu": elu,
    "sigmoid": sigmoid,
    "identity": identity,
}


# reductions and shape ops ------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(out):
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(g, a.shape))

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bw(out):
        a._accum(out.grad.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    def bw(out):
        a._accum(np.swapaxes(out.grad, -1, -2))

    return _make(np.swapaxes(a.data, -1, -2), (a,), bw)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(out):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                idx = [slice(None)] * out.grad.ndim
                idx[axis] = slice(lo, hi)
                p._accum(out.grad[tuple(idx)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def take_along_rows(a: Tensor, cols: np.ndarray) -> Tensor:
    """Pick ``a[i, cols[i]]`` for each row; gradient lands only there."""
    rows = np.arange(a.shape[0])
    cols = np.asarray(cols, dtype=np.int64)

    def bw(out):
        g = np.zeros_like(a.data)
        g[rows, cols] = out.grad
        a._accum(g)

    return _make(a.data[rows, cols], (a,), bw)


def take_rows(a: Tensor, idx) -> Tensor:
    """``a[idx]`` along the first axis; repeated indices accumulate gradient."""
    idx = np.asarray(idx, dtype=np.int64)

    def bw(out):
        g = np.zeros_like(a.data)
        np.add.at(g, idx, out.grad)
        a._accum(g)

    return _make(a.data[idx], (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def bw(out):
        g = out.grad
        if a.requires_grad:
            a._accum(g @ np.swapaxes(b.data, -1, -2) if b.data.ndim > 1 else np.outer(g, b.data))
        if b.requires_grad:
            if a.data.ndim == 1:
                b._accum(np.outer(a.data, g))
            else:
                b._accum(np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), bw)


# layers --------------------------------------------------------------------

def dense(x: Tensor, weight: Tensor, bias: Tensor, activation: str = "identity") -> Tensor:
    """``act(W x + b)`` for ``x`` of shape (n,) or (batch, n); ``W`` is (m, n)."""
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    m, n = weight.shape
    if x.shape[-1] != n or bias.shape != (m,):
        raise ValueError(
            f"dense: input {x.shape} / weight {weight.shape} / bias {bias.shape} disagree")
    pre = matmul(x, transpose(weight)) + bias
    return ACTIVATIONS[activation](pre)


@dataclass(frozen=True)
class Conv3dSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int] = (5, 5, 5)
    stride: tuple[int, int, int] = (2, 2, 2)
    padding: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError(f"illegal conv geometry {self}")

    def output_dims(self, dims: Sequence[int]) -> tuple[int, int, int]:
        out = tuple((n + 2 * p - k) // s + 1
                    for n, k, s, p in zip(dims, self.kernel, self.stride, self.padding))
        if any(n + 2 * p < k for n, k, p in zip(dims, self.kernel, self.padding)) or min(out) < 1:
            raise ValueError(f"conv {self.kernel}/{self.stride}/{self.padding} collapses {tuple(dims)}")
        return out

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels, *self.kernel)


def conv3d(x: Tensor, spec: Conv3dSpec, weight: Tensor, bias: Tensor) -> Tensor:
    """Zero-padded 3D cross-correlation.

    ``x`` is (C, X, Y, Z) or (N, C, X, Y, Z); output keeps the same rank.
    """
    if weight.shape != spec.weight_shape or bias.shape != (spec.out_channels,):
        raise ValueError(f"conv3d weights {weight.shape}/{bias.shape} do not match {spec}")
    if x.data.ndim == 4:
        out = conv3d(reshape(x, (1, *x.shape)), spec, weight, bias)
        return reshape(out, out.shape[1:])
    if x.data.ndim != 5 or x.shape[1] != spec.in_channels:
        raise ValueError(f"conv3d input {x.shape} incompatible with {spec}")
    out_dims = spec.output_dims(x.shape[2:])
    px, py, pz = spec.padding
    sx, sy, sz = spec.stride
    kx, ky, kz = spec.kernel
    ox, oy, oz = out_dims
    n, c = x.shape[:2]
    n_pos, n_k = ox * oy * oz, c * kx * ky * kz
    xp = np.pad(x.data, ((0, 0), (0, 0), (px, px), (py, py), (pz, pz)))
    win = sliding_window_view(xp, spec.kernel, axis=(2, 3, 4))
    win = win[:, :, :sx * ox:sx, :sy * oy:sy, :sz * oz:sz]
    # im2col: rows are (sample, output voxel), columns are (channel, kernel offset)
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * n_pos, n_k)
    wmat = weight.data.reshape(spec.out_channels, n_k)
    out = (cols @ wmat.T).reshape(n, ox, oy, oz, spec.out_channels)
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3)) + bias.data[:, None, None, None]

    def bw(outt):
        g = outt.grad
        if bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3, 4)))
        g2 = g.transpose(0, 2, 3, 4, 1).reshape(n * n_pos, spec.out_channels)
        if weight.requires_grad:
            weight._accum((g2.T @ cols).reshape(weight.shape))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ox, oy, oz, c, kx, ky, kz)
            dcols = np.ascontiguousarray(dcols.transpose(5, 6, 7, 0, 4, 1, 2, 3))
            gxp = np.zeros_like(xp)
            for i in range(kx):
                for j in range(ky):
                    for k in range(kz):
                        gxp[:, :, i:i + sx * ox:sx, j:j + sy * oy:sy, k:k + sz * oz:sz] += dcols[i, j, k]
            x._accum(gxp[:, :, px:px + x.shape[2], py:py + x.shape[3], pz:pz + x.shape[4]])

    return _make(out.astype(x.dtype, copy=False), (x, weight, bias), bw)


def flatten(x: Tensor) -> Tensor:
    """Flatten all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], -1))


# losses --------------------------------------------------------------------

def masked_mse_loss(q: Tensor, actions, targets) -> Tensor:
    """Mean over the batch of ``(q[i, a_i] - target_i)^2``.

    Accepts a single row of Q-values (shape (2,)) with a scalar action and
    target, or a batch (shape (B, 2)). Non-selected outputs get zero gradient.
    """
    actions = np.atleast_1d(np.asarray(actions, dtype=np.int64))
    targets = np.atleast_1d(np.asarray(targets, dtype=q.dtype))
    if q.data.ndim == 1:
        q = reshape(q, (1, -1))
    if np.any((actions < 0) | (actions >= q.shape[1])):
        raise IndexError(f"action out of range for {q.shape[1]} outputs")
    picked = take_along_rows(q, actions)
    diff = picked - Tensor(targets)
    return tmean(diff * diff)


BCE_CLAMP = 1e-7


def bce_loss(p: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy with ``p`` clamped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(labels, dtype=p.dtype).reshape(p.shape)
    pc = clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    one = Tensor(np.ones_like(y))
    yt = Tensor(y)
    terms = yt * log(pc) + (one - yt) * log(one - pc)
    return -tmean(terms)


# init and optimisation -------------------------------------------------------

def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def glorot_init(fan_in: int, fan_out: int, rng_seed=0, shape: Sequence[int] | None = None,
                dtype=np.float32, name: str | None = None) -> Tensor:
    """Uniform Glorot init on ±sqrt(6/(fan_in+fan_out)).

    ``rng_seed`` may be an int or a ``numpy.random.Generator``. ``shape``
    defaults to (fan_out, fan_in).
    """
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"glorot_init needs positive fans, got {fan_in}, {fan_out}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    limit = glorot_bound(fan_in, fan_out)
    shape = (fan_out, fan_in) if shape is None else tuple(shape)
    vals = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return Tensor(vals, requires_grad=True, name=name)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState,
              grads: dict[str, np.ndarray] | None = None) -> AdamState:
    """Bias-corrected Adam update in place.

    Gradients default to each tensor's ``.grad``; a missing gradient counts
    as zero. Raises ``DivergenceError`` naming the first parameter whose
    gradient is not finite, before touching anything.
    """
    resolved = {}
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name}", layer=name)
        resolved[name] = g
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = resolved[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        denom = np.sqrt(v)
        denom *= 1.0 / np.sqrt(bc2)
        denom += state.eps_hat
        upd = np.divide(m, denom)
        upd *= state.lr / bc1
        p.data -= upd.astype(p.dtype, copy=False)
    return state


# gradient checking -----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(fn: Callable[[], Tensor], tensors: dict[str, Tensor],
               tolerance: float = 1e-4, h: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of scalar ``fn()`` with central differences.

    ``tensors`` maps names to the leaves to check (inputs and/or parameters);
    they should hold float64 data. The error for each tensor is
    ``|g_a - g_n| / max(|g_a| + |g_n|, 1e-12)`` using L2 norms over the whole
    tensor, which stays meaningful when individual entries are near zero.
    """
    for t in tensors.values():
        t.requires_grad = True
        t.zero_grad()
    fn().backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for k, t in tensors.items()}
    errs = {}
    with no_grad():
        for k, t in tensors.items():
            num = np.zeros_like(t.data)
            flat, nflat = t.data.reshape(-1), num.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = fn().item()
                flat[i] = orig - h
                fm = fn().item()
                flat[i] = orig
                nflat[i] = (fp - fm) / (2 * h)
            diff = np.linalg.norm(analytic[k] - num)
            scale = max(np.linalg.norm(analytic[k]) + np.linalg.norm(num), 1e-12)
            errs[k] = float(diff / scale)
    return GradCheckReport(max(errs.values()) if errs else 0.0, errs, tolerance)


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
