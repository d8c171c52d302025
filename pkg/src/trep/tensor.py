"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Every value the model touches is a :class:`Tensor`: a numpy array plus an
optional gradient buffer and a record of the operation that produced it.
Calling :func:`backward` on a scalar walks the recorded graph once and
accumulates d(loss)/dx into every tensor that requires gradients.

The scope is deliberately small: first-order gradients only, a single
thread per run, and no broadcasting beyond exact shapes and scalars
(a few structural ops like ``broadcast_to`` cover the rest explicitly).
All math is 64-bit so finite-difference checks can be tight.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import erf

from .errors import ConfigError, NumericError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_EXP_MAX_ARG = 709.0  # exp overflows float64 just above this

_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (fast eval passes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A float64 array with optional gradient accumulation.

    ``grad`` stays ``None`` until :func:`backward` deposits something into
    it; repeated backward calls without :func:`zero_grad` accumulate.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bw")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._bw: Callable | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same values with no tape history."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Small amount of operator sugar; the module-level functions are the API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: Sequence[Tensor], bw: Callable) -> Tensor:
    """Build an output tensor, recording the op if gradients are live."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._bw = bw
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/dx into ``grad`` of every requires-grad tensor.

    ``loss`` must be scalar. The traversal is a deterministic iterative
    topological sort, so identical graphs produce bitwise-identical grads.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ShapeError("backward called on a tensor with no recorded tape")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._bw is None:
            continue
        for parent, pg in zip(node._parents, node._bw(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in adjoint:
                adjoint[pid] = adjoint[pid] + pg
            else:
                adjoint[pid] = np.asarray(pg, dtype=np.float64)


def zero_grad(params) -> None:
    """Clear gradient buffers on a dict or iterable of tensors."""
    values = params.values() if isinstance(params, Mapping) else params
    for p in values:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise arithmetic (exact shape or scalar operands only)


def _binary_shapes(a: Tensor, b: Tensor, opname: str):
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} are neither equal nor scalar")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum an adjoint down to a (possibly scalar) operand shape."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if np.prod(shape, dtype=int) == 1 else g


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "add")
    return _node(a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "sub")
    return _node(a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _binary_shapes(a, b, "mul")
    return _node(a.data * b.data, (a, b),
                 lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)))


def scalar_mul(a, c: float) -> Tensor:
    a = _coerce(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def reciprocal(a) -> Tensor:
    a = _coerce(a)
    if np.any(a.data == 0.0):
        raise NumericError("reciprocal of zero")
    out = 1.0 / a.data
    return _node(out, (a,), lambda g: (-g * out * out,))


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a) -> Tensor:
    a = _coerce(a)
    return _node(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0.0),))


def gelu(a) -> Tensor:
    """Exact Gaussian-CDF GeLU: x * Phi(x)."""
    a = _coerce(a)
    phi_cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = a.data * phi_cdf

    def bw(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
        return (g * (phi_cdf + a.data * pdf),)

    return _node(out, (a,), bw)


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a) -> Tensor:
    a = _coerce(a)
    if np.any(a.data > _EXP_MAX_ARG):
        idx = int(np.argmax(a.data))
        raise NumericError(f"exp overflow: argument {a.data.flat[idx]:.3g} at flat index {idx}")
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _coerce(a)
    if np.any(a.data <= 0.0):
        idx = int(np.argmin(a.data))
        raise NumericError(f"log domain violation: value {a.data.flat[idx]:.3g} at flat index {idx}")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sin(a) -> Tensor:
    a = _coerce(a)
    return _node(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def clamp_min(a, floor: float) -> Tensor:
    a = _coerce(a)
    floor = float(floor)
    return _node(np.maximum(a.data, floor), (a,), lambda g: (g * (a.data >= floor),))


def clip(a, lo: float, hi: float) -> Tensor:
    a = _coerce(a)
    lo, hi = float(lo), float(hi)
    out = np.clip(a.data, lo, hi)
    return _node(out, (a,), lambda g: (g * ((a.data >= lo) & (a.data <= hi)),))


_ELEMENTWISE = {}


def elementwise(op_kind: str, *args) -> Tensor:
    """Dispatch an elementwise op by name (gelu, relu, sigmoid, exp, log,
    add, sub, mul, scalar_mul)."""
    try:
        fn = _ELEMENTWISE[op_kind]
    except KeyError:
        raise ConfigError(f"unknown elementwise op {op_kind!r}") from None
    return fn(*args)


_ELEMENTWISE.update(
    gelu=gelu, relu=relu, sigmoid=sigmoid, exp=exp, log=log,
    add=add, sub=sub, mul=mul, scalar_mul=scalar_mul,
)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """2-D matrix product, or a batched 3-D product with equal batch dims."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (ga, gb)

    return _node(a.data @ b.data, (a, b), bw)


def linear(x, w, b=None) -> Tensor:
    """Affine map rows(x) @ w + b with x of shape (N, in) and w (in, out)."""
    x, w = _coerce(x), _coerce(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    out = x.data @ w.data
    if b is None:
        def bw(g):
            return (g @ w.data.T if x.requires_grad else None,
                    x.data.T @ g if w.requires_grad else None)

        return _node(out, (x, w), bw)
    b = _coerce(b)
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match output width {w.shape[1]}")

    def bw(g):
        return (g @ w.data.T if x.requires_grad else None,
                x.data.T @ g if w.requires_grad else None,
                g.sum(axis=0))

    return _node(out + b.data, (x, w, b), bw)


def conv1d(x, w, b=None, dilation: int = 1, padding: int = 0) -> Tensor:
    """Dilated 1-D cross-correlation.

    ``x`` is (B, Cin, L), ``w`` is (Cout, Cin, k); output is (B, Cout, L')
    with L' = L + 2*padding - dilation*(k-1). Zero padding on both sides.
    """
    x, w = _coerce(x), _coerce(w)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d expects 3-D operands, got {x.shape} and {w.shape}")
    if int(dilation) < 1 or int(w.shape[2]) < 1:
        raise ConfigError("conv1d: kernel size and dilation must be >= 1")
    if padding < 0:
        raise ConfigError("conv1d: padding must be >= 0")
    B, cin, L = x.shape
    cout, cin_w, k = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv1d: input has {cin} channels but weight expects {cin_w}")
    dilation = int(dilation)
    span = dilation * (k - 1) + 1
    lout = L + 2 * padding - span + 1
    if lout < 1:
        raise ShapeError(f"conv1d: output length {lout} < 1 for L={L}, k={k}, dilation={dilation}")

    if padding:
        xp = np.zeros((B, cin, L + 2 * padding))
        xp[:, :, padding:padding + L] = x.data
    else:
        xp = x.data
    s0, s1, s2 = xp.strides
    windows = as_strided(xp, shape=(B, cin, lout, k), strides=(s0, s1, s2, s2 * dilation))
    out = np.einsum("bclk,ock->bol", windows, w.data, optimize=True)

    if b is not None:
        b = _coerce(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv1d: bias shape {b.shape} does not match {cout} channels")
        out = out + b.data[None, :, None]

    def bw(g):
        gw = np.einsum("bol,bclk->ock", g, windows, optimize=True) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for kk in range(k):
                lo = kk * dilation
                gxp[:, :, lo:lo + lout] += np.einsum("bol,oc->bcl", g, w.data[:, :, kk], optimize=True)
            gx = gxp[:, :, padding:padding + L] if padding else gxp
        if b is None:
            return (gx, gw)
        return (gx, gw, g.sum(axis=(0, 2)))

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, bw)


def maxpool1d(x, k: int) -> Tensor:
    """Max pooling over the last axis with kernel = stride = k.

    The final partial window is allowed, so the output length is ceil(L/k).
    The backward pass routes the gradient to the argmax element, first
    index on ties.
    """
    x = _coerce(x)
    if int(k) < 1:
        raise ConfigError(f"maxpool1d: kernel {k} < 1")
    k = int(k)
    if x.ndim != 3:
        raise ShapeError(f"maxpool1d expects (B, F, L), got {x.shape}")
    B, F, L = x.shape
    n = -(-L // k)
    pad = n * k - L
    if pad:
        xp = np.concatenate([x.data, np.full((B, F, pad), -np.inf)], axis=2)
    else:
        xp = x.data
    r = xp.reshape(B, F, n, k)
    arg = r.argmax(axis=3)
    out = np.take_along_axis(r, arg[..., None], axis=3)[..., 0]

    def bw(g):
        buf = np.zeros((B, F, n, k))
        np.put_along_axis(buf, arg[..., None], g[..., None], axis=3)
        return (buf.reshape(B, F, n * k)[:, :, :L],)

    return _node(out, (x,), bw)


def avgpool1d(x, k: int) -> Tensor:
    """Average pooling over the last axis, kernel = stride = k.

    A final partial window is averaged over its actual element count, so
    convex combinations (e.g. simplex rows) stay convex.
    """
    x = _coerce(x)
    if int(k) < 1:
        raise ConfigError(f"avgpool1d: kernel {k} < 1")
    k = int(k)
    if x.ndim != 3:
        raise ShapeError(f"avgpool1d expects (B, F, L), got {x.shape}")
    B, F, L = x.shape
    n = -(-L // k)
    pad = n * k - L
    xp = np.concatenate([x.data, np.zeros((B, F, pad))], axis=2) if pad else x.data
    counts = np.full(n, float(k))
    if pad:
        counts[-1] = L - (n - 1) * k
    out = xp.reshape(B, F, n, k).sum(axis=3) / counts

    def bw(g):
        gg = g / counts
        return (np.repeat(gg, k, axis=2).reshape(B, F, n * k)[:, :, :L],)

    return _node(out, (x,), bw)


# ---------------------------------------------------------------------------
# reductions and structure


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            return (np.full(x.shape, g.reshape(())),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, x.shape),)

    return _node(np.asarray(out), (x,), bw)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _coerce(x)
    count = x.size if axis is None else x.shape[axis]
    if count == 0:
        raise ShapeError("mean over an empty axis")
    return scalar_mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = _coerce(x)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = _coerce(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(parts, axis: int) -> Tensor:
    parts = [_coerce(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for i in range(len(parts)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(sl)])
        return tuple(outs)

    return _node(np.concatenate([p.data for p in parts], axis=axis), parts, bw)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    x = _coerce(x)
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(f"narrow: [{start}, {start + length}) out of bounds for axis {axis} of {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bw(g):
        buf = np.zeros(x.shape)
        buf[sl] = g
        return (buf,)

    return _node(x.data[sl], (x,), bw)


def broadcast_to(x, shape) -> Tensor:
    x = _coerce(x)
    shape = tuple(shape)
    out = np.broadcast_to(x.data, shape)

    def bw(g):
        extra = g.ndim - x.ndim
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, (got, want) in enumerate(zip(g.shape, x.shape)) if want == 1 and got != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g.reshape(x.shape),)

    return _node(np.array(out), (x,), bw)


def gather_bt(x, batch_idx, time_idx) -> Tensor:
    """Select rows (batch_idx[m], time_idx[m], :) from a (B, L, F) tensor."""
    x = _coerce(x)
    if x.ndim != 3:
        raise ShapeError(f"gather_bt expects (B, L, F), got {x.shape}")
    bi = np.asarray(batch_idx, dtype=np.intp)
    ti = np.asarray(time_idx, dtype=np.intp)

    def bw(g):
        buf = np.zeros(x.shape)
        np.add.at(buf, (bi, ti), g)
        return (buf,)

    return _node(x.data[bi, ti], (x,), bw)


def gather_rows(x, idx) -> Tensor:
    """Select rows idx[m] from a (L, K) tensor, duplicates allowed."""
    x = _coerce(x)
    if x.ndim != 2:
        raise ShapeError(f"gather_rows expects (L, K), got {x.shape}")
    rows = np.asarray(idx, dtype=np.intp)

    def bw(g):
        buf = np.zeros(x.shape)
        np.add.at(buf, rows, g)
        return (buf,)

    return _node(x.data[rows], (x,), bw)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """Per-parameter Adam moments plus hyperparameters."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"Adam lr must be >= 0, got {self.lr}")
        if self.step_count < 0:
            raise ConfigError("Adam step_count must be >= 0")


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update over a name -> Tensor mapping.

    Parameters whose ``grad`` is ``None`` are skipped. Iteration is by
    sorted name so the update order is deterministic.
    """
    state.step_count += 1
    t = state.step_count
    b1c = 1.0 - state.beta1 ** t
    b2c = 1.0 - state.beta2 ** t
    for name in sorted(params):
        p = params[name]
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r} at step {t}")
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        else:
            v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - state.lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)
