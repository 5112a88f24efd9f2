"""Reverse-mode automatic differentiation over numpy arrays.

A deliberately small op set, sized for a compact decoder-only language model
and a two-layer scale network: matrix products, broadcast arithmetic, a
handful of elementwise maps, last-axis softmax, RMS normalization, row
gathers, row-wise cross-entropy against index targets, reductions, and
concatenation.

Conventions:

- ``Tensor.data`` is a numpy array. Runtime code uses float32; numeric tests
  run the same graphs in float64.
- Only scalar outputs can be back-propagated. Gradients accumulate on leaves
  created with ``requires_grad=True``; intermediate gradients are freed as the
  tape walk passes them.
- The tape is walked in one fixed topological order, so gradient reductions
  happen in a deterministic order for a given graph.
- ``detach()`` returns a leaf sharing the same data with no history; nothing
  flows back through it.

``set_debug_checks(True)`` makes every op assert that its output is finite,
which turns silent overflow into a loud error during tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DiscrepancyReport",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "transpose",
    "exp",
    "log",
    "softplus",
    "clip",
    "softmax",
    "rms_norm",
    "gather_rows",
    "cross_entropy_rows",
    "tsum",
    "tmean",
    "concat",
    "gradcheck",
    "set_debug_checks",
]

_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Enable per-op finiteness assertions (slow; intended for tests)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    """A numpy array plus the tape bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple = ()

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _op(data: np.ndarray, parents: tuple, vjps: tuple, name: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        needs = False
        for p in parents:
            if p.requires_grad:
                needs = True
                break
        out.requires_grad = needs
        if needs:
            out._parents = parents
            out._vjps = vjps
        else:
            out._parents = ()
            out._vjps = ()
        if _DEBUG_CHECKS and data.dtype.kind == "f" and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite values produced by op '{name}'")
        return out

    # -- backprop ------------------------------------------------------------

    def backward(self) -> None:
        if self.data.ndim != 0:
            raise ValueError("backward() requires a scalar output")
        if not self.requires_grad:
            raise ValueError("backward() on a graph with no tracked leaves")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, int]] = [(self, 0)]
        while stack:
            node, i = stack.pop()
            if i == 0:
                if id(node) in seen:
                    continue
                seen.add(id(node))
            if i < len(node._parents):
                stack.append((node, i + 1))
                parent = node._parents[i]
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, 0))
            else:
                topo.append(node)

        self.grad = np.ones((), dtype=self.data.dtype)
        for node in reversed(topo):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in zip(node._parents, node._vjps):
                if not parent.requires_grad or vjp is None:
                    continue
                contrib = vjp(g)
                # accumulation allocates; never adds in place (vjps may return views)
                parent.grad = contrib if parent.grad is None else parent.grad + contrib
            if node._parents:
                node.grad = None

    # -- leaf utilities --------------------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- operator sugar --------------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ash, bsh = a.data.shape, b.data.shape
    return Tensor._op(
        a.data + b.data,
        (a, b),
        (lambda g: _unbroadcast(g, ash), lambda g: _unbroadcast(g, bsh)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ash, bsh = a.data.shape, b.data.shape
    return Tensor._op(
        a.data - b.data,
        (a, b),
        (lambda g: _unbroadcast(g, ash), lambda g: _unbroadcast(-g, bsh)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._op(
        ad * bd,
        (a, b),
        (lambda g: _unbroadcast(g * bd, ad.shape), lambda g: _unbroadcast(g * ad, bd.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._op(
        ad / bd,
        (a, b),
        (
            lambda g: _unbroadcast(g / bd, ad.shape),
            lambda g: _unbroadcast(-g * ad / (bd * bd), bd.shape),
        ),
        "div",
    )


def pow_scalar(a, p) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    ad = a.data
    return Tensor._op(
        ad**p,
        (a,),
        (lambda g: g * p * ad ** (p - 1.0),),
        "pow",
    )


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    na, nb = ad.ndim, bd.ndim
    if na == 2 and nb == 2:
        vjps = (lambda g: g @ bd.T, lambda g: ad.T @ g)
    elif na == 2 and nb == 1:
        vjps = (lambda g: np.outer(g, bd), lambda g: ad.T @ g)
    elif na == 1 and nb == 2:
        vjps = (lambda g: bd @ g, lambda g: np.outer(ad, g))
    elif na == 1 and nb == 1:
        vjps = (lambda g: g * bd, lambda g: g * ad)
    else:
        raise ValueError(f"matmul supports 1-D/2-D operands, got ndim {na} and {nb}")
    if ad.shape[-1] != bd.shape[0]:
        raise ValueError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    return Tensor._op(ad @ bd, (a, b), vjps, "matmul")


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return Tensor._op(a.data.T, (a,), (lambda g: g.T,), "transpose")


# -- elementwise maps -----------------------------------------------------------


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return Tensor._op(out, (a,), (lambda g: g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    return Tensor._op(np.log(ad), (a,), (lambda g: g / ad,), "log")


def softplus(a) -> Tensor:
    """log(1 + e^x), computed stably; gradient is the logistic sigmoid."""
    a = _as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def vjp(g):
        pos = x >= 0
        e = np.exp(np.where(pos, -x, x))  # e^{-|x|}, never overflows
        sig = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))
        return g * sig

    return Tensor._op(out, (a,), (vjp,), "softplus")


def clip(a, lo: float, hi: float) -> Tensor:
    """Hard clamp; zero gradient in the saturated (closed) region."""
    a = _as_tensor(a)
    x = a.data
    out = np.clip(x, lo, hi)
    inside = (x > lo) & (x < hi)
    return Tensor._op(out, (a,), (lambda g: g * inside,), "clip")


# -- structured ops ------------------------------------------------------------


def softmax(a) -> Tensor:
    """Softmax along the last axis, max-subtracted for stability."""
    a = _as_tensor(a)
    x = a.data
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return out * (g - (g * out).sum(axis=-1, keepdims=True))

    return Tensor._op(out, (a,), (vjp,), "softmax")


def rms_norm(a, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization along the last axis (no affine part)."""
    a = _as_tensor(a)
    x = a.data
    n = x.shape[-1]
    ms = np.mean(x * x, axis=-1, keepdims=True)
    r = np.sqrt(ms + eps)
    out = x / r

    def vjp(g):
        dot = np.sum(g * x, axis=-1, keepdims=True)
        return g / r - x * (dot / (n * r**3))

    return Tensor._op(out, (a,), (vjp,), "rms_norm")


def gather_rows(table, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D table by integer index; backward scatter-adds."""
    table = _as_tensor(table)
    idx = np.asarray(idx)
    if table.data.ndim != 2:
        raise ValueError("gather_rows expects a 2-D table")
    if idx.ndim != 1 or idx.dtype.kind not in ("i", "u"):
        raise ValueError("gather_rows expects a 1-D integer index array")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ValueError("gather_rows index out of range")
    td = table.data

    def vjp(g):
        buf = np.zeros_like(td)
        np.add.at(buf, idx, g)
        return buf

    return Tensor._op(td[idx], (table,), (vjp,), "gather_rows")


def cross_entropy_rows(logits, targets: np.ndarray) -> Tensor:
    """Per-row -log softmax(logits)[target]; returns a length-N vector."""
    logits = _as_tensor(logits)
    x = logits.data
    targets = np.asarray(targets)
    if x.ndim != 2:
        raise ValueError("cross_entropy_rows expects 2-D logits")
    if targets.shape != (x.shape[0],) or targets.dtype.kind not in ("i", "u"):
        raise ValueError("targets must be a 1-D integer array matching the row count")
    if targets.size and (targets.min() < 0 or targets.max() >= x.shape[1]):
        raise ValueError("target index out of range")
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    se = e.sum(axis=-1, keepdims=True)
    lse = np.log(se[:, 0]) + m[:, 0]
    picked = np.take_along_axis(x, targets[:, None], axis=-1)[:, 0]
    out = lse - picked
    rows = np.arange(x.shape[0])

    def vjp(g):
        d = (e / se) * g[:, None]
        d[rows, targets] -= g
        return d

    return Tensor._op(out, (logits,), (vjp,), "cross_entropy_rows")


# -- reductions / joins ----------------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    out = ad.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, ad.shape)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, ad.shape)

    return Tensor._op(out, (a,), (vjp,), "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    ad = a.data
    out = ad.mean(axis=axis, keepdims=keepdims)
    count = ad.size if axis is None else ad.shape[axis]

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / count, ad.shape)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg / count, ad.shape)

    return Tensor._op(out, (a,), (vjp,), "mean")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat needs at least one tensor")
    datas = [t.data for t in ts]
    out = np.concatenate(datas, axis=axis)
    nd = out.ndim
    ax = axis % nd
    vjps = []
    start = 0
    for d in datas:
        stop = start + d.shape[ax]
        sl = tuple(slice(start, stop) if i == ax else slice(None) for i in range(nd))
        vjps.append(lambda g, sl=sl: g[sl])
        start = stop
    return Tensor._op(out, tuple(ts), tuple(vjps), "concat")


# -- gradient checking -------------------------------------------------------------


@dataclass
class DiscrepancyReport:
    """Analytic-vs-central-difference comparison for one scalar function."""

    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    max_rel_err: float
    worst_coord: tuple[int, ...]
    epsilon: float

    def ok(self, threshold: float = 1e-6) -> bool:
        return self.max_rel_err < threshold


def gradcheck(
    f: Callable[[Tensor], Tensor],
    x0: np.ndarray,
    epsilon: float = 1e-5,
) -> DiscrepancyReport:
    """Compare the tape gradient of a scalar function against central differences.

    ``f`` receives a fresh leaf tensor per call (float64) and must return a
    scalar tensor. Relative error per coordinate is measured against
    ``max(|analytic_i|, |numeric_i|, 1e-3 * overall_scale)``, so coordinates
    far below the gradient's magnitude cannot produce spurious flags; an
    all-zero gradient reports zero error. A non-finite value at any probe
    point raises with the offending coordinate named.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    out = f(leaf)
    if not isinstance(out, Tensor) or out.data.ndim != 0:
        raise ValueError("gradcheck needs a scalar-valued function")
    if not np.isfinite(out.data):
        raise ValueError("non-finite value at the base point")
    if out.requires_grad:
        out.backward()
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)
    else:  # f ignored its input entirely
        analytic = np.zeros_like(x0)
    analytic = np.asarray(analytic, dtype=np.float64)

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        vals = []
        for sign in (1.0, -1.0):
            xp = x0.copy()
            xp.reshape(-1)[i] += sign * epsilon
            v = float(f(Tensor(xp)).data)
            if not np.isfinite(v):
                coord = tuple(int(c) for c in np.unravel_index(i, x0.shape))
                raise ValueError(f"non-finite probe at coordinate {coord}")
            vals.append(v)
        flat[i] = (vals[0] - vals[1]) / (2.0 * epsilon)

    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    if scale == 0.0:
        rel = np.zeros_like(x0)
    else:
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3 * scale)
        rel = np.abs(analytic - numeric) / denom
    worst_flat = int(np.argmax(rel)) if rel.size else 0
    worst = np.unravel_index(worst_flat, x0.shape) if rel.size else (0,)
    return DiscrepancyReport(
        analytic=analytic,
        numeric=numeric,
        rel_err=rel,
        max_rel_err=float(rel.max(initial=0.0)),
        worst_coord=tuple(int(w) for w in worst),
        epsilon=epsilon,
    )
