"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array.  Every differentiable operation records
its inputs and a backward rule on the output tensor; :meth:`Tensor.backward`
linearises that graph into a :class:`Tape` (topological order) and replays it
in reverse, accumulating gradients into every reachable tensor that has
``requires_grad`` set.

Fused kernels (``layer_norm``, ``softmax``, ``gelu``, the two losses) carry
hand-derived backward rules; everything else is composed from primitives.
"""
from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError

DEFAULT_DTYPE = np.float32

# per thread, so concurrent inference never flips recording for a training thread
_state = threading.local()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, optimizer updates)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """n-dimensional real array with an optional gradient.

    ``grad`` is ``None`` until a backward pass reaches the tensor, after which
    it has the same shape as ``data``.  Gradients accumulate across backward
    calls until :meth:`zero_grad`.
    """

    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None, _parents=(), _backward=None, _op=""):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            # numpy scalars (e.g. the sum of two 0-d arrays) keep their precision too
            if isinstance(data, (np.ndarray, np.generic)) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self._op = _op

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self):
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        out = Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)
        return out

    # -- graph construction -------------------------------------------------
    @staticmethod
    def _make(data, parents, backward, op) -> "Tensor":
        needs = is_grad_enabled() and any(p.requires_grad for p in parents)
        if not needs:
            return Tensor(data)
        return Tensor(data, requires_grad=True, dtype=data.dtype, _parents=tuple(parents), _backward=backward, _op=op)

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    # -- elementwise arithmetic --------------------------------------------
    def __add__(self, other):
        other = self._lift(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._make(a.data + b.data, (a, b), bw, "add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        other = self._lift(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._make(a.data - b.data, (a, b), bw, "sub")

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._make(a.data * b.data, (a, b), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        a, b = self, other

        def bw(g):
            ga = g / b.data
            gb = -g * a.data / (b.data * b.data)
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Tensor._make(a.data / b.data, (a, b), bw, "div")

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise TypeError("only scalar exponents are supported")
        a = self

        def bw(g):
            return (g * p * a.data ** (p - 1),)

        return Tensor._make(a.data ** p, (a,), bw, "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        a = self
        if isinstance(idx, Tensor):
            idx = idx.data.astype(np.int64)

        def bw(g):
            out = np.zeros_like(a.data)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._make(a.data[idx], (a,), bw, "getitem")

    # -- unary math ---------------------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1 - out * out),), "tanh")

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def relu(self):
        a = self
        return Tensor._make(np.maximum(a.data, 0), (a,), lambda g: (g * (a.data > 0),), "relu")

    # -- reductions and shape ops -------------------------------------------
    def sum(self, axis=None, keepdims=False):
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[ax] for ax in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose")

    def swapaxes(self, a1, a2):
        return Tensor._make(np.swapaxes(self.data, a1, a2), (self,), lambda g: (np.swapaxes(g, a1, a2),), "swapaxes")

    @property
    def T(self):
        return self.transpose()

    # -- autodiff entry point ------------------------------------------------
    def backward(self, grad=None):
        """Populate ``.grad`` on every tensor reachable from this one.

        Without ``grad`` the tensor must be a scalar (a loss).
        """
        if grad is None:
            if self.size != 1:
                raise ValueError(f"backward() without an explicit gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        Tape.record(self).run(grad)


@dataclass
class Tape:
    """Topologically ordered list of graph nodes ending at ``root``.

    Every node appears after all of its inputs.  :meth:`run` visits each node
    once, in reverse order.
    """

    root: Tensor
    nodes: list = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(root, order)

    def run(self, grad: np.ndarray):
        grads: dict[int, np.ndarray] = {id(self.root): grad}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.dtype)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching semantics (``[..., m, k] @ [..., k, n]``)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._make(np.matmul(a.data, b.data), (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as ``[in, out]``."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g @ wd.T) if x.requires_grad else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, bw, "linear")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding id out of range [0, {weight.shape[0]})")

    def bw(g):
        out = np.zeros_like(weight.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (out,)

    return Tensor._make(weight.data[ids], (weight,), bw, "embedding")


# ---------------------------------------------------------------------------
# fused kernels
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Numerically stable softmax.

    ``mask`` is an additive array broadcastable to ``x`` holding ``0`` for
    visible and ``-inf`` for hidden positions; hidden positions come out as
    exactly ``0``.
    """
    z = x.data if mask is None else x.data + mask
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(z - m)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return Tensor._make(s.astype(x.dtype, copy=False), (x,), bw, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise DimensionError("layer_norm over an empty last dimension")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match last dim {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
    if eps == 0:
        # zero-variance rows collapse to beta
        xhat = np.where(var == 0, 0.0, xhat).astype(xd.dtype, copy=False)
        rstd = np.where(var == 0, 0.0, rstd).astype(xd.dtype, copy=False)
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), bw, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + _GELU_K * x2))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return Tensor._make(out.astype(xd.dtype, copy=False), (x,), bw, "gelu")


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean of squared differences over all elements."""
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target, dtype=pred.dtype))
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size
    out = np.asarray(np.mean(diff * diff), dtype=pred.dtype)

    def bw(g):
        gp = g * (2.0 / n) * diff
        return gp, -gp

    return Tensor._make(out, (pred, target), bw, "mse")


def cross_entropy_loss(logits: Tensor, targets, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``logits`` is ``[..., V]`` and ``targets`` an integer array of the leading
    shape.  Positions equal to ``ignore_index`` contribute nothing.
    """
    targets = np.asarray(targets, dtype=np.int64)
    v = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    valid = np.ones(targets.shape, dtype=bool) if ignore_index is None else targets != ignore_index
    if np.any(targets[valid] >= v) or np.any(targets[valid] < 0):
        bad = int(targets[valid].max())
        raise IndexError(f"target id {bad} out of range for vocabulary of size {v}")
    flat = logits.data.reshape(-1, v)
    t = np.where(valid, targets, 0).reshape(-1)
    w = valid.reshape(-1)
    m = flat.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(flat - m).sum(axis=1))
    picked = flat[np.arange(len(t)), t]
    count = max(int(w.sum()), 1)
    loss = np.asarray(((lse - picked) * w).sum() / count, dtype=logits.dtype)

    def bw(g):
        p = np.exp(flat - lse[:, None])
        p[np.arange(len(t)), t] -= 1.0
        p *= (w / count)[:, None]
        return ((g * p).reshape(logits.shape),)

    return Tensor._make(loss, (logits,), bw, "cross_entropy")


def check_finite(named: Iterable[tuple[str, Tensor]], where: str = ""):
    """Raise :class:`NumericError` naming the first non-finite tensor."""
    for name, t in named:
        if not np.all(np.isfinite(t.data)):
            raise NumericError(f"non-finite values in {name}{' ' + where if where else ''}")
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise NumericError(f"non-finite gradient in {name}{' ' + where if where else ''}")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def _rel_err(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-3, coords=None) -> np.ndarray:
    """Five-point central differences of scalar ``f()`` w.r.t. ``x``.

    ``x`` is mutated in place and restored.  The stencil's O(h^4) truncation
    error lets ``h`` stay large enough that float64 roundoff is negligible.
    Only ``coords`` (flat indices) are evaluated when given; other entries are NaN.
    """
    flat = x.data.reshape(-1)
    out = np.full(flat.shape, np.nan, dtype=np.float64)
    idx = range(flat.size) if coords is None else coords
    with no_grad():
        for i in idx:
            orig = flat[i]
            vals = []
            for step in (2 * h, h, -h, -2 * h):
                flat[i] = orig + step
                vals.append(float(f().data))
            flat[i] = orig
            out[i] = (8 * (vals[1] - vals[2]) - (vals[0] - vals[3])) / (12 * h)
    return out.reshape(x.shape)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3, coords=None) -> float:
    """Worst relative error between ``backward()`` and central differences.

    The denominator is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    return grad_check_many(lambda: f(x), {"x": x}, h=h, coords={"x": coords} if coords is not None else None)["x"]


def grad_check_many(loss_fn: Callable[[], Tensor], params: dict, h: float = 1e-3, coords: dict | None = None) -> dict:
    """Per-tensor worst relative error for a loss over several inputs.

    ``coords`` optionally maps a name to the flat indices to probe; tensors
    missing from it are probed exhaustively.
    """
    for p in params.values():
        p.requires_grad = True
        p.zero_grad()
    loss_fn().backward()
    errs = {}
    for name, p in params.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64)
        sel = None if coords is None else coords.get(name)
        numeric = numeric_grad(loss_fn, p, h=h, coords=sel)
        a = analytic.reshape(-1)
        n = numeric.reshape(-1)
        if sel is not None:
            a, n = a[list(sel)], n[list(sel)]
        errs[name] = float(_rel_err(a, n).max()) if a.size else 0.0
    return errs
