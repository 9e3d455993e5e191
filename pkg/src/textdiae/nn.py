"""Minimal module system and transformer building blocks on top of :mod:`tensor`."""
from __future__ import annotations

import math
import zlib

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """Learnable tensor.

    ``init`` names the initialiser used by :func:`initialize`; ``decay`` marks
    whether decoupled weight decay applies to it.
    """

    def __init__(self, shape, dtype=T.DEFAULT_DTYPE, init="zeros", decay=False):
        super().__init__(np.zeros(shape, dtype=dtype), requires_grad=True)
        self.init = init
        self.decay = decay


class Module:
    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for key, value in vars(self).items():
            _collect(value, f"{prefix}{key}", out)
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def requires_grad_(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict):
        for name, p in self.named_parameters().items():
            p.data[...] = state[name]


def _collect(value, name, out):
    if isinstance(value, Parameter):
        out[name] = value
    elif isinstance(value, Module):
        for k, v in vars(value).items():
            _collect(v, f"{name}.{k}", out)
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            _collect(v, f"{name}.{i}", out)
    elif isinstance(value, dict):
        for k, v in value.items():
            _collect(v, f"{name}.{k}", out)


def initialize(module: Module, seed: int, prefix: str = ""):
    """Fill every parameter according to its ``init`` tag.

    Each tensor draws from its own stream keyed on ``(seed, name)``, so adding
    or removing a submodule does not shift the values of the others.
    """
    for name, p in module.named_parameters(prefix).items():
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        if p.init == "glorot":
            fan_in, fan_out = p.shape[0], p.shape[1]
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            p.data[...] = rng.uniform(-bound, bound, size=p.shape)
        elif p.init == "trunc_normal":
            # std 0.02, truncated at two standard deviations
            std = 0.02
            vals = rng.standard_normal(p.shape)
            bad = np.abs(vals) > 2
            while bad.any():
                vals[bad] = rng.standard_normal(int(bad.sum()))
                bad = np.abs(vals) > 2
            p.data[...] = vals * std
        elif p.init == "ones":
            p.data[...] = 1
        else:
            p.data[...] = 0


class Linear(Module):
    def __init__(self, d_in, d_out, bias=True, dtype=T.DEFAULT_DTYPE):
        self.weight = Parameter((d_in, d_out), dtype, init="glorot", decay=True)
        self.bias = Parameter((d_out,), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d, eps=1e-5, dtype=T.DEFAULT_DTYPE):
        self.gamma = Parameter((d,), dtype, init="ones")
        self.beta = Parameter((d,), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


def causal_mask(n: int, dtype=T.DEFAULT_DTYPE) -> np.ndarray:
    """Additive ``[n, n]`` mask hiding every key after the query position."""
    m = np.zeros((n, n), dtype=dtype)
    m[np.triu_indices(n, k=1)] = -np.inf
    return m


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``heads`` parallel heads.

    The key projection carries no bias: a key bias shifts every score in a
    row by the same amount and has identically zero gradient.
    """

    def __init__(self, d, heads, kv_dim=None, dtype=T.DEFAULT_DTYPE):
        if d % heads:
            raise ValueError(f"model dim {d} not divisible by {heads} heads")
        kv_dim = d if kv_dim is None else kv_dim
        self.heads = heads
        self.q = Linear(d, d, dtype=dtype)
        self.k = Linear(kv_dim, d, bias=False, dtype=dtype)
        self.v = Linear(kv_dim, d, dtype=dtype)
        self.out = Linear(d, d, dtype=dtype)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, context: Tensor | None = None, causal: bool = False) -> Tensor:
        ctx = x if context is None else context
        b, n, d = x.shape
        q = self._split(self.q(x))
        k = self._split(self.k(ctx))
        v = self._split(self.v(ctx))
        scores = T.matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d // self.heads))
        mask = causal_mask(n, x.dtype) if causal else None
        attn = T.softmax(scores, axis=-1, mask=mask)
        o = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.out(o)


class MLP(Module):
    def __init__(self, d, hidden, dtype=T.DEFAULT_DTYPE):
        self.fc1 = Linear(d, hidden, dtype=dtype)
        self.fc2 = Linear(hidden, d, dtype=dtype)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class Block(Module):
    """Pre-LN transformer block: ``x + MSA(LN(x))`` then ``x + MLP(LN(x))``."""

    def __init__(self, d, heads, mlp_ratio=4, dtype=T.DEFAULT_DTYPE):
        self.norm1 = LayerNorm(d, dtype=dtype)
        self.attn = MultiHeadAttention(d, heads, dtype=dtype)
        self.norm2 = LayerNorm(d, dtype=dtype)
        self.mlp = MLP(d, d * mlp_ratio, dtype=dtype)

    def __call__(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class DecoderBlock(Module):
    """Pre-LN sequence decoder block: masked self-attention, cross-attention, MLP."""

    def __init__(self, d, heads, context_dim, mlp_ratio=4, dtype=T.DEFAULT_DTYPE):
        self.norm1 = LayerNorm(d, dtype=dtype)
        self.self_attn = MultiHeadAttention(d, heads, dtype=dtype)
        self.norm2 = LayerNorm(d, dtype=dtype)
        self.cross_attn = MultiHeadAttention(d, heads, kv_dim=context_dim, dtype=dtype)
        self.norm3 = LayerNorm(d, dtype=dtype)
        self.mlp = MLP(d, d * mlp_ratio, dtype=dtype)

    def __call__(self, x, context):
        x = x + self.self_attn(self.norm1(x), causal=True)
        x = x + self.cross_attn(self.norm2(x), context=context)
        return x + self.mlp(self.norm3(x))
