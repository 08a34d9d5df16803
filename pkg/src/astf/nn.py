"""Network building blocks on top of the autodiff engine.

Layout convention throughout: features on axis 0, frames (sequence
positions) on axis 1, so a linear layer maps ``(d_in, F) -> (d_out, F)``.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Base class; parameters are discovered by scanning attributes."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{key}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{key}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def load_state(self, state: dict):
        """Copy values from a name->array mapping into the parameters."""
        params = dict(self.named_parameters())
        missing = set(params) ^ set(state)
        if missing:
            raise KeyError(f"parameter names do not match: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ad.ShapeMismatch(f"{name}: {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def state(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters()}


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, zero_init: bool = False):
        if zero_init:
            w = np.zeros((d_out, d_in))
        else:
            bound = float(np.sqrt(1.0 / d_in))
            w = rng.uniform(-bound, bound, size=(d_out, d_in))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(self.weight, x) + ad.reshape(self.bias, (self.bias.size, 1))


class LayerNorm(Module):
    """Normalizes each frame (column) over the feature axis."""

    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.shift = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = ad.mean(x, axis=0, keepdims=True)
        xc = x - mu
        var = ad.mean(xc * xc, axis=0, keepdims=True)
        normed = xc / ad.sqrt(var + self.eps)
        d = self.gain.size
        return normed * ad.reshape(self.gain, (d, 1)) + ad.reshape(self.shift, (d, 1))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor):
    """Single-head attention on (features, positions) tensors.

    Returns the attended values ``(d_v, n_q)`` and the (n_q, n_k) weight
    matrix, whose rows sum to 1.
    """
    d_k = q.shape[0]
    scores = ad.matmul(ad.transpose(q), k) * (1.0 / np.sqrt(d_k))
    weights = ad.softmax(scores, axis=1)
    return ad.matmul(v, ad.transpose(weights)), weights


class SelfAttention(Module):
    """Multi-head self-attention block (heads=1 by default)."""

    def __init__(self, dim: int, heads: int, rng):
        if dim % heads != 0:
            raise ad.ShapeMismatch(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.wq = Linear(dim, dim, rng)
        self.wk = Linear(dim, dim, rng)
        self.wv = Linear(dim, dim, rng)
        self.wo = Linear(dim, dim, rng)
        self.last_weights = None

    def __call__(self, x: Tensor) -> Tensor:
        q, k, v = self.wq(x), self.wk(x), self.wv(x)
        dim = q.shape[0]
        step = dim // self.heads
        outs, weights = [], []
        for h in range(self.heads):
            sl = slice(h * step, (h + 1) * step)
            o, w = scaled_dot_attention(q[sl, :], k[sl, :], v[sl, :])
            outs.append(o)
            weights.append(w.data)
        self.last_weights = weights
        merged = outs[0] if self.heads == 1 else ad.concat(outs, axis=0)
        return self.wo(merged)


class TransformerBlock(Module):
    """Pre-norm self-attention + feed-forward with residuals."""

    def __init__(self, dim: int, heads: int, ff_mult: int, rng):
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ff1 = Linear(dim, dim * ff_mult, rng)
        self.ff2 = Linear(dim * ff_mult, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ff2(ad.leaky_relu(self.ff1(self.norm2(x))))


class Conv1d(Module):
    """Temporal convolution over frames, kernel 3, zero padding, stride 1."""

    def __init__(self, d_in: int, d_out: int, rng):
        bound = float(np.sqrt(1.0 / (3 * d_in)))
        self.taps = [
            Tensor(rng.uniform(-bound, bound, size=(d_out, d_in)), requires_grad=True)
            for _ in range(3)
        ]
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        d_in, n = x.shape
        pad = Tensor(np.zeros((d_in, 1)))
        xp = ad.concat([pad, x, pad], axis=1)
        out = ad.matmul(self.taps[0], xp[:, 0:n])
        out = out + ad.matmul(self.taps[1], xp[:, 1 : n + 1])
        out = out + ad.matmul(self.taps[2], xp[:, 2 : n + 2])
        return out + ad.reshape(self.bias, (self.bias.size, 1))


def sinusoidal_encoding(dim: int, n: int) -> Tensor:
    """Constant (dim, n) sinusoidal positional code."""
    pos = np.arange(n, dtype=np.float64)
    i = np.arange(dim, dtype=np.float64)
    angles = pos[None, :] / np.power(10000.0, (2 * (i[:, None] // 2)) / dim)
    enc = np.where((i[:, None] % 2) == 0, np.sin(angles), np.cos(angles))
    return Tensor(enc)
