"""Statistics fusion: per-moment cross-attention, gated self-attention,
and the cosine-gated residual that blends fused features back into the
content stream.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeMismatch, Tensor
from .nn import Linear, Module, scaled_dot_attention
from .stats import STAT_NAMES, StatGroups


class StatCrossAttention(Module):
    """Cross-attention over one statistics group.

    Each channel of a statistic vector is a token with a scalar feature;
    learned projections lift query/key/value tokens to ``d_inner`` before
    scaled-dot attention, and the output projection drops back to scalars.
    The output projection is zero-initialized, so an untrained module emits
    exactly zero refined statistics (near-identity start for the fusor).
    """

    def __init__(self, d_inner: int, rng):
        self.wq = Linear(1, d_inner, rng)
        self.wk = Linear(1, d_inner, rng)
        self.wv = Linear(1, d_inner, rng)
        self.wo = Linear(d_inner, 1, rng, zero_init=True)
        self.last_weights = None

    def __call__(self, s_q: Tensor, s_k: Tensor, s_v: Tensor) -> Tensor:
        if not (s_q.shape == s_k.shape == s_v.shape):
            raise ShapeMismatch(
                f"statistic group shapes differ: {s_q.shape} {s_k.shape} {s_v.shape}"
            )
        d = s_q.shape[0]
        q = self.wq(ad.reshape(s_q, (1, d)))
        k = self.wk(ad.reshape(s_k, (1, d)))
        v = self.wv(ad.reshape(s_v, (1, d)))
        attended, weights = scaled_dot_attention(q, k, v)
        self.last_weights = weights.data
        return ad.reshape(self.wo(attended), (d,))


class GateSelfAttention(Module):
    """Self-attention over the content stream augmented with refined stats.

    Refined statistic vectors are broadcast along frames and stacked below
    the query rows; after attention the statistic rows are discarded, so the
    output keeps the query's shape.
    """

    def __init__(self, d_model: int, n_stats: int, rng):
        width = d_model * (1 + n_stats)
        self.d_model = d_model
        self.wq = Linear(width, width, rng)
        self.wk = Linear(width, width, rng)
        self.wv = Linear(width, width, rng)
        self.wo = Linear(width, width, rng)
        self.last_weights = None

    def augment(self, query: Tensor, refined: list[Tensor]) -> Tensor:
        d, n = query.shape
        rows = [query]
        for r in refined:
            if r.shape != (d,):
                raise ShapeMismatch(f"refined stat shape {r.shape} != ({d},)")
            rows.append(ad.broadcast_to(ad.reshape(r, (d, 1)), (d, n)))
        return ad.concat(rows, axis=0)

    def __call__(self, query: Tensor, refined: list[Tensor]) -> Tensor:
        aug = self.augment(query, refined)
        q, k, v = self.wq(aug), self.wk(aug), self.wv(aug)
        attended, weights = scaled_dot_attention(q, k, v)
        self.last_weights = weights.data
        return self.wo(attended)[: self.d_model, :]


def cosine_gate(q: Tensor, k: Tensor, eps: float = 1e-12) -> Tensor:
    """Scalar blend weight (cos(q, k) + 1) / 2 over the flattened tensors.

    Always in [0, 1]; invariant to positive rescaling of either argument
    (up to the eps guard on the norms).
    """
    qf = ad.reshape(q, (q.size,))
    kf = ad.reshape(k, (k.size,))
    dot = ad.sum_(qf * kf)
    nq = ad.sqrt(ad.sum_(qf * qf)) + eps
    nk = ad.sqrt(ad.sum_(kf * kf)) + eps
    return (dot / (nq * nk) + 1.0) * 0.5


def gate_residual(fused: Tensor, query: Tensor, gate: Tensor) -> Tensor:
    """Elementwise blend gate * fused + (1 - gate) * query."""
    if fused.shape != query.shape:
        raise ShapeMismatch(f"fused {fused.shape} != query {query.shape}")
    return gate * fused + (1.0 - gate) * query


class HOSAttn(Module):
    """High-order multi-statistics attention.

    Per enabled moment, a dedicated cross-attention refines the (Q, K, V)
    statistics triple; the refined vectors feed gate self-attention over the
    query stream; a cosine gate blends the result with the raw query; a
    final feed-forward projects to the latent width.
    """

    def __init__(self, d_proj: int, d_latent: int, rng, d_inner: int = 8,
                 use_skew: bool = True, use_kurt: bool = True):
        names = ["mu", "var"] + (["skew"] if use_skew else []) + (
            ["kurt"] if use_kurt else []
        )
        self.stat_names = names
        self.cross = [StatCrossAttention(d_inner, rng) for _ in names]
        self.gate_attn = GateSelfAttention(d_proj, len(names), rng)
        self.out_proj = Linear(d_proj, d_latent, rng)
        self.last_gate = None

    def __call__(self, q: Tensor, k: Tensor, groups: StatGroups) -> Tensor:
        refined = []
        for name, block in zip(self.stat_names, self.cross):
            group = getattr(groups, f"{name}_group")
            refined.append(block(*group))
        fused = self.gate_attn(q, refined)
        gate = cosine_gate(q, k)
        self.last_gate = float(gate.data)
        return self.out_proj(gate_residual(fused, q, gate))
