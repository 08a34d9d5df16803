"""Frame-wise moment statistics and the style disentanglement projections.

The four moments per feature channel over the valid frames f in Omega:

    mu    = (1/|Omega|) sum x
    var   = (1/|Omega|) sum (x - mu)^2            (population normalization)
    skew  = (1/|Omega|) sum ((x - mu) / (sqrt(var) + eps))^3
    kurt  = (1/|Omega|) sum ((x - mu) / (sqrt(var) + eps))^4  (raw, Gaussian -> 3)

The eps in the standardized-moment divisor makes constant inputs map to
skew = kurt = 0 instead of 0/0, and keeps gradients finite on padded or
degenerate data. All four outputs are differentiable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ShapeMismatch, Tensor
from .nn import Linear, Module

STAT_NAMES = ("mu", "var", "skew", "kurt")


@dataclass
class StatTuple:
    mu: Tensor
    var: Tensor
    skew: Tensor
    kurt: Tensor

    def get(self, name: str) -> Tensor:
        return getattr(self, name)

    def arrays(self) -> dict:
        return {name: self.get(name).data for name in STAT_NAMES}


@dataclass
class StatGroups:
    """Q/K/V-grouped statistics, one triple per enabled moment."""

    mu_group: list | None
    var_group: list | None
    skew_group: list | None
    kurt_group: list | None

    def enabled(self):
        for name in STAT_NAMES:
            group = getattr(self, f"{name}_group")
            if group is not None:
                yield name, group


def _valid_count(x: Tensor, mask) -> int:
    if mask is None:
        return x.shape[1]
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (x.shape[1],):
        raise ShapeMismatch(f"mask length {mask.shape} != frame count {x.shape[1]}")
    n = int(mask.sum())
    if n == 0:
        raise ContractError("all frames are masked out")
    if not mask[:n].all():
        raise ContractError("mask must be a contiguous prefix of valid frames")
    return n


def frame_statistics(x: Tensor, mask=None, eps: float = 1e-5) -> StatTuple:
    """Four moments over valid frames, per feature channel (and joint).

    ``x`` is (d, F) or (d, F, J); the frame axis is 1. ``mask`` marks the
    valid prefix; moments never read masked frames (they are sliced away,
    so appending padded frames cannot change any value, bit for bit).
    """
    x = ad.as_tensor(x)
    if x.ndim not in (2, 3):
        raise ShapeMismatch(f"expected (d, F) or (d, F, J), got {x.shape}")
    if eps <= 0:
        raise ContractError("eps must be positive")
    n = _valid_count(x, mask)
    xv = x[:, :n] if x.ndim == 2 else x[:, :n, :]

    mu_k = ad.mean(xv, axis=1, keepdims=True)
    centered = xv - mu_k
    var_k = ad.mean(centered * centered, axis=1, keepdims=True)
    z = centered / (ad.sqrt(var_k) + eps)
    shape = tuple(s for i, s in enumerate(x.shape) if i != 1)
    return StatTuple(
        mu=ad.reshape(mu_k, shape),
        var=ad.reshape(var_k, shape),
        skew=ad.reshape(ad.mean(z * z * z, axis=1, keepdims=True), shape),
        kurt=ad.reshape(ad.mean((z * z) * (z * z), axis=1, keepdims=True), shape),
    )


def adain_baseline(x: Tensor, y: Tensor, eps: float = 1e-10,
                   mask_x=None, mask_y=None) -> Tensor:
    """Adaptive instance normalization: re-scale x's channels to y's moments.

    out = sqrt(var_y) * (x - mu_x) / (sqrt(var_x) + eps) + mu_y, per channel
    over valid frames. With masks, only the valid prefix is transformed and
    padding stays zero.
    """
    x, y = ad.as_tensor(x), ad.as_tensor(y)
    nx, ny = _valid_count(x, mask_x), _valid_count(y, mask_y)
    xv = x[:, :nx] if x.ndim == 2 else x[:, :nx, :]
    yv = y[:, :ny] if y.ndim == 2 else y[:, :ny, :]

    mu_x = ad.mean(xv, axis=1, keepdims=True)
    cx = xv - mu_x
    var_x = ad.mean(cx * cx, axis=1, keepdims=True)
    mu_y = ad.mean(yv, axis=1, keepdims=True)
    cy = yv - mu_y
    var_y = ad.mean(cy * cy, axis=1, keepdims=True)
    out = ad.sqrt(var_y) * (cx / (ad.sqrt(var_x) + eps)) + mu_y
    if nx == x.shape[1]:
        return out
    pad_shape = list(x.shape)
    pad_shape[1] = x.shape[1] - nx
    return ad.concat([out, Tensor(np.zeros(pad_shape))], axis=1)


def simple_sdm(e: Tensor, mask=None, eps: float = 1e-5,
               use_skew: bool = True, use_kurt: bool = True) -> Tensor:
    """Append a latent's own moment rows to it along the feature axis.

    Each enabled moment of ``e`` (per channel, over valid frames) is
    broadcast along frames and concatenated below ``e``; with all four
    moments the output width is 5d. Replaces a learnable style token.
    """
    e = ad.as_tensor(e)
    if e.ndim != 2:
        raise ShapeMismatch(f"expected a (d, F) latent, got {e.shape}")
    n_frames = e.shape[1]
    stats = frame_statistics(e, mask=mask, eps=eps)
    rows = [e]
    for name in _enabled_names(use_skew, use_kurt):
        col = ad.reshape(stats.get(name), (e.shape[0], 1))
        rows.append(ad.broadcast_to(col, (e.shape[0], n_frames)))
    out = ad.concat(rows, axis=0)
    if mask is not None:
        out = out * Tensor(np.asarray(mask, dtype=np.float64)[None, :])
    return out


def _enabled_names(use_skew: bool, use_kurt: bool):
    names = ["mu", "var"]
    if use_skew:
        names.append("skew")
    if use_kurt:
        names.append("kurt")
    return names


class SDM(Module):
    """Project style/content codes to Q, K, V and group their moments.

    The content code drives the query; the style code drives key and value.
    Each projection follows instance normalization over the valid frames.
    The twelve per-channel statistics (four moments of each of Q, K, V) come
    back grouped by moment.
    """

    def __init__(self, d_model: int, d_proj: int, rng, eps: float = 1e-5,
                 eps_in: float = 1e-5, use_skew: bool = True, use_kurt: bool = True):
        self.query_proj = Linear(d_model, d_proj, rng)
        self.key_proj = Linear(d_model, d_proj, rng)
        self.value_proj = Linear(d_model, d_proj, rng)
        self.eps = eps
        self.eps_in = eps_in
        self.use_skew = use_skew
        self.use_kurt = use_kurt

    def __call__(self, style_code, content_code):
        """style_code/content_code: objects with .values (d, L) and .n_valid."""
        if style_code.values.shape[0] != content_code.values.shape[0]:
            raise ShapeMismatch(
                f"latent widths differ: {style_code.values.shape} vs "
                f"{content_code.values.shape}"
            )
        c = content_code.values[:, : content_code.n_valid]
        s = style_code.values[:, : style_code.n_valid]
        q = self.query_proj(ad.instance_normalize(c, self.eps_in))
        s_normed = ad.instance_normalize(s, self.eps_in)
        k = self.key_proj(s_normed)
        v = self.value_proj(s_normed)

        tuples = [frame_statistics(t, eps=self.eps) for t in (q, k, v)]
        enabled = _enabled_names(self.use_skew, self.use_kurt)
        per_stat = {
            name: [t.get(name) for t in tuples] if name in enabled else None
            for name in STAT_NAMES
        }
        groups = StatGroups(
            per_stat["mu"], per_stat["var"], per_stat["skew"], per_stat["kurt"]
        )
        return q, k, v, groups


def export_statistics_csv(clips, path, eps: float = 1e-5) -> None:
    """Per-channel moment descriptors for external plotting.

    Columns: sequence_id, style_label, channel, mu, var, skew, kurt. The
    channel index runs over the flattened (feature, joint) grid.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sequence_id", "style_label", "channel", "mu", "var", "skew", "kurt"])
        for seq_id, clip in enumerate(clips):
            stats = frame_statistics(Tensor(clip.features), mask=clip.mask, eps=eps)
            cols = {name: stats.get(name).data.ravel() for name in STAT_NAMES}
            for ch in range(cols["mu"].size):
                writer.writerow(
                    [seq_id, clip.style_label or "", ch]
                    + [repr(float(cols[name][ch])) for name in STAT_NAMES]
                )
