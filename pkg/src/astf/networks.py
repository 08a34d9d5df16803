"""Motion networks: statistics encoders, decoder, full generator, and the
consistency-regularized discriminator.

All sequence processing slices the valid prefix of a clip (masks are
contiguous prefixes), so padded frames are never read and outputs at padded
frames are exact zeros. Latent codes keep the full frame length with the
inherited mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import HOSAttn
from .autodiff import ContractError, Tensor
from .motion import FEATURE_DIM, MotionClip
from .nn import Conv1d, Linear, Module, TransformerBlock, sinusoidal_encoding
from .stats import SDM, simple_sdm


@dataclass
class LatentCode:
    values: Tensor  # (d, frame_len)
    mask: np.ndarray  # (frame_len,) bool, contiguous prefix

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    @property
    def frame_len(self) -> int:
        return self.values.shape[1]


def _pad_frames(values: Tensor, frame_len: int) -> Tensor:
    """Right-pad a (d, n) tensor with zero frames to (d, frame_len)."""
    n = values.shape[1]
    if n == frame_len:
        return values
    pad = Tensor(np.zeros((values.shape[0], frame_len - n)))
    return ad.concat([values, pad], axis=1)


def _flatten_joints(features: Tensor, n_valid: int) -> Tensor:
    """(d, L, J) -> (d*J, n_valid), joints fastest."""
    sliced = features[:, :n_valid, :]
    d, n, j = sliced.shape
    return ad.reshape(ad.transpose(sliced, (0, 2, 1)), (d * j, n))


class MotionEncoder(Module):
    """Projection layers + moment augmentation + transformer encoder."""

    def __init__(self, d_in: int, d_embed: int, d_model: int, n_blocks: int,
                 heads: int, ff_mult: int, rng, use_simple_sdm: bool = True,
                 use_skew: bool = True, use_kurt: bool = True,
                 eps_stats: float = 1e-5):
        self.proj1 = Linear(d_in, d_embed, rng)
        self.proj2 = Linear(d_embed, d_embed, rng)
        self.use_simple_sdm = use_simple_sdm
        self.use_skew = use_skew
        self.use_kurt = use_kurt
        self.eps_stats = eps_stats
        n_stats = 2 + int(use_skew) + int(use_kurt)
        if not use_simple_sdm:
            # Learnable token standing in for the per-sequence moment rows.
            self.style_token = Tensor(
                0.02 * rng.standard_normal(d_embed * n_stats), requires_grad=True
            )
        self.in_proj = Linear(d_embed * (1 + n_stats), d_model, rng)
        self.blocks = [TransformerBlock(d_model, heads, ff_mult, rng) for _ in range(n_blocks)]

    def __call__(self, features, mask) -> LatentCode:
        mask = np.asarray(mask, dtype=bool)
        n = int(mask.sum())
        if n == 0:
            raise ContractError("cannot encode an all-masked clip")
        features = ad.as_tensor(features)
        x = _flatten_joints(features, n)
        embed = self.proj2(ad.leaky_relu(self.proj1(x)))
        if self.use_simple_sdm:
            aug = simple_sdm(embed, eps=self.eps_stats,
                             use_skew=self.use_skew, use_kurt=self.use_kurt)
        else:
            token = ad.broadcast_to(
                ad.reshape(self.style_token, (self.style_token.size, 1)),
                (self.style_token.size, n),
            )
            aug = ad.concat([embed, token], axis=0)
        z = self.in_proj(aug) + sinusoidal_encoding(self.in_proj.weight.shape[0], n)
        for block in self.blocks:
            z = block(z)
        return LatentCode(_pad_frames(z, features.shape[1]), mask)

    def encode_clip(self, clip: MotionClip) -> LatentCode:
        return self(Tensor(clip.features), clip.mask)


class MotionDecoder(Module):
    """Transformer decoder back to clip features with valid rotations.

    The six rotation values per joint are re-orthonormalized (Gram-Schmidt)
    so emitted rotations satisfy R^T R = I; the output bias starts at the
    identity-rotation encoding to keep that well-conditioned. Root-only
    channels are structurally zeroed for non-root joints.
    """

    def __init__(self, d_model: int, n_joints: int, n_blocks: int, heads: int,
                 ff_mult: int, rng, eps: float = 1e-8):
        self.in_proj = Linear(d_model, d_model, rng)
        self.blocks = [TransformerBlock(d_model, heads, ff_mult, rng) for _ in range(n_blocks)]
        self.out_proj = Linear(d_model, FEATURE_DIM * n_joints, rng)
        bias = np.zeros((FEATURE_DIM, n_joints))
        bias[0, :] = 1.0  # rotation block starts at the identity encoding
        bias[4, :] = 1.0
        self.out_proj.bias.data = bias.reshape(-1)
        self.n_joints = n_joints
        self.eps = eps

    def __call__(self, latent: LatentCode):
        n = latent.n_valid
        z = self.in_proj(latent.values[:, :n]) + sinusoidal_encoding(
            self.in_proj.weight.shape[0], n
        )
        for block in self.blocks:
            z = block(z)
        flat = self.out_proj(z)  # (FEATURE_DIM * J, n)
        feats = ad.transpose(ad.reshape(flat, (FEATURE_DIM, self.n_joints, n)), (0, 2, 1))

        a, b, extras = feats[0:3], feats[3:6], feats[6:10]
        norm_a = ad.sqrt(ad.sum_(a * a, axis=0, keepdims=True)) + self.eps
        v1 = a / norm_a
        dot = ad.sum_(v1 * b, axis=0, keepdims=True)
        u = b - dot * v1
        v2 = u / (ad.sqrt(ad.sum_(u * u, axis=0, keepdims=True)) + self.eps)

        root_only = np.zeros((4, 1, self.n_joints))
        root_only[:, :, 0] = 1.0
        out = ad.concat([v1, v2, extras * Tensor(root_only)], axis=0)
        if n < latent.frame_len:
            pad = Tensor(np.zeros((FEATURE_DIM, latent.frame_len - n, self.n_joints)))
            out = ad.concat([out, pad], axis=1)
        return out, latent.mask


@dataclass
class GenOut:
    """Generator forward products kept on the graph for loss computation."""

    features: Tensor  # (FEATURE_DIM, frame_len, J)
    mask: np.ndarray
    e_content: LatentCode
    e_style: LatentCode
    e_transfer: LatentCode


class Generator(Module):
    """encode both clips -> SDM -> statistics fusion -> decode."""

    def __init__(self, n_joints: int, d_embed: int, d_model: int, d_proj: int,
                 enc_blocks: int, dec_blocks: int, heads: int, ff_mult: int,
                 rng, d_stat_inner: int = 8, use_simple_sdm: bool = True,
                 use_skew: bool = True, use_kurt: bool = True,
                 eps_stats: float = 1e-5, eps_in: float = 1e-5):
        d_in = FEATURE_DIM * n_joints
        enc = dict(use_simple_sdm=use_simple_sdm, use_skew=use_skew,
                   use_kurt=use_kurt, eps_stats=eps_stats)
        self.content_encoder = MotionEncoder(
            d_in, d_embed, d_model, enc_blocks, heads, ff_mult, rng, **enc
        )
        self.style_encoder = MotionEncoder(
            d_in, d_embed, d_model, enc_blocks, heads, ff_mult, rng, **enc
        )
        self.sdm = SDM(d_model, d_proj, rng, eps=eps_stats, eps_in=eps_in,
                       use_skew=use_skew, use_kurt=use_kurt)
        self.hos = HOSAttn(d_proj, d_model, rng, d_inner=d_stat_inner,
                           use_skew=use_skew, use_kurt=use_kurt)
        self.decoder = MotionDecoder(d_model, n_joints, dec_blocks, heads, ff_mult, rng)

    def forward(self, content_features, content_mask, style_features, style_mask) -> GenOut:
        e_c = self.content_encoder(content_features, content_mask)
        e_s = self.style_encoder(style_features, style_mask)
        q, k, _v, groups = self.sdm(e_s, e_c)
        fused = self.hos(q, k, groups)
        e_t = LatentCode(_pad_frames(fused, e_c.frame_len), e_c.mask)
        features, mask = self.decoder(e_t)
        return GenOut(features, mask, e_c, e_s, e_t)

    def forward_clips(self, content: MotionClip, style: MotionClip) -> GenOut:
        if content.frame_len != style.frame_len or content.n_joints != style.n_joints:
            raise ContractError(
                f"clips disagree: {content.features.shape} vs {style.features.shape}"
            )
        return self.forward(Tensor(content.features), content.mask,
                            Tensor(style.features), style.mask)

    def generate(self, content: MotionClip, style: MotionClip):
        """Materialize the stylized clip; also returns the latent products."""
        with ad.no_grad():
            out = self.forward_clips(content, style)
        clip = MotionClip(
            out.features.data.copy(), content.mask.copy(), content.skeleton,
            content.frame_time, style.style_label, content.content_label,
        )
        clip.validate()
        return clip, out


class Discriminator(Module):
    """Temporal-conv feature extractor, per-style head, and MCR refiner."""

    def __init__(self, n_joints: int, d_hidden: int, depth: int, n_styles: int,
                 rng, use_skew: bool = True, use_kurt: bool = True,
                 eps_stats: float = 1e-5):
        d_in = FEATURE_DIM * n_joints
        dims = [d_in] + [d_hidden] * depth
        self.convs = [Conv1d(dims[i], dims[i + 1], rng) for i in range(depth)]
        self.head = Linear(d_hidden, n_styles, rng)
        self.use_skew = use_skew
        self.use_kurt = use_kurt
        self.eps_stats = eps_stats
        n_stats = 2 + int(use_skew) + int(use_kurt)
        self.refine1 = Linear(d_hidden * (1 + n_stats), d_hidden, rng)
        self.refine2 = Linear(d_hidden, d_hidden, rng)
        self.n_styles = n_styles

    def extract(self, features, mask) -> LatentCode:
        """D_0: frame-preserving feature stack over the valid prefix."""
        mask = np.asarray(mask, dtype=bool)
        n = int(mask.sum())
        if n == 0:
            raise ContractError("cannot discriminate an all-masked clip")
        z = _flatten_joints(ad.as_tensor(features), n)
        for conv in self.convs:
            z = ad.leaky_relu(conv(z))
        return LatentCode(_pad_frames(z, int(mask.shape[0])), mask)

    def logits(self, z: LatentCode) -> Tensor:
        """D_1: one score per style class from mean-pooled valid frames."""
        pooled = ad.mean(z.values[:, : z.n_valid], axis=1, keepdims=True)
        return ad.reshape(self.head(pooled), (self.n_styles,))

    def discriminate(self, clip: MotionClip):
        z = self.extract(Tensor(clip.features), clip.mask)
        return z, self.logits(z)

    def refine(self, z: LatentCode) -> LatentCode:
        """MCR module: moment augmentation, then linear -> leaky -> linear."""
        vals = z.values[:, : z.n_valid]
        aug = simple_sdm(vals, eps=self.eps_stats,
                         use_skew=self.use_skew, use_kurt=self.use_kurt)
        r = self.refine2(ad.leaky_relu(self.refine1(aug)))
        return LatentCode(_pad_frames(r, z.frame_len), z.mask)


def random_crop_pair(clip: MotionClip, rng, crop_min: int | None = None):
    """Two disjoint contiguous windows of the valid region, re-masked to the
    clip's frame length. Returns None (skip signal) if the clip is too short.

    The window length is uniform in [crop_min, n_valid // 2]; both windows
    share it, so their valid regions are prefixes of equal length.
    """
    valid = clip.n_valid
    if crop_min is None:
        crop_min = max(1, clip.frame_len // 8)
    if valid < 2 * crop_min:
        return None
    length = int(rng.integers(crop_min, valid // 2 + 1))
    start1 = int(rng.integers(0, valid - 2 * length + 1))
    start2 = int(rng.integers(start1 + length, valid - length + 1))

    def cut(start):
        feats = np.zeros_like(clip.features)
        feats[:, :length, :] = clip.features[:, start : start + length, :]
        mask = np.zeros(clip.frame_len, dtype=bool)
        mask[:length] = True
        piece = MotionClip(feats, mask, clip.skeleton, clip.frame_time,
                           clip.style_label, clip.content_label)
        piece.validate()
        return piece

    return cut(start1), cut(start2)
