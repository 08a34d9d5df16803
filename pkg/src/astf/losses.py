"""Loss terms: frame-wise cosine consistency, class-conditional adversarial
losses with the R1 penalty, reconstruction/cycle terms, and style alignment.

Every reduction is restricted to the valid temporal region Omega; padded
frames contribute nothing, exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ShapeMismatch, Tensor
from .motion import MotionClip
from .networks import Discriminator, GenOut, Generator, LatentCode, random_crop_pair


def detached(code: LatentCode) -> LatentCode:
    return LatentCode(ad.stop_gradient(code.values), code.mask)


def sim(r: LatentCode, z: LatentCode, n_valid: int | None = None,
        eps: float = 1e-12) -> Tensor:
    """Sum over valid frames of the negated cosine of the per-frame columns.

    Range is [-|Omega|, |Omega|]; equal codes give -|Omega|.
    """
    if r.values.shape != z.values.shape:
        raise ShapeMismatch(f"codes disagree: {r.values.shape} vs {z.values.shape}")
    omega = min(r.n_valid, z.n_valid) if n_valid is None else n_valid
    if omega < 1:
        raise ContractError("empty valid region")
    rv = r.values[:, :omega]
    zv = z.values[:, :omega]
    rn = rv / (ad.sqrt(ad.sum_(rv * rv, axis=0, keepdims=True)) + eps)
    zn = zv / (ad.sqrt(ad.sum_(zv * zv, axis=0, keepdims=True)) + eps)
    return -ad.sum_(rn * zn)


def loss_ss(style: MotionClip, disc: Discriminator, rng,
            crop_min: int | None = None):
    """Style-style consistency over two disjoint crops of a style motion.

    Returns (loss, omega); loss is None (skip signal) when the clip is too
    short to crop. Gradients flow only through the refined branch: the
    cross targets are stop-gradient copies of the raw features.
    """
    pair = random_crop_pair(style, rng, crop_min)
    if pair is None:
        return None, 0
    s1, s2 = pair
    z1 = disc.extract(Tensor(s1.features), s1.mask)
    z2 = disc.extract(Tensor(s2.features), s2.mask)
    r1, r2 = disc.refine(z1), disc.refine(z2)
    omega = min(z1.n_valid, z2.n_valid)
    third = 1.0 / 3.0
    loss = third * sim(r1, detached(z2), omega) + third * sim(r2, detached(z1), omega)
    return loss, omega


def loss_sgn(gen_features, gen_mask, style: MotionClip, disc: Discriminator,
             z_style: LatentCode | None = None):
    """Style-generation consistency between a generated clip and its style
    reference. ``z_style`` can reuse an existing feature pass."""
    z_g = disc.extract(ad.as_tensor(gen_features), gen_mask)
    r_g = disc.refine(z_g)
    if z_style is None:
        z_style = disc.extract(Tensor(style.features), style.mask)
    omega = min(z_g.n_valid, z_style.n_valid)
    return (1.0 / 3.0) * sim(r_g, detached(z_style), omega), omega


def class_logit(disc: Discriminator, features, mask, label: int) -> Tensor:
    z = disc.extract(ad.as_tensor(features), mask)
    return disc.logits(z)[label : label + 1]


def d_adversarial(disc: Discriminator, real: MotionClip, fake_features,
                  fake_mask, label: int):
    """Non-saturating logistic pieces for one sample's class logit."""
    real_term = ad.softplus(-class_logit(disc, Tensor(real.features), real.mask, label))
    fake_term = ad.softplus(class_logit(disc, fake_features, fake_mask, label))
    return ad.reshape(real_term + fake_term, ())


def g_adversarial(disc: Discriminator, fake_features, fake_mask, label: int):
    return ad.reshape(ad.softplus(-class_logit(disc, fake_features, fake_mask, label)), ())


def r1_penalty(disc: Discriminator, real: MotionClip, label: int,
               gamma: float) -> Tensor:
    """(gamma / 2) * ||d logit / d input||^2 on a real sample.

    Differentiable in the discriminator parameters (double backward).
    """
    x = Tensor(real.features.copy(), requires_grad=True)
    logit = ad.sum_(class_logit(disc, x, real.mask, label))
    (gx,) = ad.grad(logit, [x], create_graph=True)
    return (gamma / 2.0) * ad.sum_(gx * gx)


def adversarial_and_r1(batch, gen: Generator, disc: Discriminator,
                       r1_gamma: float = 1.0):
    """Batch-averaged (adv_G, adv_D, r1) for (content, style, label) triples.

    The generator pass feeding adv_D is detached; the one feeding adv_G is
    connected. Callers backprop the pieces selectively.
    """
    adv_g_terms, adv_d_terms, r1_terms = [], [], []
    for content, style, label in batch:
        with ad.no_grad():
            fake = gen.forward_clips(content, style)
        adv_d_terms.append(d_adversarial(disc, style, fake.features, fake.mask, label))
        r1_terms.append(r1_penalty(disc, style, label, r1_gamma))
        live = gen.forward_clips(content, style)
        adv_g_terms.append(g_adversarial(disc, live.features, live.mask, label))
    n = float(len(batch))
    total = lambda terms: sum(terms[1:], terms[0]) / n
    return total(adv_g_terms), total(adv_d_terms), total(r1_terms)


def masked_mse(a: Tensor, b: Tensor, n_valid: int) -> Tensor:
    """Mean squared difference over the valid prefix (all other axes full)."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"mse operands disagree: {a.shape} vs {b.shape}")
    av = a[:, :n_valid] if a.ndim == 2 else a[:, :n_valid, :]
    bv = b[:, :n_valid] if b.ndim == 2 else b[:, :n_valid, :]
    diff = av - bv
    return ad.mean(diff * diff)


def loss_style_align(e_g: LatentCode, e_s: LatentCode) -> Tensor:
    """L2 pull between the generated clip's style code and the reference's."""
    omega = min(e_g.n_valid, e_s.n_valid)
    return masked_mse(e_g.values, e_s.values, omega)


def loss_recon_and_cycles(content: MotionClip, style: MotionClip,
                          gen: Generator, main: GenOut | None = None):
    """(recon, cyc_content, cyc_style).

    recon: self-stylization generate(content, content) against the input.
    cyc_content: content code of the stylized clip against the original.
    cyc_style: style code of generate(stylized-as-content, style) against
    the original style code.
    """
    if main is None:
        main = gen.forward_clips(content, style)
    n_c = int(content.mask.sum())

    self_out = gen.forward_clips(content, content)
    recon = masked_mse(self_out.features, Tensor(content.features), n_c)

    e_g_content = gen.content_encoder(main.features, main.mask)
    cyc_content = masked_mse(e_g_content.values, main.e_content.values, n_c)

    second = gen.forward(main.features, main.mask,
                         Tensor(style.features), style.mask)
    e_2_style = gen.style_encoder(second.features, second.mask)
    omega = min(e_2_style.n_valid, main.e_style.n_valid)
    cyc_style = masked_mse(e_2_style.values, main.e_style.values, omega)
    return recon, cyc_content, cyc_style


@dataclass
class LossReport:
    adv_g: float = 0.0
    adv_d: float = 0.0
    r1: float = 0.0
    ss: float = 0.0
    sgn: float = 0.0
    recon: float = 0.0
    cyc_content: float = 0.0
    cyc_style: float = 0.0
    align: float = 0.0
    total_g: float = 0.0
    total_d: float = 0.0

    CSV_FIELDS = ("adv_G", "adv_D", "r1", "ss", "sgn", "recon",
                  "cyc_c", "cyc_s", "align", "total_G", "total_D")

    def csv_values(self):
        return (self.adv_g, self.adv_d, self.r1, self.ss, self.sgn, self.recon,
                self.cyc_content, self.cyc_style, self.align,
                self.total_g, self.total_d)

    def check_identities(self, cfg, tol: float = 1e-9):
        want_d = self.adv_d + self.r1 + cfg.lambda_mcr * (self.ss + self.sgn)
        want_g = (self.adv_g + cfg.lambda_r * self.recon
                  + cfg.lambda_c * (self.cyc_content + self.cyc_style)
                  + cfg.lambda_a * self.align)
        if abs(self.total_d - want_d) > tol:
            raise AssertionError(f"total_d {self.total_d} != composition {want_d}")
        if abs(self.total_g - want_g) > tol:
            raise AssertionError(f"total_g {self.total_g} != composition {want_g}")
