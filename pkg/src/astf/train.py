"""Adversarial training loop: one discriminator update then one generator
update per iteration, Adam for both, with per-term loss reporting, ablation
switches, CSV logging, and resumable checkpoints.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .ioutil import atomic_write_text
from .losses import (
    LossReport,
    d_adversarial,
    detached,
    g_adversarial,
    loss_recon_and_cycles,
    loss_ss,
    loss_style_align,
    r1_penalty,
    sim,
)
from .motion import FEATURE_DIM, MotionClip
from .networks import Discriminator, Generator


class NumericError(RuntimeError):
    """A loss term became NaN; names the term."""


class Adam:
    def __init__(self, named_params, lr: float, beta1: float = 0.9,
                 beta2: float = 0.99, eps: float = 1e-8):
        self.items = list(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.items}
        self.v = {name: np.zeros_like(p.data) for name, p in self.items}

    def zero_grad(self):
        for _, p in self.items:
            p.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.items:
            if p.grad is None:
                continue
            g = p.grad.data
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}

    def load_state(self, state: dict):
        self.t = int(state["t"])
        for name, _ in self.items:
            self.m[name] = state["m"][name].copy()
            self.v[name] = state["v"][name].copy()


def clip_gradients(params, max_norm: float):
    total = 0.0
    grads = [p.grad.data for p in params if p.grad is not None]
    for g in grads:
        total += float((g * g).sum())
    norm = np.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = Tensor(p.grad.data * scale)
    return norm


def build_models(cfg: TrainConfig, rng):
    gen = Generator(
        n_joints=cfg.n_joints, d_embed=cfg.d_embed, d_model=cfg.d_model,
        d_proj=cfg.d_proj, enc_blocks=cfg.enc_blocks, dec_blocks=cfg.dec_blocks,
        heads=cfg.heads, ff_mult=cfg.ff_mult, rng=rng,
        d_stat_inner=cfg.d_stat_inner, use_simple_sdm=cfg.use_simple_sdm,
        use_skew=cfg.use_skew, use_kurt=cfg.use_kurt,
        eps_stats=cfg.eps_stats, eps_in=cfg.eps_in,
    )
    disc = Discriminator(
        cfg.n_joints, cfg.d_disc, cfg.disc_blocks, cfg.n_styles, rng,
        use_skew=cfg.use_skew, use_kurt=cfg.use_kurt, eps_stats=cfg.eps_stats,
    )
    return gen, disc


def _check_finite(name: str, value: float) -> float:
    if not np.isfinite(value):
        raise NumericError(f"loss term {name!r} is not finite: {value}")
    return value


def _mean(terms):
    return sum(terms[1:], terms[0]) / float(len(terms))


def train_step(batch, gen: Generator, disc: Discriminator, opt_g: Adam,
               opt_d: Adam, cfg: TrainConfig, rng) -> LossReport:
    """One discriminator update then one generator update on a batch of
    (content_clip, style_clip, style_label_index) triples."""
    report = LossReport()

    # Discriminator phase: adversarial + R1 + weighted consistency terms.
    # Real and fake feature passes are shared between the adversarial, R1,
    # and style-generation terms.
    opt_d.zero_grad()
    opt_g.zero_grad()
    adv_d_terms, r1_terms, ss_terms, sgn_terms = [], [], [], []
    for content, style, label in batch:
        with ad.no_grad():
            fake = gen.forward_clips(content, style)
        x_real = Tensor(style.features.copy(), requires_grad=True)
        z_real = disc.extract(x_real, style.mask)
        logit_real = disc.logits(z_real)[label : label + 1]
        z_fake = disc.extract(fake.features, fake.mask)
        logit_fake = disc.logits(z_fake)[label : label + 1]
        adv_d_terms.append(
            ad.reshape(ad.softplus(-logit_real) + ad.softplus(logit_fake), ())
        )
        (gx,) = ad.grad(ad.sum_(logit_real), [x_real], create_graph=True)
        r1_terms.append((cfg.r1_gamma / 2.0) * ad.sum_(gx * gx))
        if cfg.use_mcr_ss:
            term, _ = loss_ss(style, disc, rng, cfg.effective_crop_min())
            if term is not None:
                ss_terms.append(term)
        if cfg.use_mcr_sgn:
            omega = min(z_fake.n_valid, z_real.n_valid)
            sgn_terms.append(
                (1.0 / 3.0) * sim(disc.refine(z_fake), detached(z_real), omega)
            )

    adv_d = _mean(adv_d_terms)
    r1 = _mean(r1_terms)
    total_d = adv_d + r1
    report.adv_d = _check_finite("adv_D", float(adv_d.data))
    report.r1 = _check_finite("r1", float(r1.data))
    if ss_terms:
        ss = _mean(ss_terms)
        report.ss = _check_finite("ss", float(ss.data))
        total_d = total_d + cfg.lambda_mcr * ss
    if sgn_terms:
        sgn = _mean(sgn_terms)
        report.sgn = _check_finite("sgn", float(sgn.data))
        total_d = total_d + cfg.lambda_mcr * sgn
    report.total_d = report.adv_d + report.r1 + cfg.lambda_mcr * (report.ss + report.sgn)
    ad.backward(total_d)
    if cfg.grad_clip > 0:
        clip_gradients([p for _, p in opt_d.items], cfg.grad_clip)
    opt_d.step()

    # Generator phase: adversarial + reconstruction + cycles + alignment.
    opt_g.zero_grad()
    opt_d.zero_grad()
    adv_g_terms, recon_terms, cyc_c_terms, cyc_s_terms, align_terms = [], [], [], [], []
    for content, style, label in batch:
        out = gen.forward_clips(content, style)
        adv_g_terms.append(g_adversarial(disc, out.features, out.mask, label))
        recon, cyc_c, cyc_s = loss_recon_and_cycles(content, style, gen, main=out)
        recon_terms.append(recon)
        cyc_c_terms.append(cyc_c)
        cyc_s_terms.append(cyc_s)
        if cfg.use_style_align:
            e_g = gen.style_encoder(out.features, out.mask)
            align_terms.append(loss_style_align(e_g, out.e_style))

    adv_g, recon = _mean(adv_g_terms), _mean(recon_terms)
    cyc_c, cyc_s = _mean(cyc_c_terms), _mean(cyc_s_terms)
    report.adv_g = _check_finite("adv_G", float(adv_g.data))
    report.recon = _check_finite("recon", float(recon.data))
    report.cyc_content = _check_finite("cyc_c", float(cyc_c.data))
    report.cyc_style = _check_finite("cyc_s", float(cyc_s.data))
    total_g = adv_g + cfg.lambda_r * recon + cfg.lambda_c * (cyc_c + cyc_s)
    if align_terms:
        align = _mean(align_terms)
        report.align = _check_finite("align", float(align.data))
        total_g = total_g + cfg.lambda_a * align
    report.total_g = (report.adv_g + cfg.lambda_r * report.recon
                      + cfg.lambda_c * (report.cyc_content + report.cyc_style)
                      + cfg.lambda_a * report.align)
    ad.backward(total_g)
    if cfg.grad_clip > 0:
        clip_gradients([p for _, p in opt_g.items], cfg.grad_clip)
    opt_g.step()
    return report


def style_vocabulary(clips) -> dict:
    labels = sorted({c.style_label for c in clips if c.style_label is not None})
    if not labels:
        raise ValueError("training clips carry no style labels")
    return {label: i for i, label in enumerate(labels)}


def _log_text(rows) -> str:
    header = "iter," + ",".join(LossReport.CSV_FIELDS)
    lines = [header]
    for it, rep in rows:
        lines.append(f"{it}," + ",".join(repr(v) for v in rep.csv_values()))
    return "\n".join(lines) + "\n"


def train(clips, cfg: TrainConfig, out_dir, resume=None, force: bool = False):
    """Run the loop; returns (checkpoint_path, log_path, reports).

    Periodic checkpoints carry everything needed to resume bit-identically:
    parameters, Adam moments, iteration counter, and the RNG state.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for clip in clips:
        if clip.frame_len != cfg.frame_len or clip.n_joints != cfg.n_joints:
            raise ValueError(
                f"clip shape {clip.features.shape} does not match config "
                f"(frame_len={cfg.frame_len}, n_joints={cfg.n_joints})"
            )
    vocab = style_vocabulary(clips)
    if len(vocab) > cfg.n_styles:
        raise ValueError(f"{len(vocab)} styles in data but n_styles={cfg.n_styles}")

    rng = np.random.default_rng(cfg.seed)
    gen, disc = build_models(cfg, rng)
    opt_g = Adam(list(gen.named_parameters()), cfg.lr_g, cfg.adam_beta1, cfg.adam_beta2)
    opt_d = Adam(list(disc.named_parameters()), cfg.lr_d, cfg.adam_beta1, cfg.adam_beta2)

    start = 0
    rows = []
    ckpt_path = out_dir / "checkpoint.astfckpt"
    log_path = out_dir / "loss_log.csv"
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.config_hash != cfg.config_hash() and not force:
            raise CheckpointError(
                "checkpoint config hash does not match this config (use force to override)"
            )
        gen.load_state(ckpt.gen_state)
        disc.load_state(ckpt.disc_state)
        opt_g.load_state(ckpt.opt_g_state)
        opt_d.load_state(ckpt.opt_d_state)
        rng.bit_generator.state = ckpt.rng_state
        start = ckpt.iteration
        if log_path.exists():
            existing = log_path.read_text().splitlines()[1:]
            for line in existing:
                it_s = line.split(",", 1)[0]
                if int(it_s) <= start:
                    rep = LossReport(*[float(v) for v in line.split(",")[1:]])
                    rows.append((int(it_s), rep))

    def snapshot(iteration: int) -> Checkpoint:
        return Checkpoint(
            iteration=iteration,
            config_hash=cfg.config_hash(),
            gen_state=gen.state(),
            disc_state=disc.state(),
            opt_g_state=opt_g.state(),
            opt_d_state=opt_d.state(),
            rng_state=rng.bit_generator.state,
        )

    reports = []
    n = len(clips)
    for it in range(start + 1, cfg.iterations + 1):
        batch = []
        for _ in range(cfg.batch_size):
            ci = int(rng.integers(0, n))
            si = int(rng.integers(0, n))
            batch.append((clips[ci], clips[si], vocab[clips[si].style_label]))
        report = train_step(batch, gen, disc, opt_g, opt_d, cfg, rng)
        reports.append(report)
        if it % cfg.log_interval == 0:
            rows.append((it, report))
            atomic_write_text(log_path, _log_text(rows))
        if it % cfg.checkpoint_interval == 0 or it == cfg.iterations:
            save_checkpoint(snapshot(it), ckpt_path)
    if start >= cfg.iterations:
        save_checkpoint(snapshot(start), ckpt_path)
        atomic_write_text(log_path, _log_text(rows))
    return ckpt_path, log_path, reports


def load_models(ckpt: Checkpoint, cfg: TrainConfig, force: bool = False):
    """Rebuild generator/discriminator from a checkpoint under a config."""
    if ckpt.config_hash != cfg.config_hash() and not force:
        raise CheckpointError(
            "checkpoint config hash does not match this config (use force to override)"
        )
    rng = np.random.default_rng(cfg.seed)
    gen, disc = build_models(cfg, rng)
    gen.load_state(ckpt.gen_state)
    disc.load_state(ckpt.disc_state)
    return gen, disc
