import dataclasses

import numpy as np
import pytest

from astf import autodiff as ad
from astf.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from astf.config import ConfigError, TrainConfig, load_config, parse_config
from astf.losses import LossReport
from astf.train import Adam, NumericError, build_models, style_vocabulary, train, train_step
from synthdata import toy_corpus


def small_cfg(**overrides):
    base = dict(
        frame_len=16, n_joints=2, n_styles=2, d_embed=4, d_model=6, d_proj=6,
        d_stat_inner=3, enc_blocks=1, dec_blocks=1, heads=1, ff_mult=2,
        d_disc=6, disc_blocks=2, batch_size=2, iterations=4, seed=7,
        log_interval=1, checkpoint_interval=2, lr_g=1e-3, lr_d=1e-4,
        crop_min=3,
    )
    base.update(overrides)
    return TrainConfig(**base)


def small_corpus(seed=0):
    return toy_corpus(n_per_combo=2, n_joints=2, frame_len=16, seed=seed)


def make_batch(clips, cfg, rng):
    vocab = style_vocabulary(clips)
    batch = []
    for _ in range(cfg.batch_size):
        ci, si = int(rng.integers(0, len(clips))), int(rng.integers(0, len(clips)))
        batch.append((clips[ci], clips[si], vocab[clips[si].style_label]))
    return batch


def run_steps(cfg, n_steps=2, corpus_seed=0):
    clips = small_corpus(corpus_seed)
    rng = np.random.default_rng(cfg.seed)
    gen, disc = build_models(cfg, rng)
    opt_g = Adam(list(gen.named_parameters()), cfg.lr_g, cfg.adam_beta1, cfg.adam_beta2)
    opt_d = Adam(list(disc.named_parameters()), cfg.lr_d, cfg.adam_beta1, cfg.adam_beta2)
    reports = []
    for _ in range(n_steps):
        batch = make_batch(clips, cfg, rng)
        reports.append(train_step(batch, gen, disc, opt_g, opt_d, cfg, rng))
    return reports, gen, disc


class TestConfig:
    def test_defaults_match_published_hyperparameters(self):
        cfg = TrainConfig()
        assert (cfg.lambda_mcr, cfg.lambda_r, cfg.lambda_c, cfg.lambda_a) == (1.0, 3.0, 3.0, 1.0)
        assert cfg.lr_g == 1e-5 and cfg.lr_d == 1e-6
        assert cfg.adam_beta1 == 0.9 and cfg.adam_beta2 == 0.99
        assert cfg.batch_size == 16
        assert cfg.frame_len == 200 and cfg.n_joints == 21

    def test_dump_parse_round_trip(self):
        cfg = small_cfg(lambda_a=2.5, use_skew=False)
        again = parse_config(cfg.dump())
        assert again == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            parse_config("not_a_key = 3\n")

    def test_bad_value_rejected(self):
        with pytest.raises(ConfigError, match="bad value"):
            parse_config("batch_size = many\n")

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("# comment\nlambda_r = 5.0\nuse_kurt = false\n")
        cfg = load_config(path)
        assert cfg.lambda_r == 5.0 and cfg.use_kurt is False

    def test_hash_ignores_loop_fields_only(self):
        cfg = small_cfg()
        assert cfg.config_hash() == dataclasses.replace(cfg, iterations=999, seed=1).config_hash()
        assert cfg.config_hash() != dataclasses.replace(cfg, d_model=8).config_hash()
        assert cfg.config_hash() != dataclasses.replace(cfg, use_skew=False).config_hash()


class TestTrainStep:
    def test_composition_identities_every_step(self):
        cfg = small_cfg()
        reports, _, _ = run_steps(cfg, n_steps=3)
        for rep in reports:
            rep.check_identities(cfg, tol=1e-9)

    def test_all_mcr_flags_off_reduces_total_d(self):
        cfg = small_cfg(use_mcr_ss=False, use_mcr_sgn=False)
        reports, _, _ = run_steps(cfg)
        for rep in reports:
            assert rep.ss == 0.0 and rep.sgn == 0.0
            assert rep.total_d == rep.adv_d + rep.r1

    def test_style_align_flag_off(self):
        cfg = small_cfg(use_style_align=False)
        reports, _, _ = run_steps(cfg)
        assert all(rep.align == 0.0 for rep in reports)

    def test_determinism_ten_steps(self):
        cfg = small_cfg(iterations=10)
        a, _, _ = run_steps(cfg, n_steps=10)
        b, _, _ = run_steps(cfg, n_steps=10)
        for ra, rb in zip(a, b):
            assert ra == rb  # dataclass equality over exact floats

    def test_nan_input_aborts_with_term_name(self):
        cfg = small_cfg()
        clips = small_corpus()
        bad = clips[0]
        bad.features[0, 0, 0] = np.nan
        rng = np.random.default_rng(0)
        gen, disc = build_models(cfg, rng)
        opt_g = Adam(list(gen.named_parameters()), cfg.lr_g)
        opt_d = Adam(list(disc.named_parameters()), cfg.lr_d)
        batch = [(bad, bad, 0)]
        with pytest.raises(NumericError, match="loss term"):
            train_step(batch, gen, disc, opt_g, opt_d, cfg, rng)

    def test_parameters_stay_finite(self):
        cfg = small_cfg()
        _, gen, disc = run_steps(cfg, n_steps=3)
        for p in gen.parameters() + disc.parameters():
            assert np.isfinite(p.data).all()


class TestAblationAudit:
    """Disabling a term must remove exactly its gradient contribution."""

    @pytest.mark.parametrize("term", ["ss", "sgn", "align"])
    def test_gradient_path_audit(self, term):
        from astf.losses import (d_adversarial, detached, g_adversarial,
                                 loss_recon_and_cycles, loss_ss, loss_sgn,
                                 loss_style_align, r1_penalty, sim)
        from astf.autodiff import Tensor

        cfg = small_cfg()
        clips = small_corpus()
        rng = np.random.default_rng(3)
        gen, disc = build_models(cfg, rng)
        content, style, label = clips[0], clips[2], 1

        if term in ("ss", "sgn"):
            params = disc.parameters()

            def base_loss():
                with ad.no_grad():
                    fake = gen.forward_clips(content, style)
                return d_adversarial(disc, style, fake.features, fake.mask, label) \
                    + r1_penalty(disc, style, label, cfg.r1_gamma)

            def term_loss():
                if term == "ss":
                    t, _ = loss_ss(style, disc, np.random.default_rng(11), crop_min=3)
                    return cfg.lambda_mcr * t
                with ad.no_grad():
                    fake = gen.forward_clips(content, style)
                t, _ = loss_sgn(fake.features, fake.mask, style, disc)
                return cfg.lambda_mcr * t
        else:
            params = gen.parameters()

            def base_loss():
                out = gen.forward_clips(content, style)
                recon, cyc_c, cyc_s = loss_recon_and_cycles(content, style, gen, main=out)
                return (g_adversarial(disc, out.features, out.mask, label)
                        + cfg.lambda_r * recon + cfg.lambda_c * (cyc_c + cyc_s))

            def term_loss():
                out = gen.forward_clips(content, style)
                e_g = gen.style_encoder(out.features, out.mask)
                return cfg.lambda_a * loss_style_align(e_g, out.e_style)

        g_without = ad.grad(base_loss(), params)
        g_term = ad.grad(term_loss(), params)
        g_with = ad.grad(base_loss() + term_loss(), params)
        for gw, go, gt in zip(g_with, g_without, g_term):
            assert np.allclose(gw.data, go.data + gt.data, atol=1e-10)

    def test_simple_sdm_flag_swaps_token_parameters(self):
        cfg_on = small_cfg()
        cfg_off = small_cfg(use_simple_sdm=False)
        gen_on, _ = build_models(cfg_on, np.random.default_rng(0))
        gen_off, _ = build_models(cfg_off, np.random.default_rng(0))
        names_on = {n for n, _ in gen_on.named_parameters()}
        names_off = {n for n, _ in gen_off.named_parameters()}
        assert names_off - names_on == {
            "content_encoder.style_token", "style_encoder.style_token",
        }
        assert names_on - names_off == set()

    @pytest.mark.parametrize("flag,stat", [("use_skew", "skew"), ("use_kurt", "kurt")])
    def test_moment_flags_shrink_statistic_paths(self, flag, stat):
        cfg_off = small_cfg(**{flag: False})
        gen_off, disc_off = build_models(cfg_off, np.random.default_rng(0))
        gen_on, disc_on = build_models(small_cfg(), np.random.default_rng(0))
        assert len(gen_off.hos.cross) == 3
        assert stat not in gen_off.hos.stat_names
        # Encoder widths and refiner widths shrink by one moment block.
        on_w = gen_on.content_encoder.in_proj.weight.shape[1]
        off_w = gen_off.content_encoder.in_proj.weight.shape[1]
        assert on_w - off_w == small_cfg().d_embed
        assert (disc_on.refine1.weight.shape[1] - disc_off.refine1.weight.shape[1]
                == small_cfg().d_disc)
        # Training still runs and reports clean identities.
        reports, _, _ = run_steps(cfg_off, n_steps=1)
        reports[0].check_identities(cfg_off)


class TestTrainLoop:
    def test_log_row_count(self, tmp_path):
        cfg = small_cfg(iterations=6, log_interval=2, checkpoint_interval=3)
        _, log_path, _ = train(small_corpus(), cfg, tmp_path / "run")
        rows = log_path.read_text().splitlines()
        assert rows[0].startswith("iter,adv_G,adv_D,r1,ss,sgn,recon,cyc_c,cyc_s,align")
        assert len(rows) - 1 == cfg.iterations // cfg.log_interval

    def test_checkpoint_round_trip_bytes(self, tmp_path):
        cfg = small_cfg(iterations=2, checkpoint_interval=2)
        ckpt_path, _, _ = train(small_corpus(), cfg, tmp_path / "run")
        ckpt = load_checkpoint(ckpt_path)
        second = tmp_path / "again.astfckpt"
        save_checkpoint(ckpt, second)
        assert ckpt_path.read_bytes() == second.read_bytes()

    def test_resume_equivalence(self, tmp_path):
        cfg_full = small_cfg(iterations=4, checkpoint_interval=2, log_interval=1)
        full_ckpt, full_log, _ = train(small_corpus(), cfg_full, tmp_path / "full")

        cfg_half = small_cfg(iterations=2, checkpoint_interval=2, log_interval=1)
        half_ckpt, _, _ = train(small_corpus(), cfg_half, tmp_path / "split")
        resumed_ckpt, resumed_log, _ = train(
            small_corpus(), cfg_full, tmp_path / "split", resume=half_ckpt
        )
        assert full_ckpt.read_bytes() == resumed_ckpt.read_bytes()
        assert full_log.read_text() == resumed_log.read_text()

    def test_config_hash_mismatch_refused(self, tmp_path):
        cfg = small_cfg(iterations=2, checkpoint_interval=2)
        ckpt_path, _, _ = train(small_corpus(), cfg, tmp_path / "run")
        other = small_cfg(iterations=4, d_model=8)
        with pytest.raises(CheckpointError, match="hash"):
            train(small_corpus(), other, tmp_path / "run2", resume=ckpt_path)

    def test_unlabeled_clips_rejected(self, tmp_path):
        clips = small_corpus()
        for c in clips:
            c.style_label = None
        with pytest.raises(ValueError, match="style labels"):
            train(clips, small_cfg(iterations=1), tmp_path / "run")

    def test_shape_mismatch_rejected(self, tmp_path):
        cfg = small_cfg(frame_len=32)
        with pytest.raises(ValueError, match="does not match config"):
            train(small_corpus(), cfg, tmp_path / "run")


class TestAdamOptimizer:
    def test_converges_on_quadratic(self):
        from astf.autodiff import Tensor

        x = Tensor(np.array([4.0, -3.0]), requires_grad=True)
        opt = Adam([("x", x)], lr=0.1)
        for _ in range(400):
            opt.zero_grad()
            ad.backward(ad.sum_(x * x))
            opt.step()
        assert np.abs(x.data).max() < 1e-3

    def test_state_round_trip(self):
        from astf.autodiff import Tensor

        x = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam([("x", x)], lr=0.05)
        opt.zero_grad()
        ad.backward(ad.sum_(x * x))
        opt.step()
        st = opt.state()
        opt2 = Adam([("x", x)], lr=0.05)
        opt2.load_state(st)
        assert opt2.t == opt.t
        assert np.array_equal(opt2.m["x"], opt.m["x"])
