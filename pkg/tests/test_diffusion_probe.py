import math

import pytest
import torch

from config.schema import DiffusionConfig
from core.diffusion_probe import (
    Denoiser,
    NoiseSchedule,
    alpha_sigma,
    evaluate_v_mse,
    expected_v_power,
    extract_latents,
    logsnr,
    noise_latent,
    predictability_score,
    probe_report,
    recover_from_v,
    sample,
    train_denoiser,
    v_target,
)
from core.datasets import build_dataset
from core.trainer import build_state, save_checkpoint, train
from utilities.error_handler import FailedPreconditionError, InvalidArgumentError


def small_cfg(**overrides):
    base = dict(width=16, depth=1, steps=20, batch_size=16, lr=1e-3, sampler_steps=4, eval_repeats=2)
    base.update(overrides)
    return DiffusionConfig(**base)


class TestSchedule:
    def test_shifted_midpoint(self):
        assert logsnr(0.5) == pytest.approx(2 * math.log(0.5))
        a, s = alpha_sigma(0.5)
        assert a == pytest.approx(0.44721, abs=1e-5)
        assert s == pytest.approx(0.89443, abs=1e-5)
        assert a ** 2 == pytest.approx(0.2)

    def test_unshifted_midpoint(self):
        assert logsnr(0.5, shift_s=0.0) == pytest.approx(0.0, abs=1e-12)
        a, s = alpha_sigma(0.5, shift_s=0.0)
        assert a == pytest.approx(1 / math.sqrt(2)) and s == pytest.approx(1 / math.sqrt(2))

    def test_limits(self):
        a, s = alpha_sigma(1e-9)
        assert a == pytest.approx(1.0, abs=1e-6) and s < 1e-6
        a, s = alpha_sigma(1 - 1e-9)
        assert a < 1e-6 and s == pytest.approx(1.0, abs=1e-6)

    def test_variance_preserving(self):
        t = torch.linspace(0.01, 0.99, 50, dtype=torch.float64)
        a, s = alpha_sigma(t)
        assert torch.allclose(a ** 2 + s ** 2, torch.ones_like(t), atol=1e-9)

    def test_alpha_decreases(self):
        a, _ = alpha_sigma(torch.linspace(0.01, 0.99, 50, dtype=torch.float64))
        assert bool((a[1:] < a[:-1]).all())

    @pytest.mark.parametrize("t", [0.0, 1.0, -0.2, 1.5])
    def test_out_of_range(self, t):
        with pytest.raises(InvalidArgumentError):
            logsnr(t)
        with pytest.raises(InvalidArgumentError):
            alpha_sigma(torch.tensor([0.5, t]))

    def test_sample_t_within_bounds(self):
        t = NoiseSchedule(t_eps=0.01).sample_t(1000, torch.Generator().manual_seed(0))
        assert float(t.min()) >= 0.01 and float(t.max()) <= 0.99


class TestVParameterization:
    def test_v_limits(self):
        z, eps = torch.randn(2, 3, 4), torch.randn(2, 3, 4)
        assert torch.allclose(v_target(z, eps, 1e-9), eps, atol=1e-5)
        assert torch.allclose(v_target(z, eps, 1 - 1e-9), -z, atol=1e-5)

    def test_round_trip(self):
        gen = torch.Generator().manual_seed(1)
        z = torch.randn(4, 5, 3, generator=gen, dtype=torch.float64)
        eps = torch.randn(4, 5, 3, generator=gen, dtype=torch.float64)
        t = torch.rand(4, generator=gen, dtype=torch.float64) * 0.98 + 0.01
        z_t = noise_latent(z, eps, t)
        z_hat, eps_hat = recover_from_v(z_t, v_target(z, eps, t), t)
        assert torch.allclose(z_hat, z, atol=1e-10)
        assert torch.allclose(eps_hat, eps, atol=1e-10)

    def test_near_zero_t_recovers_noisy_latent(self):
        z_t, v = torch.randn(1, 2, 3), torch.randn(1, 2, 3)
        z_hat, _ = recover_from_v(z_t, v, 1e-9)
        assert torch.allclose(z_hat, z_t, atol=1e-5)

    def test_matches_hand_algebra(self):
        a, s = 0.6, 0.8
        t = 2 / math.pi * math.atan(math.exp(-(math.log(a * a / (s * s)) - 2 * math.log(0.5)) / 2))
        z = torch.tensor([[[2.0]]], dtype=torch.float64)
        eps = torch.tensor([[[-1.0]]], dtype=torch.float64)
        assert float(noise_latent(z, eps, t)) == pytest.approx(a * 2.0 + s * -1.0, abs=1e-9)
        assert float(v_target(z, eps, t)) == pytest.approx(a * -1.0 - s * 2.0, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            v_target(torch.zeros(1, 2, 3), torch.zeros(1, 2, 4), 0.5)


class TestDenoiser:
    def test_zero_output_at_init(self):
        net = Denoiser(latent_dim=3, width=8, depth=2)
        out = net(torch.randn(2, 5, 3), torch.rand(2))
        assert torch.equal(out, torch.zeros(2, 5, 3))

    def test_dim_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            Denoiser(latent_dim=3)(torch.zeros(1, 2, 4), torch.rand(1))

    def test_conditioned_needs_labels(self):
        net = Denoiser(latent_dim=2, width=8, depth=1, num_classes=3)
        with pytest.raises(InvalidArgumentError):
            net(torch.zeros(1, 2, 2), torch.rand(1))
        assert net(torch.zeros(1, 2, 2), torch.rand(1), torch.tensor([2])).shape == (1, 2, 2)


class TestTraining:
    def test_initial_loss_matches_expected_power(self):
        latents = torch.randn(64, 6, 4, generator=torch.Generator().manual_seed(2)) * 1.7 + 0.3
        run = train_denoiser(small_cfg(lr=0.0, steps=200, batch_size=64), latents)
        assert sum(run.losses) / len(run.losses) == pytest.approx(expected_v_power(latents), rel=0.05)

    def test_zero_lr_keeps_weights(self):
        run = train_denoiser(small_cfg(lr=0.0, steps=3), torch.randn(8, 4, 2))
        assert torch.equal(run.denoiser.out_proj.weight, torch.zeros_like(run.denoiser.out_proj.weight))

    def test_seeded(self):
        latents = torch.randn(8, 4, 2)
        a = train_denoiser(small_cfg(steps=5), latents)
        b = train_denoiser(small_cfg(steps=5), latents)
        assert a.losses == b.losses

    def test_dim_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            train_denoiser(small_cfg(latent_dim=3), torch.randn(4, 2, 2))

    def test_conditioning_needs_labels(self):
        with pytest.raises(InvalidArgumentError):
            train_denoiser(small_cfg(conditioning="class_label"), torch.randn(4, 2, 2))

    def test_expected_power_of_unit_latents_is_one(self):
        assert expected_v_power(torch.ones(10, 3, 2)) == pytest.approx(1.0, abs=1e-6)

    def test_evaluation_and_sampling(self):
        latents = torch.randn(8, 4, 2)
        run = train_denoiser(small_cfg(steps=5), latents)
        mse, power = evaluate_v_mse(run.denoiser, latents, run.schedule, repeats=2, seed=0)
        assert mse > 0 and power > 0
        samples = sample(run.denoiser, (3, 4, 2), steps=1, seed=0, schedule=run.schedule)
        assert samples.shape == (3, 4, 2) and torch.isfinite(samples).all()
        assert torch.equal(samples, sample(run.denoiser, (3, 4, 2), steps=1, seed=0, schedule=run.schedule))

    def test_sampler_needs_a_step(self):
        with pytest.raises(InvalidArgumentError):
            sample(Denoiser(2, 8, 1), (1, 2, 2), steps=0, seed=0)

    @pytest.mark.slow
    def test_learns_a_one_dimensional_gaussian(self):
        gen = torch.Generator().manual_seed(3)
        latents = torch.randn(512, 1, 1, generator=gen) * 0.5 + 2.0
        run = train_denoiser(small_cfg(width=64, depth=2, steps=2000, batch_size=128, lr=2e-3), latents)
        samples = sample(run.denoiser, (1000, 1, 1), steps=50, seed=4, schedule=run.schedule)
        assert float(samples.mean()) == pytest.approx(2.0, rel=0.15)
        assert float(samples.var()) == pytest.approx(0.25, rel=0.3)

    @pytest.mark.slow
    def test_loss_decreases_on_class_tones(self, make_config, tmp_path):
        cfg = make_config(steps=50, dataset={"n_items": 16, "classes": ["sine_mix", "chirp"], "segment_s": 0.2})
        result = train(cfg, output_dir=tmp_path)
        dataset = build_dataset(cfg.dataset, cfg.model)
        latents = extract_latents(result.state.model, dataset)
        run = train_denoiser(small_cfg(width=32, depth=2, steps=2000), latents)
        head = sum(run.losses[:50]) / 50
        tail = sum(run.losses[-50:]) / 50
        assert tail <= 0.7 * head


class TestProbe:
    def test_untrained_vae_is_rejected(self, tiny_config, tmp_path):
        path = save_checkpoint(build_state(tiny_config), tmp_path / "fresh.ckpt")
        with pytest.raises(FailedPreconditionError):
            predictability_score(path, small_cfg())

    def test_latent_dim_must_match(self, tiny_config, tmp_path):
        result = train(tiny_config, output_dir=tmp_path)
        with pytest.raises(InvalidArgumentError):
            probe_report(result.checkpoint_path, small_cfg(latent_dim=7))

    def test_report(self, tiny_config, tmp_path):
        result = train(tiny_config, output_dir=tmp_path / "vae")
        report = probe_report(result.checkpoint_path, small_cfg())
        assert report["vae_id"] == report["model_id"] == "vae"
        assert report["mel_distance"] == pytest.approx(result.mel_distance)
        assert report["measured_bitrate"] == pytest.approx(40 * report["measured_kl"] / math.log(2))
        assert 0 <= report["predictability_score"] < 10
        assert report == probe_report(result.checkpoint_path, small_cfg())

    def test_class_conditioned_report(self, tiny_config, tmp_path):
        result = train(tiny_config, output_dir=tmp_path)
        score = predictability_score(result.checkpoint_path, small_cfg(conditioning="class_label"))
        assert math.isfinite(score)

    def test_extract_latents_shape(self, tiny_config):
        model = build_state(tiny_config).model
        dataset = build_dataset(tiny_config.dataset, tiny_config.model)
        assert extract_latents(model, dataset).shape == (8, 2, 4)
