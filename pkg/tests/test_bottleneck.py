import math

import pytest
import torch

from config.schema import BottleneckConfig
from core.bottleneck import (
    Bottleneck,
    ResidualVectorQuantizer,
    choose_passthrough,
    gaussian_forward,
    latent_rate_nats,
    passthrough_forward,
    vq_forward,
)
from utilities.error_handler import FailedPreconditionError, InvalidArgumentError


def features(mu, log_var):
    return torch.cat([mu, log_var], dim=-1)


class TestGaussian:
    def test_eval_returns_mean_for_tiny_variance(self):
        mu = torch.randn(2, 5, 3)
        result = gaussian_forward(features(mu, torch.full_like(mu, -30.0)), training=False)
        assert torch.equal(result.z, mu)

    def test_seeded_sampling_is_deterministic(self):
        feats = torch.randn(2, 5, 6)
        a = gaussian_forward(feats, training=True, generator=123)
        b = gaussian_forward(feats, training=True, generator=123)
        assert torch.equal(a.z, b.z)

    def test_prior_has_zero_kl(self):
        result = gaussian_forward(torch.zeros(1, 4, 8), training=True, generator=0)
        assert torch.equal(result.per_frame_kl, torch.zeros(1, 4))
        assert latent_rate_nats(result) == 0.0

    def test_wrong_channel_count(self):
        with pytest.raises(InvalidArgumentError):
            gaussian_forward(torch.zeros(1, 4, 5), training=False)
        with pytest.raises(InvalidArgumentError):
            gaussian_forward(torch.zeros(1, 4, 6), training=False, latent_dim=4)

    def test_log_var_is_clamped(self):
        result = gaussian_forward(features(torch.zeros(1, 1, 2), torch.full((1, 1, 2), 100.0)), training=False)
        assert float(result.posterior.log_var.max()) == 20.0
        assert torch.isfinite(result.per_frame_kl).all()

    def test_reparameterization_statistics(self):
        n = 10_000
        mu, sigma = 1.5, 0.7
        feats = features(torch.full((n, 1, 1), mu), torch.full((n, 1, 1), 2 * math.log(sigma)))
        z = gaussian_forward(feats, training=True, generator=5).z.double().flatten()
        assert abs(float(z.mean()) - mu) < 4 * sigma / math.sqrt(n)
        assert float(z.var()) == pytest.approx(sigma ** 2, rel=0.1)

    def test_gradients_reach_mu_and_log_var(self):
        feats = torch.randn(1, 3, 4, requires_grad=True)
        result = gaussian_forward(feats, training=True, generator=1)
        (result.z.sum() + result.per_frame_kl.sum()).backward()
        assert bool((feats.grad != 0).all())


class TestPassthrough:
    def test_returns_mean_slice_bitwise(self):
        feats = torch.randn(2, 3, 8)
        result = passthrough_forward(feats)
        assert torch.equal(result.z, feats[..., :4])
        assert result.was_passthrough and result.rate_excluded
        assert result.per_frame_kl is None
        assert latent_rate_nats(result) is None

    def test_bottleneck_dispatch(self):
        bn = Bottleneck(BottleneckConfig(), latent_dim=4)
        feats = torch.randn(1, 2, 8)
        result = bn(feats, training=True, passthrough=True)
        assert torch.equal(result.z, feats[..., :4])


class TestChoosePassthrough:
    def test_extremes(self):
        assert not any(choose_passthrough(i, 0.0, 0) for i in range(100))
        assert all(choose_passthrough(i, 1.0, 0) for i in range(100))

    def test_empirical_rate(self):
        hits = sum(choose_passthrough(i, 0.25, 42) for i in range(100_000))
        assert abs(hits / 100_000 - 0.25) < 0.01

    def test_pure_function_of_seed_and_index(self):
        draws = [choose_passthrough(i, 0.5, 9) for i in range(50)]
        assert draws == [choose_passthrough(i, 0.5, 9) for i in range(50)]
        assert draws != [choose_passthrough(i, 0.5, 10) for i in range(50)]

    def test_out_of_range(self):
        with pytest.raises(InvalidArgumentError):
            choose_passthrough(0, 1.5, 0)


class TestVQ:
    def test_uninitialized(self):
        vq = ResidualVectorQuantizer(dim=3, codebook_size=4, num_codebooks=1)
        with pytest.raises(FailedPreconditionError):
            vq_forward(torch.zeros(1, 2, 3), vq, training=False)

    def test_exact_code_vector_selected(self):
        vq = ResidualVectorQuantizer(dim=2, codebook_size=3, num_codebooks=1)
        vq.set_codebooks(torch.tensor([[[0.0, 0.0], [1.0, 2.0], [-3.0, 1.0]]]))
        feats = torch.tensor([[[1.0, 2.0], [-3.0, 1.0]]])
        result = vq_forward(feats, vq, training=False)
        assert result.codes.squeeze(-1).tolist() == [[1, 2]]
        assert torch.equal(result.z, feats)
        assert float(result.aux_losses["commitment"]) == 0.0

    def test_single_code_gives_constant_latent(self):
        vq = ResidualVectorQuantizer(dim=2, codebook_size=1, num_codebooks=1)
        vq.set_codebooks(torch.tensor([[[0.5, -0.5]]]))
        result = vq_forward(torch.randn(2, 4, 2), vq, training=False)
        assert torch.equal(result.z, torch.tensor([0.5, -0.5]).expand(2, 4, 2))
        assert bool((result.per_frame_kl == 0).all())

    def test_structural_kl(self):
        vq = ResidualVectorQuantizer(dim=2, codebook_size=16, num_codebooks=3)
        vq.init_from_features(torch.randn(4, 8, 2), generator=0)
        result = vq(torch.randn(1, 5, 2), training=False)
        assert torch.allclose(result.per_frame_kl, torch.full((1, 5), 3 * math.log(16)))
        assert result.codes.shape == (1, 5, 3)

    def test_straight_through_gradient(self):
        vq = ResidualVectorQuantizer(dim=2, codebook_size=4, num_codebooks=2)
        vq.init_from_features(torch.randn(2, 6, 2), generator=1)
        feats = torch.randn(1, 3, 2, requires_grad=True)
        vq(feats, training=False).z.sum().backward()
        assert torch.allclose(feats.grad, torch.ones_like(feats))

    def test_training_updates_codebooks(self):
        vq = ResidualVectorQuantizer(dim=2, codebook_size=4, num_codebooks=1, decay=0.5)
        vq.init_from_features(torch.randn(2, 8, 2), generator=2)
        before = vq.codebooks.clone()
        vq(torch.randn(2, 8, 2) + 3.0, training=True, generator=3)
        assert not torch.equal(before, vq.codebooks)

    def test_residual_stages_reduce_error(self):
        gen = torch.Generator().manual_seed(4)
        data = torch.randn(1, 256, 4, generator=gen)
        errors = []
        for n in (1, 3):
            vq = ResidualVectorQuantizer(dim=4, codebook_size=16, num_codebooks=n)
            vq.init_from_features(data, generator=5)
            errors.append(float((vq(data, training=False).z - data).pow(2).mean()))
        assert errors[1] < errors[0]

    def test_bottleneck_initializes_on_first_training_batch(self):
        bn = Bottleneck(BottleneckConfig(kind="vq", codebook_size=8, num_codebooks=2), latent_dim=3)
        assert bn.feature_channels == 3
        result = bn(torch.randn(2, 4, 3), training=True, generator=0)
        assert bn.quantizer.is_initialized
        assert "perplexity" in result.stats
        assert bn.structural_kl_nats == pytest.approx(2 * math.log(8))
