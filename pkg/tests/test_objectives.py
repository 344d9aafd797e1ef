import pytest
import torch

from config.schema import LossWeights
from core.bottleneck import passthrough_forward
from core.objectives import (
    MultiResolutionDiscriminator,
    build_discriminator,
    discriminator_loss,
    generator_adv_loss,
    mel_distance,
    multiscale_stft_loss,
    recon_terms,
    total_objective,
    waveform_l1,
)
from utilities.error_handler import FailedPreconditionError, InvalidArgumentError

SR = 16000


@pytest.fixture
def noise():
    return torch.randn(2, 4000, generator=torch.Generator().manual_seed(0)) * 0.5


class TestMelDistance:
    def test_identity(self, noise):
        assert float(mel_distance(noise, noise, SR)) == 0.0

    def test_symmetric(self, noise):
        other = noise.roll(100, dims=-1)
        assert float(mel_distance(noise, other, SR)) == pytest.approx(float(mel_distance(other, noise, SR)))

    def test_noise_vs_silence_is_stable(self, noise):
        silence = torch.zeros_like(noise)
        first = float(mel_distance(noise, silence, SR))
        assert first > 0
        assert float(mel_distance(noise, silence, SR)) == pytest.approx(first, abs=1e-6)

    def test_length_mismatch(self, noise):
        with pytest.raises(InvalidArgumentError):
            mel_distance(noise, noise[:, :-1], SR)


class TestSTFTLoss:
    def test_identity(self, noise):
        assert float(multiscale_stft_loss(noise, noise)) == pytest.approx(0.0, abs=1e-6)

    def test_symmetric(self, noise):
        other = noise * 0.3
        assert float(multiscale_stft_loss(noise, other)) == pytest.approx(float(multiscale_stft_loss(other, noise)),
                                                                          rel=1e-5)

    def test_scaling_increases_loss(self, noise):
        assert float(multiscale_stft_loss(noise, 2 * noise)) > float(multiscale_stft_loss(noise, noise))


def test_recon_terms_are_weighted(noise):
    weights = LossWeights(mel_weight=2.0, stft_weight=3.0, waveform_weight=4.0)
    other = noise * 0.5
    terms = recon_terms(noise, other, SR, weights)
    expected = 2.0 * terms["mel"] + 3.0 * terms["stft"] + 4.0 * terms["waveform"]
    assert float(terms["recon"]) == pytest.approx(float(expected))
    assert float(terms["waveform"]) == pytest.approx(float(waveform_l1(noise, other)))


class TestTotalObjective:
    def test_all_weights_zero(self):
        weights = LossWeights(recon_weight=0.0, rate_weight=0.0, commitment_weight=0.0)
        report = total_objective(torch.tensor(3.0), torch.tensor(2.0), {"adv": torch.tensor(1.0)}, weights)
        assert float(report.total) == 0.0

    def test_weighted_sum(self):
        weights = LossWeights(recon_weight=1.0, rate_weight=2.0, adv_weight=0.5, feature_match_weight=3.0,
                              commitment_weight=0.25)
        report = total_objective(
            torch.tensor(1.0), torch.tensor(2.0),
            {"adv": torch.tensor(4.0), "feature_match": torch.tensor(1.0)}, weights,
            aux_losses={"commitment": torch.tensor(4.0)},
        )
        assert float(report.total) == pytest.approx(1.0 + 4.0 + 2.0 + 3.0 + 1.0)
        assert report.rate == 2.0 and not report.rate_excluded

    def test_passthrough_batch_has_no_rate(self):
        result = passthrough_forward(torch.randn(1, 2, 8))
        report = total_objective(torch.tensor(1.0), None, None, LossWeights(rate_weight=10.0))
        assert result.rate_excluded
        assert report.rate == 0.0 and report.rate_excluded
        assert float(report.total) == 1.0

    def test_negative_weight(self):
        with pytest.raises(InvalidArgumentError):
            LossWeights(adv_weight=-1.0)
        weights = LossWeights()
        object.__setattr__(weights, "adv_weight", -1.0)
        with pytest.raises(InvalidArgumentError):
            total_objective(torch.tensor(1.0), None, None, weights)

    def test_as_dict_includes_components(self):
        report = total_objective(torch.tensor(1.0), None, None, LossWeights(), components={"mel": 0.5})
        assert report.as_dict()["mel"] == 0.5


class TestAdversarial:
    def test_disabled_path(self, noise):
        assert build_discriminator(LossWeights(), channels=4, seed=0) is None
        with pytest.raises(FailedPreconditionError):
            discriminator_loss(noise, noise, None)
        with pytest.raises(FailedPreconditionError):
            generator_adv_loss(noise, noise, None)

    def test_feature_matching_zero_for_identical_audio(self, noise):
        disc = build_discriminator(LossWeights(adv_weight=1.0), channels=4, seed=0)
        terms = generator_adv_loss(noise, noise.clone(), disc)
        assert float(terms["feature_match"]) == 0.0
        assert float(terms["adv"]) >= 0.0

    def test_discriminator_loss_is_finite_and_trainable(self, noise):
        disc = MultiResolutionDiscriminator(channels=4)
        loss = discriminator_loss(noise, noise * 0.1, disc)
        loss.backward()
        assert torch.isfinite(loss)
        assert any(p.grad is not None for p in disc.parameters())

    def test_short_clips_are_supported(self):
        disc = MultiResolutionDiscriminator(channels=4)
        outputs = disc(torch.randn(1, 800))
        assert len(outputs) == 3
