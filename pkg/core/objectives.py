"""Reconstruction, adversarial and total training objectives."""
import functools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
import torchaudio
from torch import nn

from config.schema import LossWeights
from utilities.error_handler import FailedPreconditionError, InvalidArgumentError, check_non_negative

logger = logging.getLogger(__name__)

DEFAULT_MEL_SCALES: Tuple[Tuple[int, int], ...] = ((2048, 80), (512, 80))
DEFAULT_STFT_FFTS: Tuple[int, ...] = (512, 256, 128)
DEFAULT_DISC_RESOLUTIONS: Tuple[Tuple[int, int], ...] = ((1024, 256), (512, 128), (256, 64))
LOG_EPS = 1e-5


def _check_pair(x: torch.Tensor, y: torch.Tensor) -> None:
    if x.shape != y.shape:
        raise InvalidArgumentError(f"waveform shapes differ: {tuple(x.shape)} vs {tuple(y.shape)}")


@functools.lru_cache(maxsize=32)
def _mel_transform(sample_rate: int, n_fft: int, n_mels: int, pad_mode: str) -> torchaudio.transforms.MelSpectrogram:
    return torchaudio.transforms.MelSpectrogram(
        sample_rate=sample_rate, n_fft=n_fft, hop_length=n_fft // 4, n_mels=n_mels,
        power=1.0, center=True, pad_mode=pad_mode,
    )


def _log_mel(x: torch.Tensor, sample_rate: int, n_fft: int, n_mels: int) -> torch.Tensor:
    pad_mode = "reflect" if n_fft // 2 < x.shape[-1] else "constant"
    transform = _mel_transform(int(sample_rate), int(n_fft), int(n_mels), pad_mode).to(x.device)
    return torch.log(transform(x) + LOG_EPS)


def mel_distance(x: torch.Tensor, y: torch.Tensor, sample_rate: int,
                 scales: Sequence[Tuple[int, int]] = DEFAULT_MEL_SCALES) -> torch.Tensor:
    """Mean over scales of the L1 distance between log-mel spectrograms."""
    _check_pair(x, y)
    if not scales:
        raise InvalidArgumentError("mel_distance needs at least one (n_fft, n_mels) scale")
    total = 0.0
    for n_fft, n_mels in scales:
        total = total + (_log_mel(x, sample_rate, n_fft, n_mels) - _log_mel(y, sample_rate, n_fft, n_mels)).abs().mean()
    return total / len(scales)


def _stft_magnitude(x: torch.Tensor, n_fft: int) -> torch.Tensor:
    window = torch.hann_window(n_fft, dtype=x.dtype, device=x.device)
    pad_mode = "reflect" if n_fft // 2 < x.shape[-1] else "constant"
    spec = torch.stft(x, n_fft=n_fft, hop_length=n_fft // 4, window=window,
                      center=True, pad_mode=pad_mode, return_complex=True)
    return spec.abs()


def multiscale_stft_loss(x: torch.Tensor, y: torch.Tensor, ffts: Sequence[int] = DEFAULT_STFT_FFTS) -> torch.Tensor:
    """Sum over FFT sizes of log-magnitude L1 plus spectral convergence."""
    _check_pair(x, y)
    total = torch.zeros((), dtype=x.dtype, device=x.device)
    for n_fft in ffts:
        x_mag = _stft_magnitude(x, n_fft)
        y_mag = _stft_magnitude(y, n_fft)
        log_l1 = (torch.log(x_mag + LOG_EPS) - torch.log(y_mag + LOG_EPS)).abs().mean()
        # normalized by the mean of both norms so the term is symmetric
        scale = 0.5 * (torch.linalg.norm(x_mag) + torch.linalg.norm(y_mag))
        convergence = torch.linalg.norm(x_mag - y_mag) / (scale + LOG_EPS)
        total = total + log_l1 + convergence
    return total


def waveform_l1(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    _check_pair(x, y)
    return (x - y).abs().mean()


def recon_terms(x: torch.Tensor, y: torch.Tensor, sample_rate: int, weights: LossWeights,
                mel_scales: Sequence[Tuple[int, int]] = DEFAULT_MEL_SCALES,
                stft_ffts: Sequence[int] = DEFAULT_STFT_FFTS) -> Dict[str, torch.Tensor]:
    """Unweighted mel/stft/waveform terms plus their weighted composite under `recon`."""
    terms = {
        "mel": mel_distance(x, y, sample_rate, mel_scales),
        "stft": multiscale_stft_loss(x, y, stft_ffts),
        "waveform": waveform_l1(x, y),
    }
    terms["recon"] = (
        weights.mel_weight * terms["mel"]
        + weights.stft_weight * terms["stft"]
        + weights.waveform_weight * terms["waveform"]
    )
    return terms


@dataclass
class LossReport:
    total: torch.Tensor
    recon: float
    rate: float
    adv: float
    feature_match: float = 0.0
    commitment: float = 0.0
    measured_kl_per_frame: Optional[float] = None
    rate_excluded: bool = False
    components: Dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> Dict[str, float]:
        data = {
            "total": float(self.total.detach()),
            "recon": self.recon,
            "rate": self.rate,
            "adv": self.adv,
            "feature_match": self.feature_match,
            "commitment": self.commitment,
        }
        data.update(self.components)
        return data


def _value(term) -> torch.Tensor:
    return term if isinstance(term, torch.Tensor) else torch.as_tensor(float(term))


def total_objective(recon: torch.Tensor, rate_term: Optional[torch.Tensor],
                    adv_terms: Optional[Dict[str, torch.Tensor]], weights: LossWeights,
                    aux_losses: Optional[Dict[str, torch.Tensor]] = None,
                    measured_kl: Optional[float] = None,
                    components: Optional[Dict[str, float]] = None) -> LossReport:
    """Weighted sum of the objective terms; components are reported unweighted.

    `rate_term` is None for passthrough batches and the vq family, which
    flags the report as rate-excluded.
    """
    rate_weight = 1.0 if weights.rate_weight is None else weights.rate_weight
    for name, w in (("recon_weight", weights.recon_weight), ("rate_weight", rate_weight),
                    ("adv_weight", weights.adv_weight), ("feature_match_weight", weights.feature_match_weight),
                    ("commitment_weight", weights.commitment_weight)):
        check_non_negative(name, float(w))

    recon = _value(recon)
    rate = _value(rate_term) if rate_term is not None else torch.zeros_like(recon)
    adv_terms = adv_terms or {}
    adv = _value(adv_terms.get("adv", 0.0))
    fm = _value(adv_terms.get("feature_match", 0.0))
    commitment = _value((aux_losses or {}).get("commitment", 0.0))

    total = (
        weights.recon_weight * recon
        + rate_weight * rate
        + weights.adv_weight * adv
        + weights.feature_match_weight * fm
        + weights.commitment_weight * commitment
    )
    return LossReport(
        total=total,
        recon=float(recon.detach()),
        rate=float(rate.detach()),
        adv=float(adv.detach()),
        feature_match=float(fm.detach()),
        commitment=float(commitment.detach()),
        measured_kl_per_frame=measured_kl,
        rate_excluded=rate_term is None,
        components=dict(components or {}),
    )


class SpectrogramDiscriminator(nn.Module):
    """2-D conv stack over one complex STFT resolution (real/imag as channels)."""

    def __init__(self, n_fft: int, hop: int, channels: int = 16, slope: float = 0.1):
        super().__init__()
        self.n_fft = n_fft
        self.hop = hop
        self.slope = slope
        self.convs = nn.ModuleList([
            nn.Conv2d(2, channels, (3, 9), padding=(1, 4)),
            nn.Conv2d(channels, channels, (3, 9), stride=(1, 2), padding=(1, 4)),
            nn.Conv2d(channels, channels, (3, 9), stride=(1, 2), padding=(1, 4)),
            nn.Conv2d(channels, channels, (3, 3), padding=(1, 1)),
        ])
        self.conv_post = nn.Conv2d(channels, 1, (3, 3), padding=(1, 1))
        self.register_buffer("window", torch.hann_window(n_fft), persistent=False)

    def spectrogram(self, x: torch.Tensor) -> torch.Tensor:
        total = self.n_fft - self.hop
        mode = "reflect" if total // 2 + 1 < x.shape[-1] else "constant"
        x = F.pad(x.unsqueeze(1), (total // 2, total - total // 2), mode=mode).squeeze(1)
        spec = torch.stft(x, n_fft=self.n_fft, hop_length=self.hop, window=self.window,
                          center=False, return_complex=True)
        return torch.view_as_real(spec).permute(0, 3, 2, 1)  # [B, 2, frames, bins]

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        fmap = []
        h = self.spectrogram(x)
        for conv in self.convs:
            h = F.leaky_relu(conv(h), self.slope)
            fmap.append(h)
        h = self.conv_post(h)
        fmap.append(h)
        return torch.flatten(h, 1, -1), fmap


class MultiResolutionDiscriminator(nn.Module):
    def __init__(self, channels: int = 16, resolutions: Sequence[Tuple[int, int]] = DEFAULT_DISC_RESOLUTIONS):
        super().__init__()
        self.discriminators = nn.ModuleList(
            [SpectrogramDiscriminator(n_fft, hop, channels) for n_fft, hop in resolutions]
        )

    def forward(self, x: torch.Tensor) -> List[Tuple[torch.Tensor, List[torch.Tensor]]]:
        return [d(x) for d in self.discriminators]


def build_discriminator(weights: LossWeights, channels: int, seed: int) -> Optional[MultiResolutionDiscriminator]:
    if not weights.adversarial_enabled:
        return None
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed + 1)
        return MultiResolutionDiscriminator(channels)


def _require_discriminator(discriminator: Optional[nn.Module]) -> nn.Module:
    if discriminator is None:
        raise FailedPreconditionError("adversarial path is disabled (adv_weight and feature_match_weight are 0)")
    return discriminator


def discriminator_loss(real_audio: torch.Tensor, fake_audio: torch.Tensor,
                       discriminator: Optional[nn.Module]) -> torch.Tensor:
    """LSGAN: mean((1 - D(real))²) + mean(D(fake)²), summed over resolutions."""
    disc = _require_discriminator(discriminator)
    _check_pair(real_audio, fake_audio)
    loss = torch.zeros((), device=real_audio.device)
    for (real_logits, _), (fake_logits, _) in zip(disc(real_audio), disc(fake_audio.detach())):
        loss = loss + torch.mean((1 - real_logits) ** 2) + torch.mean(fake_logits ** 2)
    return loss


def generator_adv_loss(real_audio: torch.Tensor, fake_audio: torch.Tensor,
                       discriminator: Optional[nn.Module]) -> Dict[str, torch.Tensor]:
    """LSGAN generator term and L1 feature matching over discriminator activations."""
    disc = _require_discriminator(discriminator)
    _check_pair(real_audio, fake_audio)
    with torch.no_grad():
        real_out = disc(real_audio)
    fake_out = disc(fake_audio)

    adv = torch.zeros((), device=real_audio.device)
    fm = torch.zeros((), device=real_audio.device)
    for (_, real_fmap), (fake_logits, fake_fmap) in zip(real_out, fake_out):
        adv = adv + torch.mean((1 - fake_logits) ** 2)
        for r, g in zip(real_fmap, fake_fmap):
            fm = fm + torch.mean(torch.abs(r - g)) / len(real_fmap)
    return {"adv": adv, "feature_match": fm}
