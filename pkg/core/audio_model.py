"""Desk-scale convolutional audio autoencoder.

Waveform [B, L] -> features [B, frames, C] -> bottleneck -> z [B, frames, D]
-> waveform [B, frames * hop]. A log-mel projection is added to the encoder
output before the bottleneck splits it.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn.functional as F
import torchaudio
from torch import nn

from config.schema import BottleneckConfig, ModelConfig, TrainConfig
from core.bottleneck import Bottleneck, BottleneckResult, GeneratorLike
from utilities.error_handler import FailedPreconditionError, InvalidArgumentError

logger = logging.getLogger(__name__)

MEL_LOG_EPS = 1e-5


@dataclass
class AudioBatch:
    waveform: torch.Tensor  # [batch, samples], values in [-1, 1]
    sample_rate_hz: int
    labels: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.waveform.dim() != 2:
            raise InvalidArgumentError(f"waveform must be [batch, samples], got {tuple(self.waveform.shape)}")
        if not bool(torch.isfinite(self.waveform).all()):
            raise InvalidArgumentError("waveform contains non-finite values")

    @property
    def num_samples(self) -> int:
        return self.waveform.shape[-1]

    def check_hop(self, hop: int) -> None:
        if self.num_samples % hop != 0:
            raise InvalidArgumentError(f"{self.num_samples} samples is not a multiple of hop {hop}; pad first")


def pad_to_hop(waveform: torch.Tensor, hop: int) -> Tuple[torch.Tensor, int]:
    """Reflect-pad the time axis up to a hop multiple; returns (padded, original_length)."""
    length = waveform.shape[-1]
    extra = (-length) % hop
    if extra == 0:
        return waveform, length
    mode = "reflect" if extra < length else "constant"
    padded = F.pad(waveform.unsqueeze(-2), (0, extra), mode=mode).squeeze(-2)
    return padded, length


def trim_to_length(waveform: torch.Tensor, length: int) -> torch.Tensor:
    return waveform[..., :length]


class Snake1d(nn.Module):
    """x + sin²(αx)/α with a learned per-channel α."""

    def __init__(self, channels: int):
        super().__init__()
        self.alpha = nn.Parameter(torch.ones(1, channels, 1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + (self.alpha + 1e-9).reciprocal() * torch.sin(self.alpha * x).pow(2)


def make_activation(kind: str, channels: int) -> nn.Module:
    if kind == "snake":
        return Snake1d(channels)
    if kind == "leaky_relu":
        return nn.LeakyReLU(0.1)
    raise InvalidArgumentError(f"unknown activation {kind!r}")


class ResidualUnit(nn.Module):
    def __init__(self, dim: int, dilation: int, activation: str):
        super().__init__()
        pad = ((7 - 1) * dilation) // 2
        self.block = nn.Sequential(
            make_activation(activation, dim),
            nn.Conv1d(dim, dim, kernel_size=7, dilation=dilation, padding=pad),
            make_activation(activation, dim),
            nn.Conv1d(dim, dim, kernel_size=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.block(x)


class EncoderBlock(nn.Module):
    """Residual units then a strided conv that downsamples by `stride`."""

    def __init__(self, in_dim: int, out_dim: int, stride: int, dilations: Tuple[int, ...], activation: str):
        super().__init__()
        self.block = nn.Sequential(
            *[ResidualUnit(in_dim, d, activation) for d in dilations],
            make_activation(activation, in_dim),
            nn.Conv1d(in_dim, out_dim, kernel_size=2 * stride, stride=stride, padding=math.ceil(stride / 2)),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x)


class DecoderBlock(nn.Module):
    """Transposed conv upsampling by `stride`, then residual units."""

    def __init__(self, in_dim: int, out_dim: int, stride: int, dilations: Tuple[int, ...], activation: str):
        super().__init__()
        self.block = nn.Sequential(
            make_activation(activation, in_dim),
            # output_padding keeps odd strides length-exact
            nn.ConvTranspose1d(in_dim, out_dim, kernel_size=2 * stride, stride=stride,
                               padding=math.ceil(stride / 2), output_padding=stride % 2),
            *[ResidualUnit(out_dim, d, activation) for d in dilations],
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x)


class AudioAutoencoder(nn.Module):
    """Encoder, bottleneck and decoder in one module so they checkpoint together."""

    def __init__(self, cfg: ModelConfig, bottleneck_cfg: BottleneckConfig):
        super().__init__()
        self.cfg = cfg
        self.hop = cfg.hop
        self.bottleneck = Bottleneck(bottleneck_cfg, cfg.latent_dim)
        feature_channels = self.bottleneck.feature_channels

        enc = cfg.encoder_channels
        layers = [nn.Conv1d(1, enc[0], kernel_size=7, padding=3)]
        for i, stride in enumerate(cfg.strides):
            layers.append(EncoderBlock(enc[i], enc[i + 1], stride, cfg.dilations, cfg.activation))
        layers += [
            make_activation(cfg.activation, enc[-1]),
            nn.Conv1d(enc[-1], feature_channels, kernel_size=3, padding=1),
        ]
        self.encoder = nn.Sequential(*layers)

        dec = cfg.decoder_channels
        layers = [nn.Conv1d(cfg.latent_dim, dec[0], kernel_size=7, padding=3)]
        for i, stride in enumerate(reversed(cfg.strides)):
            layers.append(DecoderBlock(dec[i], dec[i + 1], stride, cfg.dilations, cfg.activation))
        layers += [
            make_activation(cfg.activation, dec[-1]),
            nn.Conv1d(dec[-1], 1, kernel_size=7, padding=3),
            nn.Tanh(),
        ]
        self.decoder = nn.Sequential(*layers)

        self.mel = torchaudio.transforms.MelSpectrogram(
            sample_rate=cfg.sample_rate_hz,
            n_fft=cfg.mel_n_fft,
            hop_length=cfg.hop,
            n_mels=cfg.n_mels,
            center=False,
            power=1.0,
        )
        self.mel_proj = nn.Linear(cfg.n_mels, feature_channels)
        # no-op at init
        nn.init.zeros_(self.mel_proj.weight)
        nn.init.zeros_(self.mel_proj.bias)

    @property
    def frame_rate_hz(self) -> float:
        return self.cfg.frame_rate_hz

    @property
    def kind(self) -> str:
        return self.bottleneck.kind

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _check_waveform(self, waveform: torch.Tensor) -> torch.Tensor:
        if isinstance(waveform, AudioBatch):
            waveform = waveform.waveform
        if waveform.dim() != 2:
            raise InvalidArgumentError(f"waveform must be [batch, samples], got {tuple(waveform.shape)}")
        if waveform.shape[-1] % self.hop != 0:
            raise InvalidArgumentError(f"{waveform.shape[-1]} samples is not a multiple of hop {self.hop}; pad first")
        return waveform

    def encode_conv(self, waveform: torch.Tensor) -> torch.Tensor:
        """Convolutional features only, [B, frames, C]."""
        waveform = self._check_waveform(waveform)
        return self.encoder(waveform.unsqueeze(1)).transpose(1, 2)

    def log_mel(self, waveform: torch.Tensor) -> torch.Tensor:
        """log(mel + 1e-5) framed on the model hop, [B, frames, n_mels]."""
        waveform = self._check_waveform(waveform)
        total = self.cfg.mel_n_fft - self.hop
        left, right = total // 2, total - total // 2
        x = waveform.unsqueeze(1)
        mode = "reflect" if max(left, right) < x.shape[-1] else "constant"
        x = F.pad(x, (left, right), mode=mode).squeeze(1)
        return torch.log(self.mel(x) + MEL_LOG_EPS).transpose(1, 2)

    def mel_projection_add(self, features: torch.Tensor, mel: torch.Tensor) -> torch.Tensor:
        if features.shape[:-1] != mel.shape[:-1]:
            raise InvalidArgumentError(
                f"mel frames {tuple(mel.shape[:-1])} do not match feature frames {tuple(features.shape[:-1])}"
            )
        return features + self.mel_proj(mel)

    def encode(self, waveform: torch.Tensor) -> torch.Tensor:
        """Bottleneck input features: 2D channels (mu || log_var) or D for vq."""
        features = self.encode_conv(waveform)
        if self.cfg.use_mel_projection:
            features = self.mel_projection_add(features, self.log_mel(waveform))
        return features

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if not bool(torch.isfinite(z).all()):
            raise InvalidArgumentError("latent contains non-finite values")
        if z.shape[-1] != self.cfg.latent_dim:
            raise InvalidArgumentError(f"latent must have {self.cfg.latent_dim} channels, got {z.shape[-1]}")
        return self.decoder(z.transpose(1, 2)).squeeze(1)

    def forward(self, waveform: torch.Tensor, training: bool = False, passthrough: bool = False,
                generator: GeneratorLike = None) -> Tuple[torch.Tensor, BottleneckResult]:
        features = self.encode(waveform)
        result = self.bottleneck(features, training=training, passthrough=passthrough, generator=generator)
        return self.decode(result.z), result

    @torch.no_grad()
    def mean_latent(self, waveform: torch.Tensor) -> torch.Tensor:
        """Eval-mode latent (posterior mean or quantized code), [B, frames, D]."""
        if self.kind == "vq" and not self.bottleneck.quantizer.is_initialized:
            raise FailedPreconditionError("VQ codebooks are not initialized; train the model first")
        return self.bottleneck.mean_latent(self.encode(waveform))

    def reconstruct(self, waveform: torch.Tensor) -> torch.Tensor:
        """Pad, run the eval path and trim back to the input length."""
        padded, length = pad_to_hop(waveform, self.hop)
        with torch.no_grad():
            recon, _ = self.forward(padded, training=False)
        return trim_to_length(recon, length)


def build_model(cfg: TrainConfig) -> AudioAutoencoder:
    """Seeded construction; leaves the global RNG untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.model.seed)
        model = AudioAutoencoder(cfg.model, cfg.bottleneck)

    expected = cfg.rate_spec.frame_rate_hz
    if not math.isclose(model.frame_rate_hz, expected, rel_tol=1e-12):
        raise InvalidArgumentError(f"model frame rate {model.frame_rate_hz} Hz != rate spec {expected} Hz")
    logger.debug("Built %s autoencoder with %d parameters", model.kind, model.num_parameters())
    return model
