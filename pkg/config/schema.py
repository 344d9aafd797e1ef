"""Typed config tree. Every section validates itself in __post_init__ and
raises ConfigError naming the offending field; the loader prefixes the
section path so errors read like `train.bottleneck.passthrough_prob: ...`.
"""
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Literal, Optional, Tuple

from core.rate_core import RateSpec
from utilities.error_handler import ConfigError

BottleneckKind = Literal["gaussian", "vq"]
RateLoss = Literal["target_kl", "free_bits", "kl", "none"]
SyntheticClass = Literal["sine_mix", "chirp", "noise_burst", "am_tone"]


def _check(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise ConfigError(key, message)


@dataclass(frozen=True)
class ModelConfig:
    sample_rate_hz: int = 16000
    hop: int = 400
    latent_dim: int = 16
    strides: Tuple[int, ...] = (5, 4, 4, 5)
    encoder_channels: Tuple[int, ...] = (8, 16, 32, 64, 64)
    decoder_channels: Tuple[int, ...] = (64, 64, 32, 16, 8)
    dilations: Tuple[int, ...] = (1, 3)
    activation: Literal["snake", "leaky_relu"] = "snake"
    n_mels: int = 80
    mel_n_fft: int = 1024
    use_mel_projection: bool = True
    seed: int = 0

    def __post_init__(self):
        _check(self.sample_rate_hz > 0, "sample_rate_hz", "must be positive")
        _check(self.latent_dim >= 1, "latent_dim", "must be >= 1")
        _check(len(self.strides) >= 1 and all(s >= 1 for s in self.strides), "strides", "must be positive integers")
        _check(math.prod(self.strides) == self.hop, "strides",
               f"product {math.prod(self.strides)} must equal hop {self.hop}")
        _check(len(self.encoder_channels) == len(self.strides) + 1, "encoder_channels",
               "needs one entry for the stem plus one per stride")
        _check(len(self.decoder_channels) == len(self.strides) + 1, "decoder_channels",
               "needs one entry for the stem plus one per stride")
        _check(all(c >= 1 for c in self.encoder_channels + self.decoder_channels), "encoder_channels",
               "channel counts must be positive")
        _check(self.n_mels >= 1, "n_mels", "must be >= 1")
        _check(self.mel_n_fft >= self.hop, "mel_n_fft", "must be >= hop")

    @property
    def frame_rate_hz(self) -> float:
        return self.sample_rate_hz / self.hop


@dataclass(frozen=True)
class BottleneckConfig:
    kind: BottleneckKind = "gaussian"
    latent_dim: Optional[int] = None  # defaults to model.latent_dim
    rate_loss: Optional[RateLoss] = None  # gaussian -> target_kl, vq -> none
    lambda_weight: Optional[float] = None
    passthrough_prob: float = 0.0
    free_bits_nats: float = 0.5
    codebook_size: int = 64
    num_codebooks: int = 4
    ema_decay: float = 0.99
    dead_code_threshold: float = 1e-3

    def __post_init__(self):
        if self.rate_loss is None:
            object.__setattr__(self, "rate_loss", "none" if self.kind == "vq" else "target_kl")
        _check(not (self.kind == "vq" and self.rate_loss != "none"), "rate_loss",
               "vq bottlenecks have a structural rate; rate_loss must be 'none'")
        _check(0.0 <= self.passthrough_prob <= 1.0, "passthrough_prob", "must be in [0, 1]")
        _check(self.lambda_weight is None or self.lambda_weight >= 0, "lambda_weight", "must be >= 0")
        _check(self.free_bits_nats >= 0, "free_bits_nats", "must be >= 0")
        _check(self.codebook_size >= 2, "codebook_size", "must be >= 2 (a single code carries no bits)")
        _check(self.num_codebooks >= 1, "num_codebooks", "must be >= 1")
        _check(0.0 < self.ema_decay < 1.0, "ema_decay", "must be in (0, 1)")


@dataclass(frozen=True)
class LossWeights:
    recon_weight: float = 1.0
    rate_weight: Optional[float] = None  # defaults to bottleneck.lambda_weight, then 1.0
    adv_weight: float = 0.0
    feature_match_weight: float = 0.0
    mel_weight: float = 15.0
    stft_weight: float = 2.0
    waveform_weight: float = 0.1
    commitment_weight: float = 0.25

    def __post_init__(self):
        for name, value in asdict(self).items():
            _check(value is None or value >= 0, name, "weights must be >= 0")

    @property
    def adversarial_enabled(self) -> bool:
        return self.adv_weight > 0 or self.feature_match_weight > 0


@dataclass(frozen=True)
class RateConfig:
    target_kl_nats: Optional[float] = None
    target_bitrate_bps: Optional[float] = None

    def __post_init__(self):
        _check(self.target_kl_nats is None or self.target_kl_nats >= 0, "target_kl_nats", "must be >= 0")
        _check(self.target_bitrate_bps is None or self.target_bitrate_bps >= 0, "target_bitrate_bps", "must be >= 0")


@dataclass(frozen=True)
class DatasetSpec:
    source: Literal["synthetic", "wav_dir"] = "synthetic"
    n_items: int = 64
    classes: Tuple[SyntheticClass, ...] = ("sine_mix", "chirp", "noise_burst", "am_tone")
    seed: int = 0
    wav_dir: Optional[str] = None
    segment_s: float = 1.0
    eval_fraction: float = 0.125

    def __post_init__(self):
        _check(0.0 < self.eval_fraction <= 0.5, "eval_fraction", "must be in (0, 0.5]")
        _check(self.segment_s > 0, "segment_s", "must be positive")
        _check(self.n_items >= 2, "n_items", "must be >= 2 (train and eval splits)")
        _check(len(self.classes) >= 1, "classes", "needs at least one class")
        _check(self.source != "wav_dir" or bool(self.wav_dir), "wav_dir", "required when source is wav_dir")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    bottleneck: BottleneckConfig = field(default_factory=BottleneckConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    rate: RateConfig = field(default_factory=RateConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 0.01
    grad_clip: float = 1.0  # 0 disables
    seed: int = 0
    eval_every: int = 250
    log_every: int = 50
    kl_ema_decay: float = 0.99
    mel_scales: Tuple[Tuple[int, int], ...] = ((2048, 80), (512, 80))
    stft_ffts: Tuple[int, ...] = (512, 256, 128)
    disc_channels: int = 16
    output_dir: Optional[str] = None
    metrics_file: str = "metrics.jsonl"
    checkpoint_file: str = "model.ckpt"

    def __post_init__(self):
        _check(self.steps >= 1, "steps", "must be >= 1")
        _check(self.batch_size >= 1, "batch_size", "must be >= 1")
        _check(self.lr >= 0, "lr", "must be >= 0")
        _check(self.weight_decay >= 0, "weight_decay", "must be >= 0")
        _check(self.eval_every >= 1, "eval_every", "must be >= 1")
        _check(self.log_every >= 1, "log_every", "must be >= 1")
        _check(0.0 <= self.kl_ema_decay < 1.0, "kl_ema_decay", "must be in [0, 1)")

        bn = self.bottleneck
        if bn.latent_dim is None:
            bn = replace(bn, latent_dim=self.model.latent_dim)
        _check(bn.latent_dim == self.model.latent_dim, "bottleneck.latent_dim",
               f"must match model.latent_dim ({self.model.latent_dim})")

        lam_b, lam_w = bn.lambda_weight, self.weights.rate_weight
        _check(lam_b is None or lam_w is None or lam_b == lam_w, "weights.rate_weight",
               f"disagrees with bottleneck.lambda_weight ({lam_b})")
        lam = lam_b if lam_b is not None else (lam_w if lam_w is not None else 1.0)
        object.__setattr__(self, "bottleneck", replace(bn, lambda_weight=lam))
        object.__setattr__(self, "weights", replace(self.weights, rate_weight=lam))

    @property
    def rate_spec(self) -> RateSpec:
        return RateSpec(
            sample_rate_hz=self.model.sample_rate_hz,
            hop=self.model.hop,
            latent_dim=self.model.latent_dim,
            target_bitrate_bps=self.rate.target_bitrate_bps,
            target_kl_nats=self.rate.target_kl_nats,
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SweepConfig:
    base: TrainConfig = field(default_factory=TrainConfig)
    target_kls: Tuple[float, ...] = (10.0, 20.0, 40.0, 80.0, 160.0)
    lambda_weights: Tuple[float, ...] = (1.0, 2.0, 10.0)
    kinds: Tuple[BottleneckKind, ...] = ("gaussian",)
    seeds: Tuple[int, ...] = (0,)
    passthrough_probs: Tuple[float, ...] = (0.0,)
    adversarial: Tuple[bool, ...] = (False,)
    vq_num_codebooks: Tuple[int, ...] = (1, 2, 4)
    output_dir: Optional[str] = None
    workers: int = 1

    def __post_init__(self):
        for name in ("target_kls", "lambda_weights", "kinds", "seeds", "passthrough_probs", "adversarial"):
            _check(len(getattr(self, name)) >= 1, name, "must be a non-empty list")
        _check(all(t >= 0 for t in self.target_kls), "target_kls", "targets must be >= 0")
        _check(all(w >= 0 for w in self.lambda_weights), "lambda_weights", "weights must be >= 0")
        _check(all(0 <= p <= 1 for p in self.passthrough_probs), "passthrough_probs", "must be in [0, 1]")
        _check("vq" not in self.kinds or len(self.vq_num_codebooks) >= 1, "vq_num_codebooks",
               "must be non-empty when sweeping the vq family")
        _check(self.workers >= 1, "workers", "must be >= 1")


@dataclass(frozen=True)
class DiffusionConfig:
    width: int = 64
    depth: int = 4
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    sampler_steps: int = 50
    conditioning: Literal["none", "class_label"] = "none"
    vae_checkpoint: Optional[str] = None
    latent_dim: Optional[int] = None  # taken from the VAE checkpoint when unset
    shift_s: float = math.log(0.5)
    t_eps: float = 1e-5
    eval_fraction: float = 0.25
    eval_repeats: int = 8
    seed: int = 0

    def __post_init__(self):
        _check(self.width >= 1 and self.depth >= 1, "width", "width and depth must be >= 1")
        _check(self.steps >= 1, "steps", "must be >= 1")
        _check(self.batch_size >= 1, "batch_size", "must be >= 1")
        _check(self.lr >= 0, "lr", "must be >= 0")
        _check(self.sampler_steps >= 1, "sampler_steps", "must be >= 1")
        _check(0.0 < self.t_eps < 0.5, "t_eps", "must be in (0, 0.5)")
        _check(0.0 < self.eval_fraction < 1.0, "eval_fraction", "must be in (0, 1)")
        _check(self.eval_repeats >= 1, "eval_repeats", "must be >= 1")


@dataclass(frozen=True)
class RatebenchConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: Optional[SweepConfig] = None
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    output_root: Optional[str] = None
