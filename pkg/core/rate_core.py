"""KL divergence, bitrate conversion and rate-controlling losses.

All KL values are in nats per latent frame (sum over latent dimensions).
Conversion to bits only happens in `kl_to_bitrate` and `vq_bitrate`.
"""
import math
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import torch

from utilities.error_handler import (
    InvalidArgumentError,
    check_non_negative,
    check_positive,
    require,
)

LN2 = math.log(2.0)
_REL_TOL = 1e-9

Scalar = Union[float, torch.Tensor]


@dataclass(frozen=True)
class RateSpec:
    """Rate bookkeeping: f_S, H, D and the target rate (bps and nats/frame)."""

    sample_rate_hz: float
    hop: int
    latent_dim: int
    target_bitrate_bps: Optional[float] = None
    target_kl_nats: Optional[float] = None

    def __post_init__(self):
        check_positive("sample_rate_hz", float(self.sample_rate_hz))
        require(int(self.hop) == self.hop and self.hop >= 1, f"hop must be a positive integer, got {self.hop}")
        require(int(self.latent_dim) == self.latent_dim and self.latent_dim >= 1,
                f"latent_dim must be a positive integer, got {self.latent_dim}")

        bps, kl = self.target_bitrate_bps, self.target_kl_nats
        if bps is not None:
            check_non_negative("target_bitrate_bps", float(bps))
        if kl is not None:
            check_non_negative("target_kl_nats", float(kl))

        if bps is None and kl is None:
            bps, kl = 0.0, 0.0
        elif kl is None:
            kl = bitrate_to_target_kl(bps, self.frame_rate_hz)
        elif bps is None:
            bps = kl_to_bitrate(kl, self.frame_rate_hz)
        elif not math.isclose(kl, bitrate_to_target_kl(bps, self.frame_rate_hz), rel_tol=_REL_TOL, abs_tol=1e-12):
            raise InvalidArgumentError(
                f"target_kl_nats={kl} disagrees with target_bitrate_bps={bps} at {self.frame_rate_hz} Hz"
            )
        object.__setattr__(self, "target_bitrate_bps", float(bps))
        object.__setattr__(self, "target_kl_nats", float(kl))

    @property
    def frame_rate_hz(self) -> float:
        return float(self.sample_rate_hz) / int(self.hop)

    @classmethod
    def from_target_kl(cls, sample_rate_hz: float, hop: int, latent_dim: int, target_kl_nats: float) -> "RateSpec":
        return cls(sample_rate_hz, hop, latent_dim, target_kl_nats=target_kl_nats)

    @classmethod
    def from_bitrate(cls, sample_rate_hz: float, hop: int, latent_dim: int, target_bitrate_bps: float) -> "RateSpec":
        return cls(sample_rate_hz, hop, latent_dim, target_bitrate_bps=target_bitrate_bps)

    def to_dict(self) -> dict:
        return {
            "sample_rate_hz": float(self.sample_rate_hz),
            "hop": int(self.hop),
            "frame_rate_hz": self.frame_rate_hz,
            "latent_dim": int(self.latent_dim),
            "target_bitrate_bps": self.target_bitrate_bps,
            "target_kl_nats": self.target_kl_nats,
        }


@dataclass
class GaussianPosterior:
    """Diagonal posterior q(z|x): mu and log sigma^2, shape [..., frames, D]."""

    mu: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_var.shape:
            raise InvalidArgumentError(
                f"mu {tuple(self.mu.shape)} and log_var {tuple(self.log_var.shape)} must have identical shape"
            )
        if self.mu.dim() < 1:
            raise InvalidArgumentError("posterior needs at least a latent axis")

    @property
    def latent_dim(self) -> int:
        return self.mu.shape[-1]

    def check_finite(self) -> None:
        if not bool(torch.isfinite(self.mu).all()) or not bool(torch.isfinite(self.log_var).all()):
            raise InvalidArgumentError("posterior contains non-finite values")


def gaussian_kl_elementwise(post: GaussianPosterior) -> torch.Tensor:
    """½(σ² + μ² − 1 − log σ²) per latent dimension, against N(0, I)."""
    post.check_finite()
    # expm1(lv) - lv stays >= 0 where exp(lv) - 1 - lv can round below zero
    return 0.5 * (torch.expm1(post.log_var) - post.log_var + post.mu.pow(2))


def gaussian_kl(post: GaussianPosterior) -> torch.Tensor:
    """Closed-form KL(q || N(0, I)) per frame in nats: shape [..., frames]."""
    return gaussian_kl_elementwise(post).sum(dim=-1)


def kl_mc_oracle(post: GaussianPosterior, n_samples: int, seed: int,
                 chunk_size: int = 100_000) -> Tuple[float, float]:
    """Monte-Carlo estimate of KL(q || N(0, I)) with its standard error.

    The whole posterior (every frame and dimension) is treated as one
    diagonal Gaussian, so the estimate targets `gaussian_kl(post).sum()`.
    Uses analytic log-densities; float64 throughout.
    """
    if n_samples < 1000:
        raise InvalidArgumentError(f"n_samples must be >= 1000, got {n_samples}")
    post.check_finite()

    mu = post.mu.detach().reshape(-1).to(torch.float64)
    log_var = post.log_var.detach().reshape(-1).to(torch.float64)
    sigma = torch.exp(0.5 * log_var)
    gen = torch.Generator().manual_seed(int(seed))

    total = 0.0
    total_sq = 0.0
    remaining = n_samples
    while remaining > 0:
        n = min(chunk_size, remaining)
        eps = torch.randn((n, mu.numel()), generator=gen, dtype=torch.float64)
        z = mu + sigma * eps
        # log q(z) - log p(z); the 2π terms cancel
        log_ratio = (-0.5 * log_var - 0.5 * eps.pow(2) + 0.5 * z.pow(2)).sum(dim=1)
        total += float(log_ratio.sum())
        total_sq += float(log_ratio.pow(2).sum())
        remaining -= n

    mean = total / n_samples
    var = max(total_sq / n_samples - mean * mean, 0.0) * n_samples / (n_samples - 1)
    return mean, math.sqrt(var / n_samples)


def kl_to_bitrate(kl_nats_per_frame: float, frame_rate_hz: float) -> float:
    """bps = S · KL / ln 2"""
    check_non_negative("kl_nats_per_frame", float(kl_nats_per_frame))
    check_non_negative("frame_rate_hz", float(frame_rate_hz))
    return float(frame_rate_hz) * float(kl_nats_per_frame) / LN2


def bitrate_to_target_kl(bps: float, frame_rate_hz: float) -> float:
    """KL_target = B · ln 2 / S"""
    check_non_negative("bps", float(bps))
    check_positive("frame_rate_hz", float(frame_rate_hz))
    return float(bps) * LN2 / float(frame_rate_hz)


def target_kl_loss(measured_kl: Scalar, spec: RateSpec) -> Scalar:
    """((KL − KL_target) / D)², both terms normalized by latent size.

    `measured_kl` is the batch-mean per-frame KL; tensors keep their graph.
    """
    value = float(measured_kl.detach()) if isinstance(measured_kl, torch.Tensor) else float(measured_kl)
    check_non_negative("measured_kl", value)
    return ((measured_kl - spec.target_kl_nats) / spec.latent_dim) ** 2


def plain_kl_rate(measured_kl: Scalar) -> Scalar:
    """Unmodified KL rate term (the λ·KL of the regularized ELBO)."""
    return measured_kl


def free_bits_loss(per_dim_kl: torch.Tensor, lambda_min: float) -> torch.Tensor:
    """Σ_j max(λ, E[KL_j]); dimensions below the floor get no rate gradient."""
    check_non_negative("lambda_min", float(lambda_min))
    per_dim_kl = torch.as_tensor(per_dim_kl)
    if per_dim_kl.dim() != 1:
        raise InvalidArgumentError(f"per_dim_kl must be a vector [D], got shape {tuple(per_dim_kl.shape)}")
    if bool((per_dim_kl.detach() < 0).any()):
        raise InvalidArgumentError("per_dim_kl entries must be >= 0")
    return torch.clamp(per_dim_kl, min=float(lambda_min)).sum()


def vq_bitrate(codebook_size: int, num_codebooks: int, frame_rate_hz: float) -> float:
    """Structural rate of an RVQ: S · n · log2(K)"""
    if codebook_size < 2:
        raise InvalidArgumentError(f"codebook_size must be >= 2, got {codebook_size}")
    if num_codebooks < 1:
        raise InvalidArgumentError(f"num_codebooks must be >= 1, got {num_codebooks}")
    check_non_negative("frame_rate_hz", float(frame_rate_hz))
    return float(frame_rate_hz) * num_codebooks * math.log2(codebook_size)


def vq_kl_nats(codebook_size: int, num_codebooks: int) -> float:
    """Constant per-frame KL of a deterministic quantizer under a uniform prior."""
    return num_codebooks * math.log(max(codebook_size, 1))
