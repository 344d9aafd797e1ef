"""Information bottlenecks between encoder and decoder.

Gaussian (reparameterized), deterministic passthrough, and residual vector
quantization for the discrete baseline. Features are laid out
[..., frames, channels]; Gaussian features carry 2D channels (mu || log_var).
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from config.schema import BottleneckConfig
from core.rate_core import GaussianPosterior, gaussian_kl, vq_kl_nats
from utilities.error_handler import FailedPreconditionError, InvalidArgumentError, require

logger = logging.getLogger(__name__)

LOG_VAR_MIN = -30.0
LOG_VAR_MAX = 20.0

GeneratorLike = Union[torch.Generator, int, None]


@dataclass
class BottleneckResult:
    z: torch.Tensor
    per_frame_kl: Optional[torch.Tensor]  # None when excluded from rate statistics
    aux_losses: Dict[str, torch.Tensor] = field(default_factory=dict)
    was_passthrough: bool = False
    posterior: Optional[GaussianPosterior] = None
    codes: Optional[torch.Tensor] = None
    stats: Dict[str, float] = field(default_factory=dict)

    @property
    def rate_excluded(self) -> bool:
        return self.was_passthrough or self.per_frame_kl is None


def _as_generator(generator: GeneratorLike) -> Optional[torch.Generator]:
    if generator is None or isinstance(generator, torch.Generator):
        return generator
    return torch.Generator().manual_seed(int(generator))


def split_features(features: torch.Tensor, latent_dim: Optional[int] = None) -> GaussianPosterior:
    """Split [..., 2D] features into (mu, clamped log_var)."""
    channels = features.shape[-1]
    if channels % 2 != 0 or (latent_dim is not None and channels != 2 * latent_dim):
        expected = f"2*{latent_dim}" if latent_dim is not None else "an even count"
        raise InvalidArgumentError(f"gaussian bottleneck expects {expected} feature channels, got {channels}")
    d = channels // 2
    return GaussianPosterior(features[..., :d], features[..., d:].clamp(LOG_VAR_MIN, LOG_VAR_MAX))


def gaussian_forward(features: torch.Tensor, training: bool, generator: GeneratorLike = None,
                     latent_dim: Optional[int] = None) -> BottleneckResult:
    """Reparameterized sample in training, posterior mean in eval."""
    post = split_features(features, latent_dim)
    per_frame_kl = gaussian_kl(post)
    if training:
        eps = torch.randn(post.mu.shape, generator=_as_generator(generator),
                          dtype=post.mu.dtype, device=post.mu.device)
        z = post.mu + torch.exp(0.5 * post.log_var) * eps
    else:
        z = post.mu
    return BottleneckResult(z=z, per_frame_kl=per_frame_kl, posterior=post)


def passthrough_forward(features: torch.Tensor, latent_dim: Optional[int] = None) -> BottleneckResult:
    """Pure autoencoder path: z = mu, no sampling, no rate term."""
    channels = features.shape[-1]
    if channels % 2 != 0 or (latent_dim is not None and channels != 2 * latent_dim):
        raise InvalidArgumentError(f"passthrough expects 2D feature channels, got {channels}")
    return BottleneckResult(z=features[..., : channels // 2], per_frame_kl=None, was_passthrough=True)


def choose_passthrough(batch_index: int, passthrough_prob: float, rng_seed: int) -> bool:
    """Per-batch Bernoulli(prob) draw, a pure function of (seed, batch index)."""
    require(0.0 <= passthrough_prob <= 1.0, f"passthrough_prob must be in [0, 1], got {passthrough_prob}")
    if passthrough_prob == 0.0:
        return False
    if passthrough_prob == 1.0:
        return True
    rng = np.random.default_rng([int(rng_seed) & 0xFFFFFFFF, int(batch_index)])
    return bool(rng.random() < passthrough_prob)


class ResidualVectorQuantizer(nn.Module):
    """Residual VQ with EMA codebooks and dead-code re-seeding.

    Codebooks live in buffers (no optimizer state); gradients reach the
    encoder through the straight-through estimator.
    """

    def __init__(self, dim: int, codebook_size: int, num_codebooks: int,
                 decay: float = 0.99, dead_code_threshold: float = 1e-3, eps: float = 1e-5):
        super().__init__()
        self.dim = dim
        self.codebook_size = codebook_size
        self.num_codebooks = num_codebooks
        self.decay = decay
        self.dead_code_threshold = dead_code_threshold
        self.eps = eps

        self.register_buffer("codebooks", torch.zeros(num_codebooks, codebook_size, dim))
        self.register_buffer("ema_cluster_size", torch.ones(num_codebooks, codebook_size))
        self.register_buffer("ema_embed_sum", torch.zeros(num_codebooks, codebook_size, dim))
        self.register_buffer("initialized", torch.tensor(False))

    @property
    def is_initialized(self) -> bool:
        return bool(self.initialized)

    @property
    def kl_nats(self) -> float:
        return vq_kl_nats(self.codebook_size, self.num_codebooks)

    @torch.no_grad()
    def set_codebooks(self, codebooks: torch.Tensor) -> None:
        require(tuple(codebooks.shape) == tuple(self.codebooks.shape),
                f"codebooks must have shape {tuple(self.codebooks.shape)}, got {tuple(codebooks.shape)}")
        self.codebooks.copy_(codebooks)
        self.ema_embed_sum.copy_(codebooks)
        self.ema_cluster_size.fill_(1.0)
        self.initialized.fill_(True)

    @torch.no_grad()
    def init_from_features(self, features: torch.Tensor, generator: GeneratorLike = None) -> None:
        """Seed each stage's codebook with residual vectors drawn from a batch."""
        gen = _as_generator(generator)
        residual = features.detach().reshape(-1, self.dim)
        books = torch.empty_like(self.codebooks)
        for i in range(self.num_codebooks):
            rows = self._sample_rows(residual, self.codebook_size, gen)
            books[i] = rows
            residual = residual - rows[self._nearest(residual, rows)]
        self.set_codebooks(books)
        logger.debug("VQ codebooks initialized from %d feature vectors", features.reshape(-1, self.dim).shape[0])

    @staticmethod
    def _sample_rows(x: torch.Tensor, n: int, gen: Optional[torch.Generator]) -> torch.Tensor:
        if x.shape[0] >= n:
            idx = torch.randperm(x.shape[0], generator=gen)[:n]
        else:
            idx = torch.randint(0, x.shape[0], (n,), generator=gen)
        return x[idx].clone()

    @staticmethod
    def _nearest(x: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
        distances = (
            x.pow(2).sum(dim=1, keepdim=True)
            - 2 * x @ codebook.t()
            + codebook.pow(2).sum(dim=1)
        )
        return torch.argmin(distances, dim=1)

    @torch.no_grad()
    def _ema_update(self, stage: int, residual: torch.Tensor, idx: torch.Tensor,
                    gen: Optional[torch.Generator]) -> None:
        onehot = F.one_hot(idx, self.codebook_size).to(residual.dtype)
        counts = onehot.sum(dim=0)
        embed_sum = onehot.t() @ residual

        cluster = self.ema_cluster_size[stage]
        cluster.mul_(self.decay).add_(counts, alpha=1 - self.decay)
        self.ema_embed_sum[stage].mul_(self.decay).add_(embed_sum, alpha=1 - self.decay)

        # Laplace smoothing of the cluster size
        n = cluster.sum()
        smoothed = (cluster + self.eps) / (n + self.codebook_size * self.eps) * n
        self.codebooks[stage] = self.ema_embed_sum[stage] / smoothed.unsqueeze(1)

        dead = cluster < self.dead_code_threshold
        n_dead = int(dead.sum())
        if n_dead:
            rows = self._sample_rows(residual, n_dead, gen)
            self.codebooks[stage][dead] = rows
            self.ema_embed_sum[stage][dead] = rows
            cluster[dead] = 1.0

    def forward(self, features: torch.Tensor, training: bool, generator: GeneratorLike = None) -> BottleneckResult:
        if not self.is_initialized:
            raise FailedPreconditionError("VQ codebooks are not initialized")
        if features.shape[-1] != self.dim:
            raise InvalidArgumentError(f"vq bottleneck expects {self.dim} feature channels, got {features.shape[-1]}")

        gen = _as_generator(generator)
        flat = features.reshape(-1, self.dim)
        with torch.no_grad():
            residual = flat.detach().clone()
            quantized = torch.zeros_like(residual)
            codes = []
            for stage in range(self.num_codebooks):
                idx = self._nearest(residual, self.codebooks[stage])
                q = self.codebooks[stage][idx]
                if training:
                    self._ema_update(stage, residual, idx, gen)
                codes.append(idx)
                quantized = quantized + q
                residual = residual - q

        z_q = quantized.view_as(features)
        commitment = F.mse_loss(features, z_q.detach())
        codebook_term = F.mse_loss(features.detach(), z_q)
        if features.requires_grad:
            # straight-through: identity Jacobian from z to the encoder features
            z = features + (z_q - features).detach()
        else:
            z = z_q

        first = F.one_hot(codes[0], self.codebook_size).float().mean(dim=0)
        perplexity = float(torch.exp(-(first * torch.log(first + 1e-10)).sum()))

        per_frame_kl = torch.full(features.shape[:-1], self.kl_nats, dtype=features.dtype, device=features.device)
        return BottleneckResult(
            z=z,
            per_frame_kl=per_frame_kl,
            aux_losses={"commitment": commitment, "codebook": codebook_term},
            codes=torch.stack(codes, dim=-1).view(*features.shape[:-1], self.num_codebooks),
            stats={"perplexity": perplexity},
        )


def vq_forward(features: torch.Tensor, codebooks: ResidualVectorQuantizer, training: bool,
               generator: GeneratorLike = None) -> BottleneckResult:
    return codebooks(features, training, generator)


class Bottleneck(nn.Module):
    """Dispatches to the configured bottleneck kind."""

    def __init__(self, cfg: BottleneckConfig, latent_dim: int):
        super().__init__()
        self.cfg = cfg
        self.kind = cfg.kind
        self.latent_dim = latent_dim
        self.quantizer: Optional[ResidualVectorQuantizer] = None
        if cfg.kind == "vq":
            self.quantizer = ResidualVectorQuantizer(
                latent_dim, cfg.codebook_size, cfg.num_codebooks,
                decay=cfg.ema_decay, dead_code_threshold=cfg.dead_code_threshold,
            )

    @property
    def feature_channels(self) -> int:
        return 2 * self.latent_dim if self.kind == "gaussian" else self.latent_dim

    @property
    def structural_kl_nats(self) -> Optional[float]:
        return self.quantizer.kl_nats if self.quantizer is not None else None

    def forward(self, features: torch.Tensor, training: bool, passthrough: bool = False,
                generator: GeneratorLike = None) -> BottleneckResult:
        if self.kind == "gaussian":
            if passthrough:
                return passthrough_forward(features, self.latent_dim)
            return gaussian_forward(features, training, generator, self.latent_dim)

        if passthrough:
            return BottleneckResult(z=features, per_frame_kl=None, was_passthrough=True)
        if training and not self.quantizer.is_initialized:
            self.quantizer.init_from_features(features, generator)
        return vq_forward(features, self.quantizer, training, generator)

    def mean_latent(self, features: torch.Tensor) -> torch.Tensor:
        """Deterministic latent used for evaluation and downstream probes."""
        return self.forward(features, training=False).z


def latent_rate_nats(result: BottleneckResult) -> Optional[float]:
    """Mean per-frame KL of a result, or None when excluded from rate statistics."""
    if result.rate_excluded:
        return None
    value = float(result.per_frame_kl.detach().mean())
    return value if math.isfinite(value) else None
