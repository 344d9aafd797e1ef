"""Toy v-prediction latent diffusion used to probe how predictable a VAE's
latents are at a given bitrate.

Shifted cosine schedule: logSNR(t) = -2 log tan(pi t / 2) + 2 s, with
alpha_t = sqrt(sigmoid(logSNR)) and sigma_t = sqrt(sigmoid(-logSNR)).
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy import integrate
from torch import nn

from config.schema import DiffusionConfig
from core.audio_model import AudioAutoencoder
from core.datasets import AudioDataset, build_dataset
from core.trainer import evaluate_mel_distance, load_checkpoint, measure_kl_bitrate
from utilities.error_handler import FailedPreconditionError, InvalidArgumentError

logger = logging.getLogger(__name__)

TimeLike = Union[float, torch.Tensor]


def _check_t(t: TimeLike) -> None:
    if isinstance(t, torch.Tensor):
        ok = bool(((t > 0) & (t < 1)).all())
    else:
        ok = 0.0 < float(t) < 1.0
    if not ok:
        raise InvalidArgumentError("t must lie in the open interval (0, 1)")


def logsnr(t: TimeLike, shift_s: float = math.log(0.5)) -> TimeLike:
    _check_t(t)
    if isinstance(t, torch.Tensor):
        return -2.0 * torch.log(torch.tan(math.pi * t / 2)) + 2.0 * shift_s
    return -2.0 * math.log(math.tan(math.pi * float(t) / 2)) + 2.0 * shift_s


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def alpha_sigma(t: TimeLike, shift_s: float = math.log(0.5)) -> Tuple[TimeLike, TimeLike]:
    lam = logsnr(t, shift_s)
    if isinstance(lam, torch.Tensor):
        return torch.sqrt(torch.sigmoid(lam)), torch.sqrt(torch.sigmoid(-lam))
    return math.sqrt(_sigmoid(lam)), math.sqrt(_sigmoid(-lam))


@dataclass(frozen=True)
class NoiseSchedule:
    shift_s: float = math.log(0.5)
    t_eps: float = 1e-5

    def logsnr(self, t: TimeLike) -> TimeLike:
        return logsnr(t, self.shift_s)

    def alpha_sigma(self, t: TimeLike) -> Tuple[TimeLike, TimeLike]:
        return alpha_sigma(t, self.shift_s)

    def sample_t(self, n: int, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """Uniform in (t_eps, 1 - t_eps)"""
        u = torch.rand(n, generator=generator)
        return self.t_eps + (1 - 2 * self.t_eps) * u

    def mean_alpha2_sigma2(self) -> Tuple[float, float]:
        """E_t[alpha^2] and E_t[sigma^2] for t uniform on (t_eps, 1 - t_eps)"""
        lo, hi = self.t_eps, 1 - self.t_eps
        a2, _ = integrate.quad(lambda t: self.alpha_sigma(t)[0] ** 2, lo, hi, limit=200)
        a2 /= hi - lo
        return a2, 1.0 - a2


def _bcast(coef: TimeLike, like: torch.Tensor) -> TimeLike:
    if isinstance(coef, torch.Tensor) and coef.dim() == 1 and like.dim() > 1:
        return coef.view(-1, *([1] * (like.dim() - 1))).to(like.dtype)
    return coef


def _check_shapes(a: torch.Tensor, b: torch.Tensor, names: str) -> None:
    if a.shape != b.shape:
        raise InvalidArgumentError(f"{names} shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def noise_latent(z: torch.Tensor, eps: torch.Tensor, t: TimeLike,
                 schedule: NoiseSchedule = NoiseSchedule()) -> torch.Tensor:
    """z_t = alpha_t z + sigma_t eps"""
    _check_shapes(z, eps, "z/eps")
    a, s = schedule.alpha_sigma(t)
    return _bcast(a, z) * z + _bcast(s, z) * eps


def v_target(z: torch.Tensor, eps: torch.Tensor, t: TimeLike,
             schedule: NoiseSchedule = NoiseSchedule()) -> torch.Tensor:
    """v = alpha_t eps - sigma_t z, with z the clean latent"""
    _check_shapes(z, eps, "z/eps")
    a, s = schedule.alpha_sigma(t)
    return _bcast(a, z) * eps - _bcast(s, z) * z


def recover_from_v(z_t: torch.Tensor, v: torch.Tensor, t: TimeLike,
                   schedule: NoiseSchedule = NoiseSchedule()) -> Tuple[torch.Tensor, torch.Tensor]:
    """(z_hat, eps_hat) = (alpha z_t - sigma v, sigma z_t + alpha v)"""
    _check_shapes(z_t, v, "z_t/v")
    a, s = schedule.alpha_sigma(t)
    a, s = _bcast(a, z_t), _bcast(s, z_t)
    return a * z_t - s * v, s * z_t + a * v


def expected_v_power(latents: torch.Tensor, schedule: NoiseSchedule = NoiseSchedule()) -> float:
    """Per-element E[v^2] = E_t[alpha^2] + E_t[sigma^2] * E[z^2] (eps is unit-variance and independent)."""
    a2, s2 = schedule.mean_alpha2_sigma2()
    return a2 + s2 * float(latents.detach().to(torch.float64).pow(2).mean())


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32) / max(half, 1))
    args = (t.float() * 1000.0)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class DenoiserBlock(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.conv1 = nn.Conv1d(width, width, kernel_size=3, padding=1)
        self.conv2 = nn.Conv1d(width, width, kernel_size=3, padding=1)
        self.emb = nn.Linear(width, width)

    def forward(self, h: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        y = self.conv1(F.silu(h)) + self.emb(emb).unsqueeze(-1)
        return h + self.conv2(F.silu(y))


class Denoiser(nn.Module):
    """Residual 1-D conv net over latent frames predicting v; zero output at init."""

    def __init__(self, latent_dim: int, width: int = 64, depth: int = 4, num_classes: Optional[int] = None):
        super().__init__()
        self.latent_dim = latent_dim
        self.width = width
        self.in_proj = nn.Conv1d(latent_dim, width, kernel_size=3, padding=1)
        self.time_mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))
        self.class_emb = nn.Embedding(num_classes, width) if num_classes else None
        self.blocks = nn.ModuleList([DenoiserBlock(width) for _ in range(depth)])
        self.out_proj = nn.Conv1d(width, latent_dim, kernel_size=1)
        nn.init.zeros_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, labels: Optional[torch.Tensor] = None) -> torch.Tensor:
        if z_t.shape[-1] != self.latent_dim:
            raise InvalidArgumentError(f"denoiser expects {self.latent_dim} latent channels, got {z_t.shape[-1]}")
        emb = self.time_mlp(timestep_embedding(t, self.width))
        if self.class_emb is not None:
            if labels is None:
                raise InvalidArgumentError("class-conditioned denoiser needs labels")
            emb = emb + self.class_emb(labels)
        h = self.in_proj(z_t.transpose(1, 2))
        for block in self.blocks:
            h = block(h, emb)
        return self.out_proj(F.silu(h)).transpose(1, 2)


@dataclass
class DenoiserRun:
    denoiser: Denoiser
    losses: List[float]
    init_loss: float
    expected_v_power: float
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)


def _schedule(cfg: DiffusionConfig) -> NoiseSchedule:
    return NoiseSchedule(shift_s=cfg.shift_s, t_eps=cfg.t_eps)


def _diffusion_batch(latents: torch.Tensor, t: torch.Tensor, generator: torch.Generator,
                     schedule: NoiseSchedule) -> Tuple[torch.Tensor, torch.Tensor]:
    eps = torch.randn(latents.shape, generator=generator, dtype=latents.dtype)
    return noise_latent(latents, eps, t, schedule), v_target(latents, eps, t, schedule)


def train_denoiser(cfg: DiffusionConfig, latents: torch.Tensor, labels: Optional[torch.Tensor] = None,
                   num_classes: Optional[int] = None) -> DenoiserRun:
    """Minimize MSE(v_theta(z_t, t, cond), v) on frozen latents [N, frames, D]."""
    if latents.dim() != 3 or latents.shape[0] == 0:
        raise InvalidArgumentError(f"latents must be a non-empty [N, frames, D] tensor, got {tuple(latents.shape)}")
    if cfg.latent_dim is not None and cfg.latent_dim != latents.shape[-1]:
        raise InvalidArgumentError(f"latent_dim {cfg.latent_dim} does not match latents with {latents.shape[-1]} channels")
    conditioned = cfg.conditioning == "class_label"
    if conditioned and (labels is None or not num_classes):
        raise InvalidArgumentError("class_label conditioning needs labels and num_classes")

    schedule = _schedule(cfg)
    latents = latents.detach().to(torch.float32)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        denoiser = Denoiser(latents.shape[-1], cfg.width, cfg.depth, num_classes if conditioned else None)
    optimizer = torch.optim.AdamW(denoiser.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(int(cfg.seed))

    losses = []
    denoiser.train()
    for step in range(cfg.steps):
        idx = torch.randint(0, latents.shape[0], (cfg.batch_size,), generator=gen)
        z = latents[idx]
        t = schedule.sample_t(cfg.batch_size, gen)
        z_t, v = _diffusion_batch(z, t, gen, schedule)
        pred = denoiser(z_t, t, labels[idx] if conditioned else None)
        loss = F.mse_loss(pred, v)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))
        if (step + 1) % max(1, cfg.steps // 10) == 0:
            logger.debug("denoiser step %d loss %.5f", step + 1, losses[-1])

    return DenoiserRun(denoiser, losses, losses[0], expected_v_power(latents, schedule), schedule)


@torch.no_grad()
def evaluate_v_mse(denoiser: Denoiser, latents: torch.Tensor, schedule: NoiseSchedule, repeats: int,
                   seed: int, labels: Optional[torch.Tensor] = None) -> Tuple[float, float]:
    """(v-MSE, mean v^2) over `repeats` seeded noisings of every latent."""
    denoiser.eval()
    gen = torch.Generator().manual_seed(int(seed) + 1)
    latents = latents.to(torch.float32)
    err, power = 0.0, 0.0
    for _ in range(repeats):
        t = schedule.sample_t(latents.shape[0], gen)
        z_t, v = _diffusion_batch(latents, t, gen, schedule)
        pred = denoiser(z_t, t, labels if denoiser.class_emb is not None else None)
        err += float(F.mse_loss(pred, v))
        power += float(v.pow(2).mean())
    return err / repeats, power / repeats


@torch.no_grad()
def sample(denoiser: Denoiser, shape: Tuple[int, int, int], steps: int, seed: int,
           labels: Optional[torch.Tensor] = None, schedule: NoiseSchedule = NoiseSchedule()) -> torch.Tensor:
    """Deterministic DDIM sampler in v-parameterization; returns latents [n, frames, D]."""
    if steps < 1:
        raise InvalidArgumentError("steps must be >= 1")
    denoiser.eval()
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(shape, generator=gen)
    ts = torch.linspace(1 - schedule.t_eps, schedule.t_eps, steps + 1, dtype=torch.float64)
    for i in range(steps):
        t = torch.full((shape[0],), float(ts[i]))
        v = denoiser(z, t, labels)
        z0, eps = recover_from_v(z, v, t, schedule)
        a_next, s_next = schedule.alpha_sigma(float(ts[i + 1]))
        z = a_next * z0 + s_next * eps
    return z


@torch.no_grad()
def extract_latents(model: AudioAutoencoder, dataset: AudioDataset, batch_size: int = 16) -> torch.Tensor:
    """Eval-mode latents of every item, [N, frames, D]."""
    model.eval()
    chunks = [model.mean_latent(dataset.waveforms[i:i + batch_size])
              for i in range(0, len(dataset), batch_size)]
    return torch.cat(chunks, dim=0)


def _split(n: int, fraction: float, seed: int) -> Tuple[List[int], List[int]]:
    n_eval = min(max(1, int(round(n * fraction))), n - 1)
    perm = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0xD1FF]).permutation(n)
    return sorted(perm[n_eval:].tolist()), sorted(perm[:n_eval].tolist())


def probe_report(vae_checkpoint: Union[str, Path], cfg: DiffusionConfig,
                 dataset: Optional[AudioDataset] = None) -> Dict[str, Any]:
    """Train a denoiser on a frozen VAE's latents and report its normalized v-MSE."""
    state = load_checkpoint(vae_checkpoint)
    if state.step == 0:
        raise FailedPreconditionError(f"{vae_checkpoint} holds an untrained VAE")
    model = state.model
    if cfg.latent_dim is not None and cfg.latent_dim != model.cfg.latent_dim:
        raise InvalidArgumentError(f"latent_dim {cfg.latent_dim} does not match the VAE ({model.cfg.latent_dim})")
    dataset = dataset if dataset is not None else build_dataset(state.cfg.dataset, state.cfg.model)
    if len(dataset) < 2:
        raise InvalidArgumentError("probe needs at least 2 items")

    _, vae_eval = dataset.split(state.cfg.dataset.eval_fraction, state.cfg.dataset.seed)
    measured_kl, measured_bps = measure_kl_bitrate(model, vae_eval)
    mel = evaluate_mel_distance(model, vae_eval, state.cfg.mel_scales)

    latents = extract_latents(model, dataset)
    train_idx, eval_idx = _split(len(dataset), cfg.eval_fraction, cfg.seed)
    labels = dataset.labels
    run = train_denoiser(cfg, latents[train_idx], labels[train_idx], dataset.num_classes)
    v_mse, v_power = evaluate_v_mse(run.denoiser, latents[eval_idx], run.schedule, cfg.eval_repeats,
                                    cfg.seed, labels[eval_idx])
    score = v_mse / v_power if v_power > 0 else 0.0

    held_out = latents[eval_idx]
    cond = labels[eval_idx] if cfg.conditioning == "class_label" else None
    samples = sample(run.denoiser, tuple(held_out.shape), cfg.sampler_steps, cfg.seed, cond, run.schedule)

    path = Path(vae_checkpoint)
    # sweep checkpoints live in <sweep>/<model_id>/
    vae_id = path.parent.name if path.parent.name else path.stem
    report = {
        "vae_id": vae_id,
        "model_id": vae_id,
        "checkpoint": str(path),
        "measured_kl": measured_kl,
        "measured_bitrate": measured_bps,
        "mel_distance": mel,
        "predictability_score": score,
        "eval_v_mse": v_mse,
        "eval_v_power": v_power,
        "init_train_loss": run.init_loss,
        "final_train_loss": run.losses[-1],
        "expected_v_power": run.expected_v_power,
        "sample_std": float(samples.std()),
        "latent_std": float(held_out.std()),
        "family": model.kind,
    }
    logger.info("Probe %s: %.1f bps, predictability %.4f", report["vae_id"], measured_bps, score)
    return report


def predictability_score(vae_checkpoint: Union[str, Path], cfg: DiffusionConfig,
                         dataset: Optional[AudioDataset] = None) -> float:
    """Held-out v-MSE / E[v^2]; lower means more predictable latents."""
    return probe_report(vae_checkpoint, cfg, dataset)["predictability_score"]
