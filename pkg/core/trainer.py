"""Seeded training loop, rate measurement and checkpoints.

Determinism contract: given the config, every step is a pure function of the
checkpointed state (weights, optimizer moments, sampling generator, KL EMA)
and the step index, which fixes both the data order and the passthrough draw.
"""
import functools
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch

from config.loader import train_config_from_dict
from config.schema import TrainConfig
from config.settings import Settings
from core.audio_model import AudioAutoencoder, AudioBatch, build_model
from core.bottleneck import BottleneckResult, choose_passthrough, split_features
from core.datasets import AudioDataset, build_dataset
from core.objectives import (
    DEFAULT_MEL_SCALES,
    LossReport,
    build_discriminator,
    discriminator_loss,
    generator_adv_loss,
    mel_distance,
    recon_terms,
    total_objective,
)
from core.rate_core import (
    free_bits_loss,
    gaussian_kl,
    gaussian_kl_elementwise,
    kl_to_bitrate,
    plain_kl_rate,
    target_kl_loss,
)
from database.results_store import JsonlStore
from utilities.error_handler import (
    CheckpointError,
    FailedPreconditionError,
    InvalidArgumentError,
    NonFiniteLossError,
    UnsupportedVersionError,
)

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
CHECKPOINT_KIND = "ratebench-vae"
EVAL_BATCH_SIZE = 16

Waveforms = Union[torch.Tensor, AudioDataset]


@dataclass
class TrainState:
    cfg: TrainConfig
    model: AudioAutoencoder
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    discriminator: Optional[torch.nn.Module] = None
    disc_optimizer: Optional[torch.optim.Optimizer] = None
    step: int = 0
    kl_ema: Optional[float] = None


@dataclass
class MetricsRow:
    step: int
    total: float
    recon: float
    rate: float
    adv: float
    feature_match: float
    commitment: float
    passthrough: bool
    measured_kl_per_frame: Optional[float]
    measured_bitrate_bps: Optional[float]
    mel_distance: Optional[float] = None
    eval_kl_per_frame: Optional[float] = None
    components: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class TrainResult:
    state: TrainState
    rows: List[MetricsRow]
    measured_kl: float
    measured_bitrate_bps: float
    mel_distance: float
    checkpoint_path: Path
    metrics_path: Path


def build_state(cfg: TrainConfig) -> TrainState:
    model = build_model(cfg)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    discriminator = build_discriminator(cfg.weights, cfg.disc_channels, cfg.model.seed)
    disc_optimizer = None
    if discriminator is not None:
        disc_optimizer = torch.optim.AdamW(discriminator.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    return TrainState(
        cfg=cfg,
        model=model,
        optimizer=optimizer,
        generator=torch.Generator().manual_seed(int(cfg.seed)),
        discriminator=discriminator,
        disc_optimizer=disc_optimizer,
    )


@functools.lru_cache(maxsize=8)
def _epoch_permutation(seed: int, epoch: int, n_items: int) -> Tuple[int, ...]:
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, int(epoch)])
    return tuple(rng.permutation(n_items).tolist())


def batch_indices_for_step(step: int, n_items: int, batch_size: int, seed: int) -> List[int]:
    """Item indices of batch `step`: consecutive slices of per-epoch seeded permutations."""
    if n_items < 1:
        raise InvalidArgumentError("training set is empty")
    out: List[int] = []
    pos = step * batch_size
    while len(out) < batch_size:
        epoch, offset = divmod(pos, n_items)
        take = min(batch_size - len(out), n_items - offset)
        out.extend(_epoch_permutation(seed, epoch, n_items)[offset:offset + take])
        pos += take
    return out


def rate_terms(result: BottleneckResult, cfg: TrainConfig) -> Tuple[Optional[torch.Tensor], Optional[float]]:
    """(rate loss or None, batch-mean per-frame KL or None) for one bottleneck result."""
    if result.rate_excluded:
        return None, None
    measured = result.per_frame_kl.mean()
    if cfg.bottleneck.kind == "vq":
        return None, float(measured.detach())

    rate_loss = cfg.bottleneck.rate_loss
    if rate_loss == "target_kl":
        term = target_kl_loss(measured, cfg.rate_spec)
    elif rate_loss == "kl":
        term = plain_kl_rate(measured)
    elif rate_loss == "free_bits":
        per_dim = gaussian_kl_elementwise(result.posterior).reshape(-1, result.posterior.latent_dim).mean(dim=0)
        term = free_bits_loss(per_dim, cfg.bottleneck.free_bits_nats)
    else:
        term = None
    return term, float(measured.detach())


def train_step(state: TrainState, batch: Union[AudioBatch, torch.Tensor]) -> Tuple[TrainState, LossReport]:
    cfg = state.cfg
    x = batch.waveform if isinstance(batch, AudioBatch) else batch
    model = state.model
    model.train()

    passthrough = choose_passthrough(state.step, cfg.bottleneck.passthrough_prob, cfg.seed)
    recon, result = model(x, training=True, passthrough=passthrough, generator=state.generator)
    terms = recon_terms(x, recon, cfg.model.sample_rate_hz, cfg.weights, cfg.mel_scales, cfg.stft_ffts)
    rate_term, measured = rate_terms(result, cfg)

    adv_terms = None
    components = {k: float(v.detach()) for k, v in terms.items() if k != "recon"}
    if state.discriminator is not None:
        d_loss = discriminator_loss(x, recon, state.discriminator)
        state.disc_optimizer.zero_grad()
        d_loss.backward()
        state.disc_optimizer.step()
        components["disc"] = float(d_loss.detach())
        adv_terms = generator_adv_loss(x, recon, state.discriminator)
    components.update(result.stats)

    report = total_objective(terms["recon"], rate_term, adv_terms, cfg.weights,
                             aux_losses=result.aux_losses, measured_kl=measured, components=components)
    if not math.isfinite(float(report.total.detach())):
        snapshot = {"step": state.step, "passthrough": passthrough, **report.as_dict()}
        raise NonFiniteLossError(snapshot)

    state.optimizer.zero_grad()
    report.total.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    state.optimizer.step()

    if measured is not None:
        if state.kl_ema is None:
            state.kl_ema = measured
        else:
            state.kl_ema = cfg.kl_ema_decay * state.kl_ema + (1 - cfg.kl_ema_decay) * measured
    state.step += 1
    return state, report


def _waveforms(eval_set: Waveforms) -> torch.Tensor:
    waves = eval_set.waveforms if isinstance(eval_set, AudioDataset) else eval_set
    if waves is None or waves.dim() != 2 or waves.shape[0] == 0:
        raise InvalidArgumentError("eval set is empty")
    return waves


def _chunks(waves: torch.Tensor, batch_size: int = EVAL_BATCH_SIZE):
    for start in range(0, waves.shape[0], batch_size):
        yield waves[start:start + batch_size]


@torch.no_grad()
def per_dim_kl(model: AudioAutoencoder, eval_set: Waveforms) -> torch.Tensor:
    """Expected KL per latent dimension over every eval frame, [D]."""
    if model.kind != "gaussian":
        raise FailedPreconditionError("per-dimension KL is only defined for gaussian bottlenecks")
    waves = _waveforms(eval_set)
    model.eval()
    total = torch.zeros(model.cfg.latent_dim, dtype=torch.float64)
    frames = 0
    for chunk in _chunks(waves):
        post = split_features(model.encode(chunk), model.cfg.latent_dim)
        kl = gaussian_kl_elementwise(post).reshape(-1, model.cfg.latent_dim)
        total += kl.sum(dim=0).to(torch.float64)
        frames += kl.shape[0]
    return (total / frames).to(torch.float32)


@torch.no_grad()
def measure_kl_bitrate(model: AudioAutoencoder, eval_set: Waveforms) -> Tuple[float, float]:
    """Eval-mode mean per-frame KL and its bitrate."""
    waves = _waveforms(eval_set)
    if model.kind == "vq":
        kl = model.bottleneck.structural_kl_nats
    else:
        model.eval()
        total, frames = 0.0, 0
        for chunk in _chunks(waves):
            per_frame = gaussian_kl(split_features(model.encode(chunk), model.cfg.latent_dim))
            total += float(per_frame.to(torch.float64).sum())
            frames += per_frame.numel()
        kl = total / frames
    return kl, kl_to_bitrate(kl, model.frame_rate_hz)


@torch.no_grad()
def evaluate_mel_distance(model: AudioAutoencoder, eval_set: Waveforms,
                          scales=None) -> float:
    """Item-weighted mean mel distance of eval-mode reconstructions."""
    waves = _waveforms(eval_set)
    scales = scales or DEFAULT_MEL_SCALES
    model.eval()
    total = 0.0
    for chunk in _chunks(waves):
        recon, _ = model(chunk, training=False)
        total += float(mel_distance(chunk, recon, model.cfg.sample_rate_hz, scales)) * chunk.shape[0]
    return total / waves.shape[0]


def save_checkpoint(state: TrainState, path: Union[str, Path]) -> Path:
    """Atomic write of plain containers and tensors only."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": CHECKPOINT_KIND,
        "config": state.cfg.to_dict(),
        "model": state.model.state_dict(),
        "discriminator": state.discriminator.state_dict() if state.discriminator is not None else None,
        "optimizer": state.optimizer.state_dict(),
        "disc_optimizer": state.disc_optimizer.state_dict() if state.disc_optimizer is not None else None,
        "step": int(state.step),
        "kl_ema": state.kl_ema,
        "generator_state": state.generator.get_state(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def read_checkpoint(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f"{path} is not a ratebench checkpoint")
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"checkpoint format_version {version} is not supported (expected {FORMAT_VERSION})")
    return payload


def load_checkpoint(path: Union[str, Path]) -> TrainState:
    payload = read_checkpoint(path)
    cfg = train_config_from_dict(payload["config"])
    state = build_state(cfg)
    try:
        state.model.load_state_dict(payload["model"])
        state.optimizer.load_state_dict(payload["optimizer"])
        if state.discriminator is not None:
            state.discriminator.load_state_dict(payload["discriminator"])
            state.disc_optimizer.load_state_dict(payload["disc_optimizer"])
        state.generator.set_state(payload["generator_state"])
    except (KeyError, RuntimeError, ValueError, TypeError) as e:
        raise CheckpointError(f"checkpoint {path} does not match its config: {e}") from e
    state.step = int(payload["step"])
    state.kl_ema = payload["kl_ema"]
    state.model.eval()
    return state


def _row(state: TrainState, report: LossReport, passthrough: bool) -> MetricsRow:
    kl = state.kl_ema
    return MetricsRow(
        step=state.step,
        total=float(report.total.detach()),
        recon=report.recon,
        rate=report.rate,
        adv=report.adv,
        feature_match=report.feature_match,
        commitment=report.commitment,
        passthrough=passthrough,
        measured_kl_per_frame=kl,
        measured_bitrate_bps=kl_to_bitrate(kl, state.cfg.model.frame_rate_hz) if kl is not None else None,
        components=report.components,
    )


def train(cfg: TrainConfig, output_dir: Optional[Union[str, Path]] = None,
          dataset: Optional[AudioDataset] = None, resume: bool = True) -> TrainResult:
    """Train to `cfg.steps`, writing metrics rows and checkpoints under `output_dir`.

    An existing checkpoint with the same config is resumed; metrics rows past
    its step are dropped so the stream matches an uninterrupted run.
    """
    out = Path(output_dir or cfg.output_dir or Settings.output_root() / "train")
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / cfg.checkpoint_file
    metrics = JsonlStore(out / cfg.metrics_file)

    dataset = dataset if dataset is not None else build_dataset(cfg.dataset, cfg.model)
    train_set, eval_set = dataset.split(cfg.dataset.eval_fraction, cfg.dataset.seed)

    if resume and ckpt_path.exists():
        state = load_checkpoint(ckpt_path)
        if state.cfg.to_dict() != cfg.to_dict():
            raise FailedPreconditionError(f"{ckpt_path} was trained with a different config; use a new output dir")
        logger.info("Resuming from %s at step %d", ckpt_path, state.step)
        metrics.replace_records(r for r in metrics.read_records() if r.get("step", 0) <= state.step)
    else:
        state = build_state(cfg)
        metrics.replace_records([])

    rows = [MetricsRow(**r) for r in metrics.read_records()]
    logger.info("Training %s model (%d params) for %d steps, target %.3f nats/frame (%.1f bps)",
                cfg.bottleneck.kind, state.model.num_parameters(), cfg.steps,
                cfg.rate_spec.target_kl_nats, cfg.rate_spec.target_bitrate_bps)

    while state.step < cfg.steps:
        idx = batch_indices_for_step(state.step, len(train_set), cfg.batch_size, cfg.seed)
        batch = AudioBatch(train_set.waveforms[idx], cfg.model.sample_rate_hz)
        passthrough = choose_passthrough(state.step, cfg.bottleneck.passthrough_prob, cfg.seed)
        state, report = train_step(state, batch)

        done = state.step == cfg.steps
        evaluate = state.step % cfg.eval_every == 0 or done
        if state.step % cfg.log_every == 0 or evaluate:
            row = _row(state, report, passthrough)
            if evaluate:
                row.mel_distance = evaluate_mel_distance(state.model, eval_set, cfg.mel_scales)
                row.eval_kl_per_frame, _ = measure_kl_bitrate(state.model, eval_set)
            metrics.insert_record(row.to_dict())
            rows.append(row)
            logger.info("step %d loss %.4f recon %.4f rate %.4f kl %s bps %s mel %s",
                        row.step, row.total, row.recon, row.rate,
                        _fmt(row.measured_kl_per_frame), _fmt(row.measured_bitrate_bps), _fmt(row.mel_distance))
            if evaluate:
                save_checkpoint(state, ckpt_path)

    if not ckpt_path.exists():
        save_checkpoint(state, ckpt_path)
    kl, bps = measure_kl_bitrate(state.model, eval_set)
    mel = evaluate_mel_distance(state.model, eval_set, cfg.mel_scales)
    return TrainResult(state, rows, kl, bps, mel, ckpt_path, metrics.path)


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else f"{value:.4f}"
