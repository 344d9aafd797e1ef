"""In-memory audio corpora: a deterministic synthetic generator and WAV folders.

Every item is mono float32 at the model sample rate, cut to one segment and
padded to a hop multiple, so batches stack without further work.
"""
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy.signal import chirp

from config.schema import DatasetSpec, ModelConfig
from config.settings import Settings
from core.audio_processor import AudioProcessor
from utilities.error_handler import InvalidArgumentError, log_error

logger = logging.getLogger(__name__)

SYNTHETIC_CLASSES = ("sine_mix", "chirp", "noise_burst", "am_tone")


@dataclass
class AudioDataset:
    waveforms: torch.Tensor  # [N, samples] float32
    labels: torch.Tensor  # [N] int64
    class_names: Tuple[str, ...]
    sample_rate_hz: int
    metadata: List[Dict[str, Any]] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.waveforms.dim() != 2:
            raise InvalidArgumentError(f"waveforms must be [N, samples], got {tuple(self.waveforms.shape)}")
        if self.labels.shape != (self.waveforms.shape[0],):
            raise InvalidArgumentError("labels must hold one entry per waveform")

    def __len__(self) -> int:
        return self.waveforms.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def content_hash(self) -> str:
        """sha256 over float32 sample bytes and labels"""
        digest = hashlib.sha256()
        digest.update(self.waveforms.detach().cpu().to(torch.float32).contiguous().numpy().tobytes())
        digest.update(self.labels.detach().cpu().to(torch.int64).numpy().tobytes())
        return digest.hexdigest()

    def subset(self, indices: Sequence[int]) -> "AudioDataset":
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        return AudioDataset(
            waveforms=self.waveforms[idx],
            labels=self.labels[idx],
            class_names=self.class_names,
            sample_rate_hz=self.sample_rate_hz,
            metadata=[self.metadata[i] for i in idx.tolist()] if self.metadata else [],
        )

    def split(self, eval_fraction: float, seed: int) -> Tuple["AudioDataset", "AudioDataset"]:
        """Seeded disjoint (train, eval) split; both sides non-empty"""
        if not 0.0 < eval_fraction <= 0.5:
            raise InvalidArgumentError(f"eval_fraction must be in (0, 0.5], got {eval_fraction}")
        n = len(self)
        if n < 2:
            raise InvalidArgumentError(f"need at least 2 items to split, got {n}")
        n_eval = min(max(1, int(round(n * eval_fraction))), n - 1)
        perm = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x5EED]).permutation(n)
        eval_idx = sorted(perm[:n_eval].tolist())
        train_idx = sorted(perm[n_eval:].tolist())
        return self.subset(train_idx), self.subset(eval_idx)


def segment_length(spec: DatasetSpec, sample_rate_hz: int, hop: int) -> int:
    """segment_s at the model rate, rounded up to a hop multiple"""
    raw = int(round(spec.segment_s * sample_rate_hz))
    return max(hop, int(math.ceil(raw / hop)) * hop)


def _pad_to(signal: np.ndarray, length: int) -> np.ndarray:
    if len(signal) >= length:
        return signal[:length]
    extra = length - len(signal)
    mode = "reflect" if extra < len(signal) else "constant"
    return np.pad(signal, (0, extra), mode=mode)


def _normalize(signal: np.ndarray, peak_level: float) -> np.ndarray:
    peak = float(np.max(np.abs(signal)))
    return signal * (peak_level / peak) if peak > 0 else signal


def _sine_mix(rng: np.random.Generator, t: np.ndarray, sr: int) -> Tuple[np.ndarray, Dict[str, Any]]:
    n_tones = int(rng.integers(2, 4))
    freqs = np.sort(rng.uniform(100.0, 0.35 * sr, size=n_tones))
    amps = rng.uniform(0.3, 1.0, size=n_tones)
    phases = rng.uniform(0, 2 * np.pi, size=n_tones)
    signal = sum(a * np.sin(2 * np.pi * f * t + p) for f, a, p in zip(freqs, amps, phases))
    return signal, {"freqs_hz": freqs.tolist(), "amps": amps.tolist()}


def _chirp(rng: np.random.Generator, t: np.ndarray, sr: int) -> Tuple[np.ndarray, Dict[str, Any]]:
    f0, f1 = rng.uniform(80.0, 0.4 * sr, size=2)
    method = "linear" if rng.random() < 0.5 else "logarithmic"
    signal = chirp(t, f0=f0, t1=t[-1] if len(t) > 1 else 1.0, f1=f1, method=method)
    return signal, {"f0_hz": float(f0), "f1_hz": float(f1), "method": method}


def _noise_burst(rng: np.random.Generator, t: np.ndarray, sr: int) -> Tuple[np.ndarray, Dict[str, Any]]:
    n_bursts = int(rng.integers(1, 5))
    onsets = np.sort(rng.uniform(0.0, t[-1], size=n_bursts))
    decays = rng.uniform(0.01, 0.15, size=n_bursts)
    noise = rng.standard_normal(len(t))
    envelope = np.zeros_like(t)
    for onset, decay in zip(onsets, decays):
        active = t >= onset
        envelope[active] += np.exp(-(t[active] - onset) / decay)
    return noise * envelope, {"onsets_s": onsets.tolist(), "decays_s": decays.tolist()}


def _am_tone(rng: np.random.Generator, t: np.ndarray, sr: int) -> Tuple[np.ndarray, Dict[str, Any]]:
    carrier = rng.uniform(150.0, 0.3 * sr)
    mod_freq = rng.uniform(1.0, 20.0)
    depth = rng.uniform(0.3, 0.9)
    signal = (1 + depth * np.sin(2 * np.pi * mod_freq * t)) * np.sin(2 * np.pi * carrier * t)
    return signal, {"carrier_hz": float(carrier), "mod_hz": float(mod_freq), "depth": float(depth)}


_GENERATORS = {
    "sine_mix": _sine_mix,
    "chirp": _chirp,
    "noise_burst": _noise_burst,
    "am_tone": _am_tone,
}


def generate_synthetic(spec: DatasetSpec, sample_rate_hz: int, hop: int) -> AudioDataset:
    """Round-robin over `spec.classes`; item i is a pure function of (seed, i)."""
    unknown = [c for c in spec.classes if c not in _GENERATORS]
    if unknown:
        raise InvalidArgumentError(f"unknown synthetic class {unknown[0]!r}; expected one of {SYNTHETIC_CLASSES}")

    raw_len = max(1, int(round(spec.segment_s * sample_rate_hz)))
    length = segment_length(spec, sample_rate_hz, hop)
    t = np.arange(raw_len) / sample_rate_hz
    class_names = tuple(dict.fromkeys(spec.classes))

    waves, labels, metadata = [], [], []
    for i in range(spec.n_items):
        name = spec.classes[i % len(spec.classes)]
        rng = np.random.default_rng([int(spec.seed) & 0xFFFFFFFF, i])
        signal, meta = _GENERATORS[name](rng, t, sample_rate_hz)
        signal = _pad_to(_normalize(np.asarray(signal, dtype=np.float64), Settings.PEAK_LEVEL), length)
        waves.append(signal.astype(np.float32))
        labels.append(class_names.index(name))
        metadata.append({"class": name, "index": i, **meta})

    logger.debug("Generated %d synthetic items of %d samples", spec.n_items, length)
    return AudioDataset(
        waveforms=torch.from_numpy(np.stack(waves)),
        labels=torch.tensor(labels, dtype=torch.long),
        class_names=class_names,
        sample_rate_hz=sample_rate_hz,
        metadata=metadata,
    )


def _segments(signal: np.ndarray, length: int) -> List[np.ndarray]:
    """Cut into full segments; a tail of at least half a segment is padded, shorter tails dropped."""
    if len(signal) <= length:
        return [_pad_to(signal, length)]
    out = [signal[start:start + length] for start in range(0, len(signal) - length + 1, length)]
    tail = len(signal) % length
    if tail >= length // 2:
        out.append(_pad_to(signal[-tail:], length))
    return out


def load_wav_dir(path: Union[str, Path], spec: DatasetSpec, sample_rate_hz: int, hop: int,
                 max_items: Optional[int] = None) -> AudioDataset:
    """Recursively ingest *.wav; the parent folder name is the class label.

    Unreadable files are skipped and listed in `dataset.warnings`.
    """
    root = Path(path)
    if not root.is_dir():
        raise InvalidArgumentError(f"wav_dir {root} is not a directory")
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in Settings.ALLOWED_EXTENSIONS)
    if not files:
        raise InvalidArgumentError(f"no WAV files found under {root}")

    processed = AudioProcessor(sample_rate_hz).process_batch(files)
    length = segment_length(spec, sample_rate_hz, hop)

    waves, label_names, metadata, warnings = [], [], [], []
    for file_path in files:
        entry = processed[str(file_path)]
        warnings.extend(f"{file_path.name}: {w}" for w in entry["warnings"])
        if entry["content"] is None:
            log_error(f"Skipped unreadable WAV {file_path}")
            continue
        label = file_path.parent.name if file_path.parent != root else root.name
        for k, seg in enumerate(_segments(entry["content"], length)):
            waves.append(seg.astype(np.float32))
            label_names.append(label)
            metadata.append({"file": str(file_path.relative_to(root)), "segment": k, **entry["metadata"]})

    if not waves:
        raise InvalidArgumentError(f"none of the {len(files)} WAV files under {root} could be read")
    if max_items is not None:
        waves, label_names, metadata = waves[:max_items], label_names[:max_items], metadata[:max_items]

    class_names = tuple(sorted(set(label_names)))
    logger.info("Loaded %d segments from %d WAV files (%d warnings)", len(waves), len(files), len(warnings))
    return AudioDataset(
        waveforms=torch.from_numpy(np.stack(waves)),
        labels=torch.tensor([class_names.index(n) for n in label_names], dtype=torch.long),
        class_names=class_names,
        sample_rate_hz=sample_rate_hz,
        metadata=metadata,
        warnings=warnings,
    )


def build_dataset(spec: DatasetSpec, model_cfg: ModelConfig) -> AudioDataset:
    if spec.source == "synthetic":
        return generate_synthetic(spec, model_cfg.sample_rate_hz, model_cfg.hop)
    return load_wav_dir(spec.wav_dir, spec, model_cfg.sample_rate_hz, model_cfg.hop, max_items=spec.n_items)
