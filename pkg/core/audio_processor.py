import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from config.settings import Settings
from core.wav_checks import WavValidator
from utilities.error_handler import InvalidArgumentError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def pcm_to_float(data: np.ndarray) -> np.ndarray:
    """Integer PCM or float samples -> float32 in [-1, 1]"""
    if data.dtype == np.uint8:
        return (data.astype(np.float32) - 128.0) / 128.0
    if data.dtype == np.int16:
        return data.astype(np.float32) / 32768.0
    if data.dtype == np.int32:
        # scipy left-justifies 24-bit PCM into int32
        return (data.astype(np.float64) / 2147483648.0).astype(np.float32)
    if np.issubdtype(data.dtype, np.floating):
        return data.astype(np.float32)
    raise InvalidArgumentError(f"Unsupported WAV sample type: {data.dtype}")


def resample(signal: np.ndarray, orig_rate: int, target_rate: int) -> np.ndarray:
    """Polyphase resampling with the reduced up/down ratio"""
    if orig_rate == target_rate:
        return signal
    g = math.gcd(int(orig_rate), int(target_rate))
    return resample_poly(signal, target_rate // g, orig_rate // g).astype(np.float32)


class AudioProcessor:
    """WAV decoding to mono float32 at the model sample rate"""

    def __init__(self, sample_rate_hz: int, peak_level: Optional[float] = Settings.PEAK_LEVEL):
        self.sample_rate_hz = int(sample_rate_hz)
        self.peak_level = peak_level

    def process_batch(self, file_paths: List[PathLike]) -> Dict[str, Dict]:
        """
        Decode multiple files in parallel
        Returns: {
            "a.wav": {
                "content": np.ndarray | None,
                "metadata": {"original_sample_rate": 44100, "channels": 2, ...},
                "warnings": []
            }
        }
        """
        results = {}
        with ThreadPoolExecutor(max_workers=Settings.PARALLEL_WORKERS) as executor:
            future_to_file = {
                executor.submit(self._process_single, fp): str(fp)
                for fp in file_paths
            }

            for future, file_path in future_to_file.items():
                try:
                    content, metadata, warnings = future.result()
                    results[file_path] = {
                        "content": content,
                        "metadata": metadata,
                        "warnings": warnings
                    }
                except Exception as e:
                    logger.warning("Skipping %s: %s", file_path, e)
                    results[file_path] = {
                        "content": None,
                        "metadata": {},
                        "warnings": [f"Processing failed: {e}"]
                    }
        return results

    def _process_single(self, file_path: PathLike) -> Tuple[np.ndarray, Dict, List[str]]:
        warnings = []

        valid, message = WavValidator.validate_file(file_path)
        if not valid:
            raise InvalidArgumentError(message)

        rate, data = wavfile.read(str(file_path))
        channels = 1 if data.ndim == 1 else data.shape[1]
        signal = pcm_to_float(data)
        if signal.ndim == 2:
            signal = signal.mean(axis=1)
        if signal.size == 0:
            raise InvalidArgumentError("WAV file holds no samples")
        if not np.isfinite(signal).all():
            raise InvalidArgumentError("WAV file holds non-finite samples")

        signal = resample(signal, rate, self.sample_rate_hz)

        peak = float(np.max(np.abs(signal)))
        if self.peak_level is not None:
            if peak > 0:
                signal = signal * (self.peak_level / peak)
            else:
                warnings.append("Silent file")

        metadata = {
            "format": "wav",
            "size": Path(file_path).stat().st_size,
            "original_sample_rate": int(rate),
            "channels": int(channels),
            "sample_type": str(data.dtype),
            "duration_s": len(signal) / self.sample_rate_hz,
        }
        return signal.astype(np.float32), metadata, warnings
