import logging
import math
from pathlib import Path
from typing import Any, Dict, Optional, Union
from config.settings import Settings

logger = logging.getLogger(__name__)


class RatebenchError(Exception):
    """Base class; `code` is the stable machine-readable error kind"""

    code = "internal"

    def to_dict(self) -> Dict[str, Any]:
        return {"error": self.code, "type": type(self).__name__, "message": str(self)}


class InvalidArgumentError(RatebenchError, ValueError):
    code = "invalid-argument"


class FailedPreconditionError(RatebenchError, RuntimeError):
    code = "failed-precondition"


class UnsupportedVersionError(RatebenchError):
    code = "unsupported-version"


class CheckpointError(RatebenchError):
    code = "data-loss"


class ConfigError(InvalidArgumentError):
    """Config problem tied to a dotted key such as `bottleneck.passthrough_prob`"""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
        self.detail = message

    def to_dict(self) -> Dict[str, Any]:
        data = super().to_dict()
        data["key"] = self.key
        return data


class NonFiniteLossError(RatebenchError, ArithmeticError):
    code = "aborted"

    def __init__(self, snapshot: Dict[str, Any]):
        super().__init__(f"Non-finite loss at step {snapshot.get('step')}: {snapshot}")
        self.snapshot = snapshot

    def to_dict(self) -> Dict[str, Any]:
        data = super().to_dict()
        data["snapshot"] = self.snapshot
        return data


def require(condition: bool, message: str) -> None:
    if not condition:
        raise InvalidArgumentError(message)


def check_non_negative(name: str, value: float) -> float:
    if not math.isfinite(value) or value < 0:
        raise InvalidArgumentError(f"{name} must be a finite value >= 0, got {value}")
    return value


def check_positive(name: str, value: float) -> float:
    if not math.isfinite(value) or value <= 0:
        raise InvalidArgumentError(f"{name} must be a finite value > 0, got {value}")
    return value


def log_error(message: str, exc: Optional[BaseException] = None) -> None:
    """Log a recoverable failure (sweep point, skipped file) without raising"""
    if exc is not None:
        logger.error("%s (%s: %s)", message, type(exc).__name__, exc)
    else:
        logger.error(message)


class FileLimitHandler:
    """Handles all file size and format validations"""

    @staticmethod
    def check_file_size(file_path: Union[str, Path]) -> Dict[str, Union[bool, str]]:
        """Validate file size limits"""
        size = Path(file_path).stat().st_size
        if size > Settings.MAX_FILE_SIZE:
            return {
                'valid': False,
                'message': (
                    f"File exceeds {Settings.MAX_FILE_SIZE/1024/1024:.0f}MB limit. "
                    f"Actual size: {size/1024/1024:.2f}MB"
                )
            }
        if size == 0:
            return {'valid': False, 'message': "File is empty"}
        return {'valid': True, 'message': ""}

    @staticmethod
    def validate_extension(filename: Union[str, Path]) -> bool:
        """Check against allowed extensions"""
        return Path(filename).suffix.lower() in Settings.ALLOWED_EXTENSIONS
