from pathlib import Path
from typing import Tuple, Union

from utilities.error_handler import FileLimitHandler

WAV_HEADER_BYTES = 44


class WavValidator:
    """Pre-parse checks for WAV files"""

    @classmethod
    def validate_file(cls, file_path: Union[str, Path]) -> Tuple[bool, str]:
        """Run all checks; the first failure wins"""
        checks = [
            cls._check_extension,
            cls._check_size,
            cls._check_riff_header,
        ]

        for check in checks:
            valid, message = check(file_path)
            if not valid:
                return False, message

        return True, "File validated"

    @classmethod
    def _check_extension(cls, file_path: Union[str, Path]) -> Tuple[bool, str]:
        if not FileLimitHandler.validate_extension(file_path):
            return False, f"Unsupported extension: {Path(file_path).suffix.lower() or '<none>'}"
        return True, ""

    @classmethod
    def _check_size(cls, file_path: Union[str, Path]) -> Tuple[bool, str]:
        validation = FileLimitHandler.check_file_size(file_path)
        if not validation['valid']:
            return False, validation['message']
        if Path(file_path).stat().st_size < WAV_HEADER_BYTES:
            return False, "File too small to hold a WAV header"
        return True, ""

    @classmethod
    def _check_riff_header(cls, file_path: Union[str, Path]) -> Tuple[bool, str]:
        """RIFF....WAVE (or RIFX for big-endian)"""
        with open(file_path, 'rb') as f:
            header = f.read(12)
        if header[:4] not in (b'RIFF', b'RIFX') or header[8:12] != b'WAVE':
            return False, "Invalid WAV header"
        return True, ""
