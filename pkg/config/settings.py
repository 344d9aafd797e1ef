import os
from dotenv import load_dotenv
from pathlib import Path

# Load environment
env_path = Path(__file__).parent.parent / '.env'
load_dotenv(env_path)

class Settings:
    """Central configuration for all modules"""

    # Output locations
    OUTPUT_ROOT = os.getenv('RATEBENCH_OUTPUT_ROOT', 'runs')
    LOG_DIR = os.getenv('RATEBENCH_LOG_DIR', 'logs')

    # Logging
    LOG_LEVEL = os.getenv('RATEBENCH_LOG_LEVEL', 'INFO').upper()
    LOG_MAX_BYTES = int(os.getenv('RATEBENCH_LOG_MAX_BYTES', 10 * 1024 * 1024))  # 10MB
    LOG_BACKUPS = int(os.getenv('RATEBENCH_LOG_BACKUPS', 3))

    # Processing Limits
    MAX_FILE_SIZE = int(os.getenv('RATEBENCH_MAX_FILE_SIZE', 512 * 1024 * 1024))  # 512MB
    PARALLEL_WORKERS = int(os.getenv('RATEBENCH_PARALLEL_WORKERS', 1))
    TORCH_THREADS = int(os.getenv('RATEBENCH_TORCH_THREADS', 0))  # 0 = torch default
    POINT_TIMEOUT = int(os.getenv('RATEBENCH_POINT_TIMEOUT', 6 * 3600))

    # Ingestion
    ALLOWED_EXTENSIONS = ['.wav']
    PEAK_LEVEL = 0.95

    @classmethod
    def output_root(cls) -> Path:
        """Output root, re-read so late env overrides are honoured"""
        return Path(os.getenv('RATEBENCH_OUTPUT_ROOT', cls.OUTPUT_ROOT))

    @classmethod
    def verify(cls):
        """Validate critical configurations"""
        problems = []
        if cls.PARALLEL_WORKERS < 1:
            problems.append('RATEBENCH_PARALLEL_WORKERS must be >= 1')
        if cls.TORCH_THREADS < 0:
            problems.append('RATEBENCH_TORCH_THREADS must be >= 0')
        if cls.MAX_FILE_SIZE <= 0:
            problems.append('RATEBENCH_MAX_FILE_SIZE must be positive')
        if cls.LOG_LEVEL not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            problems.append(f'Unknown RATEBENCH_LOG_LEVEL: {cls.LOG_LEVEL}')
        if problems:
            raise EnvironmentError(f"Invalid env vars: {'; '.join(problems)}")

# Validate on import
Settings.verify()
