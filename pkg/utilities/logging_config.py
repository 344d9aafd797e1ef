import logging
from pathlib import Path
from typing import Optional

from concurrent_log_handler import ConcurrentRotatingFileHandler

from config.settings import Settings

_FORMAT = "%(asctime)s %(levelname)s [%(processName)s] %(name)s: %(message)s"
_configured = False


def configure_logging(level: Optional[str] = None, log_dir: Optional[Path] = None) -> None:
    """Console + rotating file handler shared safely by sweep worker processes"""
    global _configured
    if _configured:
        return

    root = logging.getLogger()
    root.setLevel(level or Settings.LOG_LEVEL)
    formatter = logging.Formatter(_FORMAT)

    console = logging.StreamHandler()
    console.setFormatter(formatter)
    root.addHandler(console)

    log_dir = Path(log_dir or Settings.LOG_DIR)
    try:
        log_dir.mkdir(parents=True, exist_ok=True)
        file_handler = ConcurrentRotatingFileHandler(
            str(log_dir / "ratebench.log"),
            maxBytes=Settings.LOG_MAX_BYTES,
            backupCount=Settings.LOG_BACKUPS,
        )
        file_handler.setFormatter(formatter)
        root.addHandler(file_handler)
    except OSError as e:
        root.warning("File logging disabled: %s", e)

    # torchaudio/matplotlib chatter
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    _configured = True
