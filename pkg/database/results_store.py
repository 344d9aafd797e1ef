"""Append-only JSON-lines records guarded by an exclusive file lock.

Sweep workers in separate processes append to the same files; portalocker
serializes writers so lines never interleave.
"""
import json
import logging
import math
import os
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Union

import portalocker

from utilities.error_handler import CheckpointError

logger = logging.getLogger(__name__)

LOCK_TIMEOUT = 60  # seconds


def _json_default(value: Any):
    if hasattr(value, "item"):
        return value.item()
    if isinstance(value, (set, tuple)):
        return list(value)
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def _sanitize(value: Any) -> Any:
    """NaN/inf are not JSON; store them as null"""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _sanitize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_sanitize(v) for v in value]
    return value


class JsonlStore:
    """One JSON object per line"""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    def _lock(self, mode: str):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        return portalocker.Lock(str(self.path), mode=mode, timeout=LOCK_TIMEOUT, encoding="utf-8")

    def insert_record(self, record: Dict[str, Any]) -> Dict[str, Any]:
        """Append a single record"""
        line = json.dumps(_sanitize(record), default=_json_default, sort_keys=True)
        with self._lock("a") as f:
            f.write(line + "\n")
            f.flush()
            os.fsync(f.fileno())
        return record

    def insert_many(self, records: Iterable[Dict[str, Any]]) -> int:
        lines = [json.dumps(_sanitize(r), default=_json_default, sort_keys=True) for r in records]
        if not lines:
            return 0
        with self._lock("a") as f:
            f.write("\n".join(lines) + "\n")
            f.flush()
            os.fsync(f.fileno())
        return len(lines)

    def read_records(self, where: Optional[Callable[[Dict[str, Any]], bool]] = None) -> List[Dict[str, Any]]:
        """All records in append order; a torn trailing line is ignored"""
        if not self.path.exists():
            return []
        records = []
        with open(self.path, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                if lineno == len(lines):
                    logger.warning("Ignoring torn last line in %s", self.path)
                    continue
                raise CheckpointError(f"{self.path}:{lineno} is not valid JSON: {e}") from e
            if where is None or where(record):
                records.append(record)
        return records

    def replace_records(self, records: Iterable[Dict[str, Any]]) -> None:
        """Rewrite the file atomically under the lock (used when truncating on resume)"""
        lines = [json.dumps(_sanitize(r), default=_json_default, sort_keys=True) for r in records]
        tmp = self.path.with_suffix(self.path.suffix + ".tmp")
        with self._lock("a"):
            with open(tmp, "w", encoding="utf-8") as f:
                f.write("".join(line + "\n" for line in lines))
            os.replace(tmp, self.path)

    def latest_by(self, key: str) -> Dict[Any, Dict[str, Any]]:
        """Last record per value of `key`"""
        latest = {}
        for record in self.read_records():
            if key in record:
                latest[record[key]] = record
        return latest


class ResultsStore:
    """Sweep directory layout: points.jsonl (RDPoints) and status.jsonl (per-point outcomes)"""

    POINTS_FILE = "points.jsonl"
    STATUS_FILE = "status.jsonl"

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.points = JsonlStore(self.root / self.POINTS_FILE)
        self.status = JsonlStore(self.root / self.STATUS_FILE)

    def insert_point(self, point: Dict[str, Any]) -> None:
        self.points.insert_record(point)

    def get_point(self, model_id: str) -> Optional[Dict[str, Any]]:
        return self.points.latest_by("model_id").get(model_id)

    def list_points(self) -> List[Dict[str, Any]]:
        """Latest record per model_id, in first-seen order"""
        order, latest = [], {}
        for record in self.points.read_records():
            mid = record.get("model_id")
            if mid not in latest:
                order.append(mid)
            latest[mid] = record
        return [latest[m] for m in order]

    def record_status(self, model_id: str, status: str, **details: Any) -> None:
        self.status.insert_record({"model_id": model_id, "status": status, **details})

    def failures(self) -> List[Dict[str, Any]]:
        latest = self.status.latest_by("model_id")
        return [r for r in latest.values() if r.get("status") == "failed"]
