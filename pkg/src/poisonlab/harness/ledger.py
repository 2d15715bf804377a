"""Append-only JSON-lines results store, one writer per experiment."""

from __future__ import annotations

import json
import os
import time

from filelock import FileLock

from ..backends.base import ConfigError


class Ledger:
    """Rows of {experiment_id, config_hash, stage, payload, timestamp}.

    Rows are never mutated or deleted; re-running a stage appends."""

    def __init__(self, path: str):
        self.path = path
        os.makedirs(path, exist_ok=True)
        self._file = os.path.join(path, "ledger.jsonl")
        self._lock = FileLock(os.path.join(path, "ledger.lock"))

    def append(self, experiment_id: str, config_hash: str, stage: str,
               payload: dict) -> dict:
        row = {"experiment_id": experiment_id, "config_hash": config_hash,
               "stage": stage, "payload": payload, "timestamp": time.time()}
        with self._lock:
            with open(self._file, "a") as f:
                f.write(json.dumps(row, sort_keys=True) + "\n")
        return row

    def rows(self, experiment_id: str | None = None) -> list[dict]:
        if not os.path.exists(self._file):
            return []
        out = []
        with open(self._file) as f:
            for line in f:
                row = json.loads(line)
                if experiment_id is None or row["experiment_id"] == experiment_id:
                    out.append(row)
        return out

    def payloads(self, experiment_id: str, stage: str | None = None) -> list[dict]:
        return [r["payload"] for r in self.rows(experiment_id)
                if stage is None or r["stage"] == stage]

    def require_rows(self, experiment_id: str) -> list[dict]:
        rows = self.rows(experiment_id)
        if not rows:
            raise ConfigError(f"no ledger rows for experiment {experiment_id!r}")
        return rows
