from __future__ import annotations

import hashlib
import json
import logging
import sqlite3
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from dual_positioning.models import ScenePreset, SolverOptions, dataclass_to_dict


logger = logging.getLogger(__name__)


def preset_fingerprint(preset: ScenePreset) -> str:
    """Hash of the anchor layout, UD region and default grid of a preset."""
    payload = json.dumps(
        {
            "a": [a.position.coords for a in preset.scenario.anchors_a],
            "b": [b.position.coords for b in preset.scenario.anchors_b],
            "low": preset.ud_region.low,
            "high": preset.ud_region.high,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


class SweepCache:
    def __init__(self, path: Path) -> None:
        """Initialise a lightweight SQLite cache for sweep payloads.

        Input:
            path: SQLite file path where cache rows should be stored.
        """
        self._path = path
        self._path.parent.mkdir(parents=True, exist_ok=True)
        self._schema_ready = False

    def _connect(self) -> sqlite3.Connection:
        conn = sqlite3.connect(self._path, timeout=30)
        conn.execute("PRAGMA busy_timeout = 30000")
        conn.execute("PRAGMA journal_mode = WAL")
        return conn

    def _ensure_schema(self) -> None:
        """Create the cache table if it does not already exist."""
        if self._schema_ready:
            return

        last_error: Exception | None = None
        for attempt in range(3):
            try:
                with self._connect() as conn:
                    conn.execute(
                        """
                        CREATE TABLE IF NOT EXISTS sweep_cache (
                            cache_key TEXT PRIMARY KEY,
                            payload TEXT NOT NULL,
                            created_at TEXT NOT NULL
                        )
                        """
                    )
                    conn.commit()
                self._schema_ready = True
                return
            except sqlite3.OperationalError as exc:
                last_error = exc
                if "locked" not in str(exc).lower() or attempt >= 2:
                    raise
                time.sleep(0.5 * (attempt + 1))

        if last_error is not None:
            raise last_error

    def make_key(
        self,
        *,
        preset: ScenePreset,
        methods: Sequence[str],
        seed: int,
        runs: int,
        noise_grid: Sequence[float],
        options: SolverOptions,
        extra: str = "",
    ) -> str:
        """Build a deterministic cache key from the sweep request.

        Inputs:
            preset: Scene preset; only its geometry enters the key.
            methods: Method names in output order.
            seed: Master seed.
            runs: Runs per sigma step.
            noise_grid: Sigma values, meters.
            options: CDL solver options.
            extra: Any further switch that changes the result (zero step, CRLB mode).

        Output:
            SHA-256 cache key string.
        """
        raw = "|".join(
            [
                preset.name,
                preset_fingerprint(preset),
                ",".join(methods),
                str(int(seed)),
                str(int(runs)),
                ",".join(repr(float(s)) for s in noise_grid),
                json.dumps(dataclass_to_dict(options), sort_keys=True),
                extra,
            ]
        )
        return hashlib.sha256(raw.encode("utf-8")).hexdigest()

    def get(self, cache_key: str) -> dict[str, Any] | None:
        """Fetch a cached sweep payload by key; `None` on a miss or unreadable row."""
        self._ensure_schema()
        with self._connect() as conn:
            row = conn.execute(
                "SELECT payload FROM sweep_cache WHERE cache_key = ?",
                (cache_key,),
            ).fetchone()

        if not row:
            logger.debug("sweep cache miss %s", cache_key[:12])
            return None

        try:
            parsed = json.loads(row[0])
            if isinstance(parsed, dict):
                logger.debug("sweep cache hit %s", cache_key[:12])
                return parsed
        except json.JSONDecodeError:
            return None

        return None

    def set(self, cache_key: str, payload: Any) -> None:
        """Insert or update a payload (a dataclass graph or plain dict) under a key."""
        self._ensure_schema()
        encoded = json.dumps(dataclass_to_dict(payload), ensure_ascii=True)
        created_at = datetime.now(timezone.utc).isoformat()

        with self._connect() as conn:
            conn.execute(
                """
                INSERT INTO sweep_cache (cache_key, payload, created_at)
                VALUES (?, ?, ?)
                ON CONFLICT(cache_key) DO UPDATE SET
                    payload = excluded.payload,
                    created_at = excluded.created_at
                """,
                (cache_key, encoded, created_at),
            )
            conn.commit()


class NoOpSweepCache:
    """Cache implementation that bypasses all persistence operations."""

    def make_key(self, **kwargs: Any) -> str:
        return "noop"

    def get(self, cache_key: str) -> dict[str, Any] | None:
        return None

    def set(self, cache_key: str, payload: Any) -> None:
        return None
