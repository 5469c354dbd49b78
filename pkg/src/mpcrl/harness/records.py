"""Run records on disk.

A run directory holds

    events.jsonl   one JSON object per line, each with ``schema_version``
    summary.csv    key,value rows (best J, best theta, violations, wall time)
    config.copy    the config file's bytes, verbatim
    dataset.csv    BO query history or BC demonstrations (those learners only)
    theta.txt      final policy parameters (``theta v1`` text format)

Events carry no wall-clock data so a rerun with the same config and seed
reproduces ``events.jsonl`` byte for byte.  Floats are written with
``repr`` (round-trip exact); non-finite values become ``null``.

A run is written into ``<out>.tmp-<pid>`` and renamed onto ``<out>`` only
when complete, so a killed run never leaves a partial record under the final
name.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__

SCHEMA_VERSION = 1
EVENTS = "events.jsonl"
SUMMARY = "summary.csv"
CONFIG_COPY = "config.copy"
DATASET = "dataset.csv"
THETA = "theta.txt"


class SchemaVersionError(ValueError):
    pass


class RecordError(ValueError):
    pass


def _clean(x):
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_clean(v) for v in x.tolist()]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def encode_event(event: dict) -> str:
    """One JSONL line; ``schema_version`` first, keys otherwise in insertion order."""
    body = {"schema_version": SCHEMA_VERSION, **_clean(event)}
    return json.dumps(body, allow_nan=False, separators=(",", ":")) + "\n"


def decode_events(text: str) -> list[dict]:
    out = []
    for i, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        ev = json.loads(line)
        v = ev.get("schema_version")
        if v != SCHEMA_VERSION:
            raise SchemaVersionError(f"line {i}: unsupported schema_version {v!r} (reader knows {SCHEMA_VERSION})")
        out.append(ev)
    return out


def read_events(path: str | Path) -> list[dict]:
    return decode_events(Path(path).read_text())


def summary_to_csv(summary: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["key", "value"])
    for k, v in summary.items():
        if isinstance(v, (list, tuple, np.ndarray)):
            v = " ".join(_fmt(x) for x in np.asarray(v, dtype=float).ravel())
        w.writerow([k, _fmt(v)])
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def read_summary(path: str | Path) -> dict:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != ["key", "value"]:
        raise RecordError(f"{path}: not a summary table")
    return {k: v for k, v in rows[1:]}


class RunWriter:
    """Streams events into a temporary directory; ``commit`` renames it into place."""

    def __init__(self, out: str | Path, config_text: str):
        self.final = Path(out)
        self.final.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = self.final.with_name(f"{self.final.name}.tmp-{os.getpid()}")
        if self.tmp.exists():
            shutil.rmtree(self.tmp)
        self.tmp.mkdir()
        (self.tmp / CONFIG_COPY).write_bytes(config_text.encode("utf-8"))
        self._events = open(self.tmp / EVENTS, "w", encoding="utf-8", newline="\n")

    def event(self, **fields) -> None:
        self._events.write(encode_event(fields))
        self._events.flush()

    def write_text(self, name: str, text: str) -> None:
        (self.tmp / name).write_text(text, encoding="utf-8")

    def commit(self, summary: dict) -> Path:
        self._events.close()
        self.write_text(SUMMARY, summary_to_csv(summary))
        if self.final.exists():
            old = self.final.with_name(f"{self.final.name}.old-{os.getpid()}")
            os.replace(self.final, old)
            os.replace(self.tmp, self.final)
            shutil.rmtree(old)
        else:
            os.replace(self.tmp, self.final)
        return self.final

    def abort(self) -> None:
        if not self._events.closed:
            self._events.close()
        shutil.rmtree(self.tmp, ignore_errors=True)


@dataclass
class RunRecord:
    path: Path
    config_hash: str
    events: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    toolkit_version: str = __version__

    @property
    def status(self) -> str:
        return self.summary.get("status", "")

    @property
    def best_J(self) -> float:
        v = self.summary.get("best_J", "nan")
        return float(v) if v not in ("", "None") else float("nan")

    @property
    def best_theta(self) -> np.ndarray:
        v = self.summary.get("best_theta", "")
        return np.array([float(x) for x in v.split()]) if v else np.zeros(0)

    def iterations(self) -> list[dict]:
        return [e for e in self.events if e.get("event") in ("iteration", "query", "point")]

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        """Read a run directory; the stored hash must match config.copy byte for byte."""
        p = Path(path)
        if not p.is_dir():
            raise RecordError(f"{p}: no such run directory")
        missing = [n for n in (EVENTS, SUMMARY, CONFIG_COPY) if not (p / n).exists()]
        if missing:
            raise RecordError(f"{p}: not a run record (missing {', '.join(missing)})")
        summary = read_summary(p / SUMMARY)
        events = read_events(p / EVENTS)
        digest = hashlib.sha256((p / CONFIG_COPY).read_bytes()).hexdigest()
        if summary.get("config_hash") != digest:
            raise RecordError(f"{p}: config hash does not match config.copy")
        return cls(p, digest, events, summary, summary.get("toolkit_version", ""))
