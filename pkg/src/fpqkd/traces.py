"""Local-measurement trace files.

Two encodings of the same record stream ``(mu_h, mu_v, mu_d)``:

* CSV: header ``mu_h,mu_v,mu_d`` then one record per line;
* binary: the 8-byte magic ``FPQKDTR1`` followed by records of three
  little-endian float64 values.

``mu_a`` is never stored; it follows from ``mu_h + mu_v = mu_d + mu_a``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"FPQKDTR1"
CSV_HEADER = "mu_h,mu_v,mu_d"
RECORD = np.dtype([("mu_h", "<f8"), ("mu_v", "<f8"), ("mu_d", "<f8")])
MU_A_NOISE_FLOOR = 1e-6


class TraceError(ValueError):
    """Malformed trace content; ``index`` is the 0-based record number when known."""

    def __init__(self, msg: str, index: int | None = None):
        super().__init__(msg if index is None else f"record {index}: {msg}")
        self.index = index


@dataclass
class Trace:
    mu_h: np.ndarray
    mu_v: np.ndarray
    mu_d: np.ndarray

    def __len__(self):
        return len(self.mu_h)

    @property
    def mu_a(self) -> np.ndarray:
        return np.clip(self.mu_h + self.mu_v - self.mu_d, 0.0, None)


def is_binary(path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(len(MAGIC)) == MAGIC


class TraceWriter:
    """Streaming writer; use as a context manager and call :meth:`write` per block."""

    def __init__(self, path, binary: bool | None = None):
        self.path = Path(path)
        self.binary = self.path.suffix != ".csv" if binary is None else binary
        self.count = 0
        self._fh = None

    def __enter__(self):
        if self.binary:
            self._fh = open(self.path, "wb")
            self._fh.write(MAGIC)
        else:
            self._fh = open(self.path, "w")
            self._fh.write(CSV_HEADER + "\n")
        return self

    def __exit__(self, *exc):
        self._fh.close()

    def write(self, mu_h, mu_v, mu_d) -> None:
        rec = np.empty(len(mu_h), dtype=RECORD)
        rec["mu_h"], rec["mu_v"], rec["mu_d"] = mu_h, mu_v, mu_d
        if self.binary:
            self._fh.write(rec.tobytes())
        else:
            np.savetxt(self._fh, rec.view("<f8").reshape(-1, 3), fmt="%.17g", delimiter=",")
        self.count += len(rec)


def write_trace(path, mu_h, mu_v, mu_d, binary: bool | None = None) -> None:
    with TraceWriter(path, binary) as w:
        w.write(mu_h, mu_v, mu_d)


def _read_csv(path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header.replace(" ", "") != CSV_HEADER:
            raise TraceError(f"expected header {CSV_HEADER!r}, got {header!r}")
        for i, line in enumerate(fh):
            parts = line.strip().split(",")
            if len(parts) == 1 and not parts[0]:
                continue
            if len(parts) != 3:
                raise TraceError(f"expected 3 fields, got {len(parts)}", i)
            try:
                rows.append(tuple(float(p) for p in parts))
            except ValueError:
                raise TraceError(f"non-numeric field in {line.strip()!r}", i) from None
    out = np.empty(len(rows), dtype=RECORD)
    if rows:
        out[:] = rows
    return out


def _read_binary(path) -> np.ndarray:
    raw = Path(path).read_bytes()[len(MAGIC):]
    if len(raw) % RECORD.itemsize:
        raise TraceError("truncated record", len(raw) // RECORD.itemsize)
    return np.frombuffer(raw, dtype=RECORD)


def read_trace(path, mu_max: float = 0.5) -> Trace:
    """Load and validate a trace; raises :class:`TraceError` naming the bad record."""
    rec = _read_binary(path) if is_binary(path) else _read_csv(path)
    h, v, d = (np.array(rec[k], dtype=float) for k in ("mu_h", "mu_v", "mu_d"))
    checks = [
        (~np.isfinite(h) | ~np.isfinite(v) | ~np.isfinite(d), "non-finite value"),
        ((h < 0) | (h > mu_max), f"mu_h outside [0, {mu_max}]"),
        ((v < 0) | (v > mu_max), f"mu_v outside [0, {mu_max}]"),
        ((d < 0) | (d > 2 * mu_max), f"mu_d outside [0, {2 * mu_max}]"),
        (h + v - d < -MU_A_NOISE_FLOOR, "derived mu_a below the noise floor"),
    ]
    for bad, msg in checks:
        if bad.any():
            i = int(np.argmax(bad))
            raise TraceError(msg, i)
    return Trace(h, v, d)
