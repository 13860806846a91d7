"""Asymptotic secret key rate and loss sweeps."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

log = logging.getLogger(__name__)

DB_PER_KM = 0.2


def binary_entropy(x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"binary entropy needs a probability, got {x}")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1 - x) * math.log2(1 - x)


@dataclass(frozen=True)
class KeyRateInputs:
    P_Z: float
    P1_avg: float
    Y1_low: float
    e1_high: float
    Q_Z: float
    QE_Z: float
    f_e: float = 1.16

    def __post_init__(self):
        for name in ("P_Z", "P1_avg", "Y1_low", "Q_Z", "QE_Z"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not self.e1_high >= 0:
            raise ValueError("e1_high must be non-negative")
        if not self.f_e >= 1:
            raise ValueError("f_e must be >= 1")
        if self.QE_Z > self.Q_Z:
            raise ValueError("QE_Z cannot exceed Q_Z")


@dataclass(frozen=True)
class KeyRateReport:
    inputs: KeyRateInputs
    R: float
    single_photon_term: float
    ec_term: float
    diagnostics: tuple[str, ...] = ()

    @property
    def R_clamped(self) -> float:
        return max(self.R, 0.0)

    def as_row(self) -> dict:
        return asdict(self.inputs) | {
            "single_photon_term": self.single_photon_term,
            "ec_term": self.ec_term,
            "rate": self.R,
            "rate_clamped": self.R_clamped,
        }


def key_rate(inp: KeyRateInputs) -> KeyRateReport:
    notes = []
    if inp.e1_high >= 0.5:
        sp = 0.0
        notes.append("phase error bound >= 1/2")
    else:
        sp = inp.P1_avg * inp.Y1_low * (1.0 - binary_entropy(inp.e1_high))
    if inp.Q_Z == 0:
        notes.append("no Z-basis detections")
        return KeyRateReport(inp, 0.0, sp, 0.0, tuple(notes))
    ec = inp.f_e * inp.Q_Z * binary_entropy(inp.QE_Z / inp.Q_Z)
    return KeyRateReport(inp, inp.P_Z * (sp - ec), sp, ec, tuple(notes))


def km_to_db(km):
    return np.asarray(km, dtype=float) * DB_PER_KM


def db_to_km(db):
    return np.asarray(db, dtype=float) / DB_PER_KM


@dataclass(frozen=True)
class SweepRow:
    loss_db: float
    distance_km: float
    rate: float
    y1_low: float
    e1_high: float
    status: str = "ok"


SWEEP_COLUMNS = ("loss_db", "distance_km", "rate", "y1_low", "e1_high")


def sweep(loss_points, cfg=None, unit: str = "dB", setup=None) -> list[SweepRow]:
    """Analytic key-rate curve over a loss (or distance) grid.

    Each point uses expected tallies from the region quadrature, not Monte
    Carlo, so the curve is smooth. ``cfg`` is a ``RunConfig``; ``unit`` is
    ``"dB"`` or ``"km"``.
    """
    from .config import RunConfig
    from .decoy import InfeasibleError
    from .pipeline import Setup, expected_observations, analyze_point

    points = np.atleast_1d(np.asarray(loss_points, dtype=float))
    if points.size == 0:
        raise ValueError("sweep needs a non-empty loss grid")
    if unit not in ("dB", "km"):
        raise ValueError(f"unit must be 'dB' or 'km', got {unit!r}")
    losses = km_to_db(points) if unit == "km" else points
    cfg = cfg or RunConfig()
    if setup is None:
        setup = Setup(cfg.region_list(), _density(cfg), cfg.decoy.n_cut)
    rows = []
    for loss in losses:
        loss = float(loss)
        try:
            res = analyze_point(setup, expected_observations(setup, cfg.channel.at(loss)), loss,
                                cfg.keyrate.f_e, cfg.decoy.k_sigma)
        except InfeasibleError as exc:
            log.warning("loss %.3g dB: %s", loss, exc)
            rows.append(SweepRow(loss, float(db_to_km(loss)), 0.0, math.nan, math.nan, "infeasible"))
            continue
        b = res.bounds
        rows.append(SweepRow(loss, float(db_to_km(loss)), res.report.R, b.Y1_low, b.e1_high))
    return rows


def _density(cfg):
    from .postselect import ReshapedDensity
    return ReshapedDensity(cfg.source.mu_max_per_pol)


def cutoff_loss(rows: list[SweepRow]) -> float | None:
    """Largest grid loss with a strictly positive rate, or None."""
    good = [r.loss_db for r in rows if r.rate > 0]
    return max(good) if good else None
