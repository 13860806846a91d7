"""Region-averaged photon statistics and the decoy-state linear programs.

Within a region the photon number is Poissonian in the total intensity
``mu_H + mu_V``, so each region contributes one linear constraint on the
n-photon yields ``Y_n`` (and one on the error-yields ``E_n = e_n Y_n``).
Photon numbers above ``n_cut`` are absorbed by a slack in ``[0, tail_mass]``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import gammaln

from .lp import LPResult, simplex
from .postselect import Region, ReshapedDensity, region_grid

log = logging.getLogger(__name__)

DEFAULT_N_CUT = 10
RELAX_K_SIGMA = 3.0


class InfeasibleError(RuntimeError):
    """Observed gains cannot come from any yield vector, even after relaxation."""


def poisson_pmf(n, mu):
    """``mu^n e^-mu / n!`` for integer array ``n``; broadcasts against ``mu``."""
    n = np.asarray(n)
    mu = np.asarray(mu, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = n * np.log(mu) - mu - gammaln(n + 1)
    return np.where(n == 0, np.exp(-mu), np.where(mu > 0, np.exp(logp), 0.0))


@dataclass(frozen=True)
class PhotonMoments:
    label: str
    p_n: tuple[float, ...]
    tail_mass: float
    mass: float = float("nan")

    @property
    def n_cut(self) -> int:
        return len(self.p_n) - 1


def point_moments(mu: float, n_cut: int = DEFAULT_N_CUT, label: str | None = None) -> PhotonMoments:
    """Moments of a region shrunk to a single total intensity."""
    p = poisson_pmf(np.arange(n_cut + 1), mu)
    return PhotonMoments(label or f"mu={mu:g}", tuple(float(v) for v in p), _tail(p))


def _tail(p) -> float:
    return float(max(0.0, 1.0 - math.fsum(p)))


def photon_moments(regions: Region | Sequence[Region], density: ReshapedDensity = ReshapedDensity(),
                   n_cut: int = DEFAULT_N_CUT, label: str | None = None,
                   n0: int = 64, rtol: float = 1e-8, n_limit: int = 512) -> PhotonMoments:
    """Region-conditioned averages of the Poisson weights ``P_n(mu_H + mu_V)``.

    Several regions are merged into one mass-weighted set (e.g. the H and V
    sectors of one intensity range).
    """
    if n_cut < 2:
        raise ValueError("n_cut must be >= 2")
    if isinstance(regions, Region):
        regions = [regions]
    ns = np.arange(n_cut + 1)

    def evaluate(n):
        mass = 0.0
        acc = np.zeros(n_cut + 1)
        for r in regions:
            g = region_grid(r, density, n, n_phi=0)
            mass += g.mass
            tot = (g.mu_h + g.mu_v).ravel()
            w = g.w_plane.ravel() * g.w_phi.sum()
            acc += poisson_pmf(ns[:, None], tot[None, :]) @ w
        return mass, acc

    n = n0
    mass, prev = evaluate(n)
    while True:
        n *= 2
        mass, cur = evaluate(n)
        if np.all(np.abs(cur - prev) <= rtol * np.abs(cur)) or n >= n_limit:
            break
        prev = cur
    if not mass > 0:
        raise ValueError(f"region {label or regions[0].label} has zero mass")
    p = np.clip(cur / mass, 0.0, None)
    return PhotonMoments(label or "+".join(r.label for r in regions), tuple(float(v) for v in p), _tail(p), mass)


def empirical_moments(label: str, sums, count: int, mass: float = float("nan")) -> PhotonMoments:
    """Moments from sample sums ``sum_k P_n(mu_k)`` over ``count`` region samples."""
    if count <= 0:
        raise ValueError(f"region {label} has no samples")
    p = np.clip(np.asarray(sums, dtype=float) / count, 0.0, None)
    return PhotonMoments(label, tuple(float(v) for v in p), _tail(p), mass)


@dataclass(frozen=True)
class DecoyObservation:
    moments: PhotonMoments
    Q: float
    QE: float
    sigma_Q: float = 0.0
    sigma_QE: float = 0.0


@dataclass
class DecoyConstraintSet:
    basis: str
    observations: list[DecoyObservation]

    def __post_init__(self):
        cuts = {o.moments.n_cut for o in self.observations}
        if len(cuts) > 1:
            raise ValueError(f"inconsistent photon-number cutoffs {sorted(cuts)}")

    @property
    def n_cut(self) -> int:
        return self.observations[0].moments.n_cut


@dataclass
class DecoyBounds:
    Y1_low: float = float("nan")
    e1Y1_high: float = float("nan")
    e1_high: float = float("nan")
    Y1_low_X: float = float("nan")
    lp_status: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)


def _build(cs: DecoyConstraintSet, with_errors: bool, k_sigma: float):
    obs = cs.observations
    m = len(obs)
    ny = cs.n_cut + 1
    P = np.array([o.moments.p_n for o in obs])
    tail = np.array([o.moments.tail_mass for o in obs])
    sq = np.array([o.sigma_Q for o in obs]) * k_sigma
    Q = np.array([o.Q for o in obs])
    if not with_errors:
        # [Y_0..Y_N, s_1..s_m]
        A = np.hstack([P, np.eye(m)])
        lo = np.concatenate([np.zeros(ny), -sq])
        up = np.concatenate([np.ones(ny), tail + sq])
        return A, Q, lo, up
    se = np.array([o.sigma_QE for o in obs]) * k_sigma
    QE = np.array([o.QE for o in obs])
    # [Y (ny), E (ny), s (m), s' (m), w (ny)] with E_n - Y_n + w_n = 0
    nv = 3 * ny + 2 * m
    A = np.zeros((2 * m + ny, nv))
    A[:m, :ny] = P
    A[:m, 2 * ny:2 * ny + m] = np.eye(m)
    A[m:2 * m, ny:2 * ny] = P
    A[m:2 * m, 2 * ny + m:2 * ny + 2 * m] = np.eye(m)
    A[2 * m:, :ny] = -np.eye(ny)
    A[2 * m:, ny:2 * ny] = np.eye(ny)
    A[2 * m:, 2 * ny + 2 * m:] = np.eye(ny)
    b = np.concatenate([Q, QE, np.zeros(ny)])
    lo = np.concatenate([np.zeros(2 * ny), -sq, -se, np.zeros(ny)])
    up = np.concatenate([np.ones(2 * ny), tail + sq, tail + se, np.ones(ny)])
    return A, b, lo, up


@dataclass
class BoundResult:
    value: float
    k_sigma: float
    lp: LPResult
    cs_residual: float
    relaxed: bool = False


def solve_bounds(cs: DecoyConstraintSet, objective: str, k_sigma: float = 0.0,
                 relax_k_sigma: float = RELAX_K_SIGMA) -> BoundResult:
    """Lower-bound ``Y_1`` (``min_Y1``) or upper-bound ``e_1 Y_1`` (``max_e1Y1``)."""
    if len(cs.observations) < 2:
        raise ValueError("decoy analysis needs at least two constraint regions")
    if objective not in ("min_Y1", "max_e1Y1"):
        raise ValueError(f"unknown objective {objective!r}")
    with_errors = objective == "max_e1Y1"
    ny = cs.n_cut + 1
    for k in dict.fromkeys((k_sigma, max(k_sigma, relax_k_sigma))):
        A, b, lo, up = _build(cs, with_errors, k)
        c = np.zeros(A.shape[1])
        if with_errors:
            c[ny + 1] = -1.0
        else:
            c[1] = 1.0
        res = simplex(c, A, b, lo, up)
        if res.ok:
            value = float(res.x[ny + 1] if with_errors else res.x[1])
            return BoundResult(value, k, res, res.cs_residual(lo, up), relaxed=k != k_sigma)
        log.info("%s program infeasible at k_sigma=%g (residual %.3g)", cs.basis, k, res.infeasibility)
    raise InfeasibleError(
        f"{cs.basis}-basis decoy constraints infeasible even at {max(k_sigma, relax_k_sigma)} sigma")


def decoy_analysis(z_set: DecoyConstraintSet, x_set: DecoyConstraintSet, k_sigma: float = 0.0) -> DecoyBounds:
    """Z-basis yield bound, X-basis phase-error bound and their ratio."""
    out = DecoyBounds()
    yz = solve_bounds(z_set, "min_Y1", k_sigma)
    yx = solve_bounds(x_set, "min_Y1", k_sigma)
    ex = solve_bounds(x_set, "max_e1Y1", k_sigma)
    out.Y1_low = max(0.0, yz.value)
    out.Y1_low_X = max(0.0, yx.value)
    out.e1Y1_high = max(0.0, ex.value)
    for name, r in (("Y1_Z", yz), ("Y1_X", yx), ("e1Y1_X", ex)):
        out.lp_status[name] = {
            "status": r.lp.status, "iterations": r.lp.iterations,
            "k_sigma": r.k_sigma, "cs_residual": r.cs_residual,
        }
        if r.relaxed:
            out.flags.append(f"{name}_relaxed")
    if out.Y1_low_X > 0:
        out.e1_high = out.e1Y1_high / out.Y1_low_X
    else:
        out.e1_high = 0.5
        out.flags.append("e1_uninformative")
    return out
