"""Intensity reshaping, azimuth recovery and region classification.

Raw intensities follow the arcsine law; acceptance-rejection reshapes each
polarization component to a truncated exponential ``g(mu) = C exp(mu)``.
Surviving samples are sorted into sector-shaped regions of the
(mu_H, mu_V) quarter plane, optionally filtered by an azimuth window.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .source import TWO_PI, LocalReadout, intensity_pdf

log = logging.getLogger(__name__)

AZIMUTH_CLAMP_TOL = 1e-9
STATES = ("H", "V", "D", "A")


class ConfigurationError(ValueError):
    pass


class UndefinedAzimuthError(ValueError):
    """Azimuth requested at a pole of the Bloch sphere (mu_H * mu_V == 0)."""


# ---------------------------------------------------------------------------
# reshaping


def compute_C(mu_max: float = 0.5) -> float:
    """Largest C with C*exp(mu) <= f(mu) on (0, mu_max)."""
    if not mu_max > 0:
        raise ValueError("mu_max must be positive")

    def ratio(mu):
        return intensity_pdf(mu, mu_max) * math.exp(-mu)

    eps = 1e-12 * mu_max
    res = minimize_scalar(ratio, bounds=(eps, mu_max - eps), method="bounded",
                          options={"xatol": 1e-12 * mu_max, "maxiter": 500})
    return float(res.fun)


@dataclass(frozen=True)
class ReshapeSpec:
    target_scale_C: float
    mu_max: float = 0.5

    def __post_init__(self):
        if not self.mu_max > 0:
            raise ValueError("mu_max must be positive")
        if not self.target_scale_C > 0:
            raise ValueError("target_scale_C must be positive")

    @classmethod
    def auto(cls, mu_max: float = 0.5) -> "ReshapeSpec":
        return cls(compute_C(mu_max), mu_max)

    def keep_probability(self, mu):
        """g(mu)/f(mu); zero at the endpoints where f diverges."""
        mu = np.asarray(mu, dtype=float)
        inside = np.clip(mu * (self.mu_max - mu), 0.0, None)
        return self.target_scale_C * np.exp(mu) * math.pi * np.sqrt(inside)


def accept_mask(mu, spec: ReshapeSpec, u) -> np.ndarray:
    """Keep flags for intensities ``mu`` given uniforms ``u`` on [0, 1)."""
    return np.asarray(u) < spec.keep_probability(mu)


def accept(mu: float, spec: ReshapeSpec, rng: np.random.Generator) -> bool:
    if not 0 <= mu <= spec.mu_max:
        raise ValueError(f"intensity {mu} outside [0, {spec.mu_max}]")
    return bool(accept_mask(mu, spec, rng.random()))


def accept_pair(mu_h, mu_v, spec: ReshapeSpec, rng: np.random.Generator) -> np.ndarray:
    """Both components must survive independently."""
    mu_h = np.asarray(mu_h)
    u = rng.random((2,) + mu_h.shape)
    return accept_mask(mu_h, spec, u[0]) & accept_mask(mu_v, spec, u[1])


# ---------------------------------------------------------------------------
# azimuth


def azimuth_batch(mu_h, mu_v, mu_d, mu_a):
    """Vectorised azimuth recovery.

    Returns ``(phi, clamped)``. ``phi`` is NaN at the poles; ``clamped`` flags
    records whose arccos argument left [-1, 1] by more than the noise floor.
    """
    mu_h = np.asarray(mu_h, dtype=float)
    mu_v = np.asarray(mu_v, dtype=float)
    denom = 2.0 * np.sqrt(mu_h * mu_v)
    with np.errstate(divide="ignore", invalid="ignore"):
        arg = (np.asarray(mu_d) - np.asarray(mu_a)) / denom
    pole = ~(denom > 0)
    clamped = (np.abs(arg) > 1.0 + AZIMUTH_CLAMP_TOL) & ~pole
    phi = np.arccos(np.clip(arg, -1.0, 1.0))
    phi = np.where(pole, np.nan, phi)
    return phi, clamped


def azimuth(r: LocalReadout) -> float:
    if not (r.mu_H > 0 and r.mu_V > 0):
        raise UndefinedAzimuthError("azimuth is undefined when mu_H * mu_V == 0")
    phi, clamped = azimuth_batch(r.mu_H, r.mu_V, r.mu_D, r.mu_A)
    if clamped:
        log.warning("azimuth argument clamped for readout %s", r)
    return float(phi)


# ---------------------------------------------------------------------------
# regions


@dataclass(frozen=True)
class Window:
    lo: float
    hi: float
    state: str

    def contains(self, phi):
        return (phi >= self.lo) & (phi <= self.hi)


@dataclass(frozen=True)
class Region:
    """Sector of the (mu_H, mu_V) quarter plane.

    ``radius_max=None`` means the sector is bounded only by the intensity box.
    Z regions carry a fixed ``state``; X regions get their state from the
    azimuth window a sample falls in.
    """

    label: str
    polar_min: float
    polar_max: float
    radius_max: float | None = None
    windows: tuple[Window, ...] = ()
    state: str | None = None

    def __post_init__(self):
        if not 0 <= self.polar_min <= self.polar_max <= math.pi / 2 + 1e-15:
            raise ConfigurationError(f"{self.label}: polar range must satisfy 0 <= min <= max <= pi/2")
        if self.radius_max is not None and not self.radius_max > 0:
            raise ConfigurationError(f"{self.label}: radius_max must be positive")
        if self.state is None and not self.windows:
            raise ConfigurationError(f"{self.label}: needs a fixed state or azimuth windows")
        ws = sorted(self.windows, key=lambda w: w.lo)
        for w in ws:
            if not 0 <= w.lo <= w.hi <= TWO_PI or w.state not in STATES:
                raise ConfigurationError(f"{self.label}: bad azimuth window {w}")
        for a, b in zip(ws, ws[1:]):
            if b.lo < a.hi:
                raise ConfigurationError(f"{self.label}: azimuth windows overlap")

    @property
    def basis(self) -> str:
        states = {self.state} if self.state else {w.state for w in self.windows}
        return "Z" if states <= {"H", "V"} else "X"

    @property
    def azimuth_fraction(self) -> float:
        if not self.windows:
            return 1.0
        return sum(w.hi - w.lo for w in self.windows) / TWO_PI

    def in_sector(self, mu_h, mu_v, mu_max: float = 0.5):
        mu_h = np.asarray(mu_h, dtype=float)
        mu_v = np.asarray(mu_v, dtype=float)
        polar = np.arctan2(mu_v, mu_h)
        ok = (polar >= self.polar_min) & (polar <= self.polar_max)
        ok &= (mu_h <= mu_max) & (mu_v <= mu_max)
        if self.radius_max is not None:
            ok &= np.hypot(mu_h, mu_v) <= self.radius_max
        return ok

    def state_for(self, phi):
        """State label per sample ('' when no window matches)."""
        phi = np.asarray(phi, dtype=float)
        if self.state is not None:
            return np.full(phi.shape, self.state, dtype="<U1")
        out = np.full(phi.shape, "", dtype="<U1")
        for w in self.windows:
            out = np.where(w.contains(phi) & (out == ""), w.state, out)
        return out


def diagonal_windows(delta_phi: float) -> tuple[Window, ...]:
    h = delta_phi / 2
    return (
        Window(0.0, h, "D"),
        Window(math.pi - h, math.pi + h, "A"),
        Window(TWO_PI - h, TWO_PI, "D"),
    )


@dataclass(frozen=True)
class RegionParams:
    delta_z: float = 0.02
    delta_x: float = 0.2
    delta_phi: float = 0.2
    r_max: float = 0.5
    t_list: tuple[float, ...] = (1.0, 0.5, 0.1)
    z_decoys: bool = True


def standard_regions(params: RegionParams = RegionParams()) -> list[Region]:
    """Z key regions, scaled Z decoy sectors and nested X sectors.

    X sectors use the half-width convention ``pi/4 +- delta_x/2``. With
    ``z_decoys`` the Z triangles are also cut at ``t * r_max`` for every
    ``t < 1`` so the Z-basis decoy program has more than one intensity set.
    """
    p = params
    if min(p.delta_z, p.delta_x, p.delta_phi, p.r_max) <= 0:
        raise ConfigurationError("region parameters must be positive")
    if any(not 0 < t <= 1 for t in p.t_list):
        raise ConfigurationError("t values must lie in (0, 1]")
    if p.delta_z >= math.pi / 4 - p.delta_x / 2:
        raise ConfigurationError(
            f"delta_z={p.delta_z} overlaps the X sector half-width {p.delta_x / 2}")
    if p.delta_phi >= math.pi:
        raise ConfigurationError("delta_phi must be below pi")
    ts = sorted(set(p.t_list), reverse=True)
    q = math.pi / 2
    regions = [Region("Z_H", 0.0, p.delta_z, state="H"), Region("Z_V", q - p.delta_z, q, state="V")]
    if p.z_decoys:
        for k, t in enumerate(ts, start=1):
            if t >= 1:
                continue
            regions.append(Region(f"Z_H{k}", 0.0, p.delta_z, t * p.r_max, state="H"))
            regions.append(Region(f"Z_V{k}", q - p.delta_z, q, t * p.r_max, state="V"))
    win = diagonal_windows(p.delta_phi)
    for k, t in enumerate(ts, start=1):
        regions.append(Region(f"X{k}", math.pi / 4 - p.delta_x / 2, math.pi / 4 + p.delta_x / 2,
                              t * p.r_max, win))
    return regions


def decoy_groups(regions: Sequence[Region]) -> dict[str, list[str]]:
    """Basis-level groups used by the decoy programs.

    H and V sectors with the same intensity range form one group; X sectors
    already hold both D and A windows.
    """
    groups: dict[str, list[str]] = {}
    for r in regions:
        if r.basis == "Z":
            key = "Z" + (r.label[3:] or "1") if r.label.startswith(("Z_H", "Z_V")) else r.label
        else:
            key = r.label
        groups.setdefault(key, []).append(r.label)
    return groups


@dataclass(frozen=True)
class SiftOutcome:
    region_labels: frozenset = field(default_factory=frozenset)
    state_label: str = "none"


def classify_batch(mu_h, mu_v, phi, regions: Sequence[Region], mu_max: float = 0.5):
    """Membership matrix and state labels for a block of samples.

    Returns ``(member, states)`` where ``member[k, i]`` says sample ``i`` is in
    ``regions[k]`` and ``states[k, i]`` is its state in that region. X-region
    membership requires an azimuth window hit.
    """
    phi = np.asarray(phi, dtype=float)
    n = np.shape(phi)[0] if np.ndim(phi) else 1
    member = np.zeros((len(regions), n), dtype=bool)
    states = np.full((len(regions), n), "", dtype="<U1")
    for k, r in enumerate(regions):
        inside = r.in_sector(mu_h, mu_v, mu_max)
        st = np.where(inside, r.state_for(phi), "")
        member[k] = st != ""
        states[k] = st
    return member, states


def classify(s, regions: Sequence[Region], mu_max: float = 0.5) -> SiftOutcome:
    member, states = classify_batch(np.atleast_1d(s.mu_H), np.atleast_1d(s.mu_V),
                                    np.atleast_1d(s.phi_HV), regions, mu_max)
    labels = frozenset(r.label for k, r in enumerate(regions) if member[k, 0])
    z = [states[k, 0] for k, r in enumerate(regions) if member[k, 0] and r.basis == "Z"]
    x = [states[k, 0] for k, r in enumerate(regions) if member[k, 0] and r.basis == "X"]
    state = (z or x or ["none"])[0]
    return SiftOutcome(labels, state)


# ---------------------------------------------------------------------------
# reshaped density and region quadrature


@dataclass(frozen=True)
class ReshapedDensity:
    """Product density of two truncated exponentials times a uniform azimuth."""

    mu_max: float = 0.5

    @property
    def norm(self) -> float:
        return math.expm1(self.mu_max)

    def pdf_1d(self, mu):
        mu = np.asarray(mu, dtype=float)
        inside = (mu >= 0) & (mu <= self.mu_max)
        return np.where(inside, np.exp(mu) / self.norm, 0.0)

    def joint(self, mu_h, mu_v):
        """Density in (mu_H, mu_V); the azimuth factor 1/(2pi) is applied separately."""
        return self.pdf_1d(mu_h) * self.pdf_1d(mu_v)

    def sample(self, rng: np.random.Generator, n: int):
        """Exact inverse-cdf draws of (mu_H, mu_V, phi)."""
        u = rng.random((3, n))
        mu = np.log1p(u[:2] * self.norm)
        return mu[0], mu[1], u[2] * TWO_PI


def _legendre(n: int, a: float, b: float):
    x, w = np.polynomial.legendre.leggauss(n)
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), w * half


def _polar_breaks(region: Region, mu_max: float) -> list[float]:
    lo, hi = region.polar_min, region.polar_max
    pts = {lo, hi, math.pi / 4}
    rm = region.radius_max
    if rm is not None and mu_max < rm < mu_max * math.sqrt(2):
        a = math.acos(mu_max / rm)
        pts.update({a, math.pi / 2 - a})
    return sorted(p for p in pts if lo <= p <= hi)


def _radial_limit(region: Region, alpha, mu_max: float):
    box = mu_max / np.maximum(np.cos(alpha), np.sin(alpha))
    if region.radius_max is None:
        return box
    return np.minimum(box, region.radius_max)


@dataclass
class RegionGrid:
    """Tensor Gauss-Legendre nodes covering one region.

    The (mu_H, mu_V) nodes are stored as a column (shape ``(M, 1)``) and the
    azimuth nodes as a row (shape ``(1, P)``) so integrands broadcast to
    ``(M, P)``. Weights include the reshaped density, the polar Jacobian and the
    1/(2pi) azimuth factor: ``total weight`` is the region mass.
    """

    mu_h: np.ndarray
    mu_v: np.ndarray
    w_plane: np.ndarray
    phi: np.ndarray
    states: np.ndarray
    w_phi: np.ndarray
    n: int

    @property
    def mass(self) -> float:
        return float(self.w_plane.sum() * self.w_phi.sum())

    def integrate(self, values) -> float:
        v = np.broadcast_to(values, (self.w_plane.size, self.w_phi.size))
        return float(self.w_plane.ravel() @ v @ self.w_phi.ravel())


def region_grid(region: Region, density: ReshapedDensity, n: int = 64, n_phi: int | None = None) -> RegionGrid:
    """Build quadrature nodes; ``n_phi=0`` collapses the azimuth axis to one node per window."""
    mm = density.mu_max
    breaks = _polar_breaks(region, mm)
    xr, wr = np.polynomial.legendre.leggauss(n)
    a_nodes, a_w = [], []
    for a0, a1 in zip(breaks, breaks[1:]):
        if a1 > a0:
            x, w = _legendre(n, a0, a1)
            a_nodes.append(x)
            a_w.append(w)
    alpha = np.concatenate(a_nodes) if a_nodes else np.zeros(0)
    wa = np.concatenate(a_w) if a_w else np.zeros(0)
    rlim = _radial_limit(region, alpha, mm)
    r = 0.5 * rlim[:, None] * (xr[None, :] + 1.0)
    wrr = 0.5 * rlim[:, None] * wr[None, :]
    mu_h = r * np.cos(alpha)[:, None]
    mu_v = r * np.sin(alpha)[:, None]
    w2 = wa[:, None] * wrr * r * density.joint(mu_h, mu_v)

    if region.windows:
        intervals = [(w.lo, w.hi, w.state) for w in region.windows if w.hi > w.lo]
    else:
        intervals = [(0.0, TWO_PI, region.state)]
    if n_phi is None:
        n_phi = n
    ph, wp, sp = [], [], []
    for a, b, s in intervals:
        if n_phi == 0:
            x, w = np.array([0.5 * (a + b)]), np.array([b - a])
        else:
            x, w = _legendre(n_phi, a, b)
        ph.append(x)
        wp.append(w / TWO_PI)
        sp.append(np.full(x.size, s, dtype="<U1"))
    return RegionGrid(
        mu_h.reshape(-1, 1), mu_v.reshape(-1, 1), w2.reshape(-1, 1),
        np.concatenate(ph)[None, :], np.concatenate(sp)[None, :], np.concatenate(wp)[None, :],
        n,
    )


def region_integral(region: Region, func: Callable | None, density: ReshapedDensity,
                    with_phi: bool = False, n0: int = 64, rtol: float = 1e-8,
                    n_limit: int = 512) -> float:
    """Integral of ``func`` times the reshaped density over a region.

    ``func(mu_h, mu_v, phi, states)`` must broadcast over the grid shapes;
    ``None`` integrates 1. Node counts double until successive estimates agree
    to ``rtol``.
    """
    def value(n):
        g = region_grid(region, density, n, n_phi=(n // 2 if with_phi else 0))
        if func is None:
            return g.mass
        return g.integrate(func(g.mu_h, g.mu_v, g.phi, g.states))

    n = n0
    prev = value(n)
    while True:
        n *= 2
        cur = value(n)
        if abs(cur - prev) <= rtol * abs(cur) or n >= n_limit:
            return cur
        prev = cur


def region_mass(region: Region, density: ReshapedDensity = ReshapedDensity(), **kw) -> float:
    return region_integral(region, None, density, **kw)
