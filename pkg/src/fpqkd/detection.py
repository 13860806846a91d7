"""Lossy channel, threshold-detector BB84 receiver and per-region tallies."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .postselect import Region, RegionGrid

# outcome codes
NO_CLICK = -1
OUTCOMES = {"H": 0, "V": 1, "D": 2, "A": 3}
OUTCOME_NAMES = {v: k for k, v in OUTCOMES.items()} | {NO_CLICK: "no-click"}
BASIS_Z, BASIS_X = 0, 1


class PipelineError(RuntimeError):
    pass


# calibrated so the Z-sector QBER at 16.7 dB sits near 2.3%
DEFAULT_E_D = 0.012


@dataclass(frozen=True)
class ChannelParams:
    loss_dB: float = 0.0
    detector_efficiency: float = 0.1
    dark_prob: float = 1e-6
    misalignment_e_d: float = DEFAULT_E_D
    basis_split: float = 0.5

    def __post_init__(self):
        if not self.loss_dB >= 0:
            raise ValueError("loss_dB must be non-negative")
        for name in ("detector_efficiency", "dark_prob", "misalignment_e_d", "basis_split"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must be a probability, got {v}")

    @property
    def eta_total(self) -> float:
        return self.detector_efficiency * 10 ** (-self.loss_dB / 10)

    @property
    def theta_m(self) -> float:
        """Amplitude rotation angle with sin^2 = e_d."""
        return math.asin(math.sqrt(self.misalignment_e_d))


def arm_intensities(mu_h, mu_v, phi, p: ChannelParams):
    """Mean photon numbers reaching the H, V, D and A detectors.

    Each value assumes all transmitted light is routed to that detector's
    basis; the basis choice is applied separately.
    """
    c, s = math.cos(p.theta_m), math.sin(p.theta_m)
    mu_h = np.asarray(mu_h, dtype=float)
    mu_v = np.asarray(mu_v, dtype=float)
    cross = 2.0 * np.sqrt(mu_h * mu_v) * np.cos(phi)
    eta = p.eta_total
    i_h = eta * (c * c * mu_h + s * s * mu_v - c * s * cross)
    i_v = eta * (s * s * mu_h + c * c * mu_v + c * s * cross)
    cp, cm = (c + s) ** 2, (c - s) ** 2
    i_d = 0.5 * eta * (cp * mu_h + cm * mu_v + (c * c - s * s) * cross)
    i_a = 0.5 * eta * (cm * mu_h + cp * mu_v - (c * c - s * s) * cross)
    clip = lambda x: np.clip(x, 0.0, None)
    return clip(i_h), clip(i_v), clip(i_d), clip(i_a)


def click_prob(intensity, dark_prob: float):
    return 1.0 - (1.0 - dark_prob) * np.exp(-intensity)


@dataclass(frozen=True)
class ClickStats:
    """Outcome probabilities conditioned on Bob's basis.

    ``prob[b]`` maps each state of basis ``b`` to the probability the squashed
    outcome is that state. ``gain[b]`` is their sum.
    """

    gain_z: np.ndarray | float
    gain_x: np.ndarray | float
    prob: Mapping[str, np.ndarray | float]

    def gain(self, basis: str):
        return self.gain_z if basis == "Z" else self.gain_x

    def error_gain(self, state: str):
        return self.prob[_PARTNER[state]]


_PARTNER = {"H": "V", "V": "H", "D": "A", "A": "D"}


def _squash_pair(p1, p2):
    both = p1 * p2
    return p1 - both + 0.5 * both, p2 - both + 0.5 * both


def analytic_click_stats(mu_h, mu_v, phi, p: ChannelParams) -> ClickStats:
    """Exact per-basis outcome probabilities of the threshold receiver."""
    i_h, i_v, i_d, i_a = arm_intensities(mu_h, mu_v, phi, p)
    d = p.dark_prob
    q_h, q_v, q_d, q_a = (click_prob(i, d) for i in (i_h, i_v, i_d, i_a))
    p_h, p_v = _squash_pair(q_h, q_v)
    p_d, p_a = _squash_pair(q_d, q_a)
    gz = 1.0 - (1.0 - d) ** 2 * np.exp(-(i_h + i_v))
    gx = 1.0 - (1.0 - d) ** 2 * np.exp(-(i_d + i_a))
    return ClickStats(gz, gx, {"H": p_h, "V": p_v, "D": p_d, "A": p_a})


@dataclass(frozen=True)
class DetectionEvent:
    clicks: tuple[bool, bool, bool, bool]
    basis: str
    squashed: str


@dataclass
class EventBatch:
    basis: np.ndarray  # BASIS_Z / BASIS_X
    clicks: np.ndarray  # (n, 4) bool, order H V D A
    outcome: np.ndarray  # OUTCOMES code or NO_CLICK

    def __len__(self):
        return len(self.basis)

    def __getitem__(self, i) -> DetectionEvent:
        return DetectionEvent(
            tuple(bool(c) for c in self.clicks[i]),
            "Z" if self.basis[i] == BASIS_Z else "X",
            OUTCOME_NAMES[int(self.outcome[i])],
        )


def detect_batch(mu_h, mu_v, phi, p: ChannelParams, rng: np.random.Generator) -> EventBatch:
    mu_h = np.asarray(mu_h, dtype=float)
    n = mu_h.size
    u = rng.random((4, n))
    i_h, i_v, i_d, i_a = arm_intensities(mu_h, mu_v, phi, p)
    basis = np.where(u[0] < p.basis_split, BASIS_Z, BASIS_X)
    z = basis == BASIS_Z
    first = np.where(z, i_h, i_d)
    second = np.where(z, i_v, i_a)
    c1 = u[1] < click_prob(first, p.dark_prob)
    c2 = u[2] < click_prob(second, p.dark_prob)
    pick_first = np.where(c1 & c2, u[3] < 0.5, c1)
    offset = np.where(z, 0, 2)
    outcome = np.where(c1 | c2, offset + np.where(pick_first, 0, 1), NO_CLICK)
    clicks = np.zeros((n, 4), dtype=bool)
    clicks[:, 0] = c1 & z
    clicks[:, 1] = c2 & z
    clicks[:, 2] = c1 & ~z
    clicks[:, 3] = c2 & ~z
    return EventBatch(basis, clicks, outcome)


def transmit_and_detect(s, p: ChannelParams, rng: np.random.Generator) -> DetectionEvent:
    ev = detect_batch(np.atleast_1d(s.mu_H), np.atleast_1d(s.mu_V), np.atleast_1d(s.phi_HV), p, rng)
    return ev[0]


# ---------------------------------------------------------------------------
# tallies


@dataclass
class RegionTally:
    """Counts for one region (or a basis-level group of regions).

    ``n_matched`` counts sent signals for which Bob measured in the region's
    basis; gains are normalised by it.
    """

    n_sent: int = 0
    n_matched: int = 0
    n_detected: int = 0
    n_error: int = 0

    def __add__(self, other: "RegionTally") -> "RegionTally":
        return RegionTally(self.n_sent + other.n_sent, self.n_matched + other.n_matched,
                           self.n_detected + other.n_detected, self.n_error + other.n_error)

    @property
    def Q(self) -> float:
        return self.n_detected / self.n_matched if self.n_matched else 0.0

    @property
    def QE(self) -> float:
        return self.n_error / self.n_matched if self.n_matched else 0.0

    @property
    def E(self) -> float:
        return self.n_error / self.n_detected if self.n_detected else 0.0

    @staticmethod
    def _sigma(k: int, n: int) -> float:
        if n == 0:
            return 1.0
        if k == 0:
            return 3.0 / n  # rule of three
        q = k / n
        return math.sqrt(q * (1 - q) / n)

    @property
    def sigma_Q(self) -> float:
        return self._sigma(self.n_detected, self.n_matched)

    @property
    def sigma_QE(self) -> float:
        return self._sigma(self.n_error, self.n_matched)


@dataclass
class TallySet:
    tallies: dict[str, RegionTally] = field(default_factory=dict)

    def __getitem__(self, label: str) -> RegionTally:
        return self.tallies[label]

    def __iter__(self):
        return iter(self.tallies)

    def __add__(self, other: "TallySet") -> "TallySet":
        labels = list(self.tallies) + [k for k in other.tallies if k not in self.tallies]
        zero = RegionTally()
        return TallySet({k: self.tallies.get(k, zero) + other.tallies.get(k, zero) for k in labels})

    def group(self, labels: Iterable[str]) -> RegionTally:
        out = RegionTally()
        for k in labels:
            out = out + self.tallies[k]
        return out


def state_codes(states) -> np.ndarray:
    states = np.asarray(states)
    return np.select([states == k for k in OUTCOMES], list(OUTCOMES.values()), -2)


def accumulate(events: EventBatch, member: np.ndarray, states: np.ndarray,
               regions: Sequence[Region]) -> TallySet:
    """Tally detections per region.

    ``member``/``states`` come from ``classify_batch`` on the same samples, in
    the same order as ``events``.
    """
    member = np.asarray(member)
    if member.shape != (len(regions), len(events)) or np.shape(states) != member.shape:
        raise PipelineError(
            f"stream lengths differ: {len(events)} events vs membership {member.shape}")
    detected = events.outcome != NO_CLICK
    out = {}
    for k, r in enumerate(regions):
        m = member[k]
        b = BASIS_Z if r.basis == "Z" else BASIS_X
        matched = m & (events.basis == b)
        det = matched & detected
        err = int(np.count_nonzero(events.outcome[det] != state_codes(states[k][det])))
        out[r.label] = RegionTally(int(m.sum()), int(matched.sum()), int(det.sum()), err)
    return TallySet(out)


@dataclass(frozen=True)
class ExpectedTally:
    """Analytic per-signal gain and error-gain for a region (basis-matched)."""

    mass: float
    Q: float
    QE: float

    @property
    def E(self) -> float:
        return self.QE / self.Q if self.Q > 0 else 0.0


def expected_tally(region: Region, grid: RegionGrid, p: ChannelParams) -> ExpectedTally:
    stats = analytic_click_stats(grid.mu_h, grid.mu_v, grid.phi, p)
    gain = stats.gain(region.basis)
    err = np.zeros(np.broadcast_shapes(grid.mu_h.shape, grid.phi.shape))
    for s in ("H", "V", "D", "A"):
        sel = grid.states == s
        if sel.any():
            err = err + np.where(sel, stats.error_gain(s), 0.0)
    mass = grid.mass
    return ExpectedTally(mass, grid.integrate(gain) / mass, grid.integrate(err) / mass)
