"""Passive source model.

Four phase-randomized pulses of equal intensity are interfered pairwise to
give the H and V components of one output signal. All intensities are kept
in photons/pulse after attenuation, so ``mu_max_per_pol`` is the largest
value either polarization component can take.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class SourceConfig:
    mu_max_per_pol: float = 0.5
    train_mode: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        if not self.mu_max_per_pol > 0:
            raise ValueError(f"mu_max_per_pol must be positive, got {self.mu_max_per_pol}")
        if not 0 <= self.rng_seed < 2**64:
            raise ValueError("rng_seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class PulseSample:
    mu_H: float
    mu_V: float
    phi_HV: float
    phi_raw: tuple[float, float, float, float]
    valid: bool = True


@dataclass
class PulseBatch:
    """Column-oriented block of samples (the form used for bulk simulation)."""

    mu_H: np.ndarray
    mu_V: np.ndarray
    phi_HV: np.ndarray
    phi_raw: np.ndarray = field(repr=False)
    valid: np.ndarray = field(repr=False)

    def __len__(self):
        return len(self.mu_H)

    def __getitem__(self, i) -> PulseSample:
        return PulseSample(
            float(self.mu_H[i]),
            float(self.mu_V[i]),
            float(self.phi_HV[i]),
            tuple(float(p) for p in self.phi_raw[i]),
            bool(self.valid[i]),
        )

    def select(self, mask) -> "PulseBatch":
        return PulseBatch(
            self.mu_H[mask], self.mu_V[mask], self.phi_HV[mask],
            self.phi_raw[mask], self.valid[mask],
        )


@dataclass(frozen=True)
class LocalReadout:
    mu_H: float
    mu_V: float
    mu_D: float
    mu_A: float


STREAM_SOURCE, STREAM_ACCEPT, STREAM_DETECT = 0, 1, 2


def block_rng(seed: int, block: int, stream: int = STREAM_SOURCE) -> np.random.Generator:
    """Independent stream for one work block and pipeline stage.

    Streams depend only on ``(seed, block, stream)``, never on how blocks are
    distributed over workers, so any sharding reproduces the same draws.
    """
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(block, stream)))


def sample_phases(rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw ``n`` quadruples of i.i.d. phases uniform on [0, 2pi). Shape (n, 4)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.random((n, 4)) * TWO_PI


def interfere(phi_a, phi_b):
    """Output fraction of a balanced interference of two equal pulses.

    Returns ``(1 + cos(phi_a - phi_b)) / 2``, i.e. 1 for constructive and 0 for
    destructive interference. Works element-wise on arrays.
    """
    return 0.5 * (1.0 + np.cos(np.subtract(phi_a, phi_b)))


def _wrap(phi):
    return np.mod(phi, TWO_PI)


def make_samples(quads: np.ndarray, cfg: SourceConfig, valid=None) -> PulseBatch:
    quads = np.asarray(quads, dtype=float).reshape(-1, 4)
    p1, p2, p3, p4 = quads.T
    mu_h = cfg.mu_max_per_pol * interfere(p1, p2)
    mu_v = cfg.mu_max_per_pol * interfere(p3, p4)
    phi = _wrap((p3 - p4) - (p1 - p2))
    # mod can return exactly 2pi for tiny negative inputs
    phi = np.where(phi >= TWO_PI, 0.0, phi)
    if valid is None:
        valid = np.ones(len(mu_h), dtype=bool)
    return PulseBatch(mu_h, mu_v, phi, quads, np.asarray(valid, dtype=bool))


def make_sample(quadruple, cfg: SourceConfig) -> PulseSample:
    return make_samples(np.asarray(quadruple, dtype=float)[None, :], cfg)[0]


def intensity_pdf(mu, mu_max: float = 0.5):
    """U-shaped (arcsine) density of one interfered intensity on (0, mu_max)."""
    mu = np.asarray(mu, dtype=float)
    if np.any((mu <= 0) | (mu >= mu_max)):
        raise ValueError(f"intensity_pdf is defined on the open interval (0, {mu_max})")
    out = 1.0 / (math.pi * np.sqrt(mu * (mu_max - mu)))
    return float(out) if out.ndim == 0 else out


def intensity_cdf(mu, mu_max: float = 0.5):
    mu = np.clip(np.asarray(mu, dtype=float), 0.0, mu_max)
    return 2.0 / math.pi * np.arcsin(np.sqrt(mu / mu_max))


def generate_iid(n: int, cfg: SourceConfig, rng: np.random.Generator) -> PulseBatch:
    return make_samples(sample_phases(rng, n), cfg)


def generate_train(n_pulses: int, cfg: SourceConfig, rng: np.random.Generator | None = None) -> PulseBatch:
    """Sliding-window samples from one phase-randomized pulse train.

    Window ``i`` interferes raw pulses (i, i+1) for H and (i+2, i+3) for V,
    mirroring the one- and two-period delay lines. Neighbouring windows share
    raw pulses, so only windows starting at multiples of 4 are flagged valid.
    """
    if not cfg.train_mode:
        raise ValueError("generate_train requires train_mode=True")
    if n_pulses < 8:
        raise ValueError("n_pulses must be >= 8")
    if rng is None:
        rng = block_rng(cfg.rng_seed, 0)
    psi = rng.random(n_pulses) * TWO_PI
    starts = np.arange(n_pulses - 3)
    quads = np.stack([psi[starts], psi[starts + 1], psi[starts + 2], psi[starts + 3]], axis=1)
    return make_samples(quads, cfg, valid=(starts % 4 == 0))


def local_readout(s) -> LocalReadout:
    """Local X-basis reading implied by a sample; mu_A follows from energy conservation."""
    mu_d, mu_a = readout_da(s.mu_H, s.mu_V, s.phi_HV)
    return LocalReadout(float(s.mu_H), float(s.mu_V), float(mu_d), float(mu_a))


def readout_da(mu_h, mu_v, phi):
    total = np.add(mu_h, mu_v)
    mu_d = 0.5 * (total + 2.0 * np.sqrt(np.multiply(mu_h, mu_v)) * np.cos(phi))
    mu_d = np.clip(mu_d, 0.0, total)
    return mu_d, total - mu_d
