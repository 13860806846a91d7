"""End-to-end chain: source -> reshaping -> regions -> detection -> decoy -> rate.

Two detection modes share everything downstream of the tallies:

* ``expected``: per-region gains integrated analytically over the reshaped
  density (no sampling noise, used for sweeps);
* Monte Carlo: sampled pulses, sampled clicks, integer tallies.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from . import detection as det
from .decoy import (DEFAULT_N_CUT, DecoyBounds, DecoyConstraintSet, DecoyObservation,
                    PhotonMoments, decoy_analysis, empirical_moments, photon_moments, poisson_pmf)
from .keyrate import KeyRateInputs, KeyRateReport, key_rate
from .postselect import (Region, RegionParams, ReshapedDensity, ReshapeSpec, accept_pair,
                         classify_batch, decoy_groups, region_grid, standard_regions)
from .source import STREAM_ACCEPT, STREAM_DETECT, STREAM_SOURCE, SourceConfig, block_rng, generate_iid

log = logging.getLogger(__name__)

BLOCK_SIZE = 1 << 18


@dataclass
class Setup:
    """Geometry shared by every loss point: regions, groups, moments, grids."""

    regions: list[Region]
    density: ReshapedDensity = field(default_factory=ReshapedDensity)
    n_cut: int = DEFAULT_N_CUT
    grid_n: int = 48

    @classmethod
    def standard(cls, params: RegionParams = RegionParams(), mu_max: float = 0.5, n_cut: int = DEFAULT_N_CUT):
        return cls(standard_regions(params), ReshapedDensity(mu_max), n_cut)

    @cached_property
    def by_label(self) -> dict[str, Region]:
        return {r.label: r for r in self.regions}

    @cached_property
    def groups(self) -> dict[str, list[str]]:
        return decoy_groups(self.regions)

    def group_basis(self, group: str) -> str:
        return self.by_label[self.groups[group][0]].basis

    @cached_property
    def key_group(self) -> str:
        """Z group whose regions carry no radius cut (the key-generating set)."""
        for g, labels in self.groups.items():
            regs = [self.by_label[k] for k in labels]
            if regs[0].basis == "Z" and all(r.radius_max is None for r in regs):
                return g
        raise ValueError("no uncut Z region pair for key generation")

    @cached_property
    def moments(self) -> dict[str, PhotonMoments]:
        return {g: photon_moments([self.by_label[k] for k in labels], self.density, self.n_cut, label=g)
                for g, labels in self.groups.items()}

    @cached_property
    def grids(self):
        return {r.label: region_grid(r, self.density, self.grid_n, n_phi=self.grid_n // 2)
                for r in self.regions}

    @property
    def P_Z(self) -> float:
        return self.moments[self.key_group].mass


@dataclass(frozen=True)
class GroupObservation:
    Q: float
    QE: float
    sigma_Q: float = 0.0
    sigma_QE: float = 0.0

    @property
    def E(self) -> float:
        return self.QE / self.Q if self.Q > 0 else 0.0


def expected_observations(setup: Setup, channel: det.ChannelParams) -> dict[str, GroupObservation]:
    out = {}
    for g, labels in setup.groups.items():
        mass = q = qe = 0.0
        for k in labels:
            t = det.expected_tally(setup.by_label[k], setup.grids[k], channel)
            mass += t.mass
            q += t.Q * t.mass
            qe += t.QE * t.mass
        out[g] = GroupObservation(q / mass, qe / mass)
    return out


def observations_from_tallies(setup: Setup, tallies: det.TallySet) -> dict[str, GroupObservation]:
    out = {}
    for g, labels in setup.groups.items():
        t = tallies.group(labels)
        out[g] = GroupObservation(t.Q, t.QE, t.sigma_Q, t.sigma_QE)
    return out


def constraint_sets(setup: Setup, obs: dict[str, GroupObservation],
                    moments: dict[str, PhotonMoments] | None = None):
    """Per-basis constraint sets; ``moments`` defaults to the quadrature values."""
    moments = moments or setup.moments
    sets = {"Z": [], "X": []}
    for g in setup.groups:
        o = obs[g]
        sets[setup.group_basis(g)].append(
            DecoyObservation(moments[g], o.Q, o.QE, o.sigma_Q, o.sigma_QE))
    return DecoyConstraintSet("Z", sets["Z"]), DecoyConstraintSet("X", sets["X"])


@dataclass
class PointResult:
    loss_dB: float
    observations: dict[str, GroupObservation]
    bounds: DecoyBounds
    report: KeyRateReport


def analyze_point(setup: Setup, obs: dict[str, GroupObservation], loss_dB: float,
                  f_e: float = 1.16, k_sigma: float = 0.0,
                  moments: dict[str, PhotonMoments] | None = None) -> PointResult:
    moments = moments or setup.moments
    z_set, x_set = constraint_sets(setup, obs, moments)
    bounds = decoy_analysis(z_set, x_set, k_sigma)
    key = obs[setup.key_group]
    inputs = KeyRateInputs(
        P_Z=setup.P_Z,
        P1_avg=moments[setup.key_group].p_n[1],
        Y1_low=min(1.0, bounds.Y1_low),
        e1_high=bounds.e1_high,
        Q_Z=key.Q,
        QE_Z=min(key.QE, key.Q),
        f_e=f_e,
    )
    return PointResult(loss_dB, obs, bounds, key_rate(inputs))


def expected_point(setup: Setup, channel: det.ChannelParams, f_e: float = 1.16) -> PointResult:
    return analyze_point(setup, expected_observations(setup, channel), channel.loss_dB, f_e)


# ---------------------------------------------------------------------------
# Monte Carlo


@dataclass
class BlockResult:
    """Mergeable output of one or more blocks.

    ``moment_sums[k, n]`` is the sum of ``P_n(mu_H + mu_V)`` over the samples
    classified into region ``k``; divided by ``tallies[label].n_sent`` it gives
    the empirical photon-number moments of that region.
    """

    n_raw: int
    n_kept: int
    tallies: det.TallySet
    moment_sums: np.ndarray

    def __add__(self, other: "BlockResult") -> "BlockResult":
        return BlockResult(self.n_raw + other.n_raw, self.n_kept + other.n_kept,
                           self.tallies + other.tallies, self.moment_sums + other.moment_sums)

    def moments(self, setup: "Setup") -> dict[str, PhotonMoments]:
        """Group moments from the sampled data (exact for the sampled source law)."""
        index = {r.label: k for k, r in enumerate(setup.regions)}
        out = {}
        for g, labels in setup.groups.items():
            sums = sum(self.moment_sums[index[k]] for k in labels)
            count = sum(self.tallies[k].n_sent for k in labels)
            out[g] = empirical_moments(g, sums, count, count / self.n_kept if self.n_kept else float("nan"))
        return out


def block_sizes(n_samples: int, block_size: int = BLOCK_SIZE) -> list[int]:
    full, rest = divmod(n_samples, block_size)
    return [block_size] * full + ([rest] if rest else [])


def region_moment_sums(mu_h, mu_v, member, n_cut: int) -> np.ndarray:
    p = poisson_pmf(np.arange(n_cut + 1)[None, :], (mu_h + mu_v)[:, None])
    return member.astype(float) @ p


def simulate_block(seed: int, block: int, n: int, source: SourceConfig, reshape: ReshapeSpec,
                   regions: Sequence[Region], channel: det.ChannelParams,
                   n_cut: int = DEFAULT_N_CUT) -> BlockResult:
    """One reproducible work unit; its stream depends only on ``(seed, block)``."""
    batch = generate_iid(n, source, block_rng(seed, block, STREAM_SOURCE))
    keep = accept_pair(batch.mu_H, batch.mu_V, reshape, block_rng(seed, block, STREAM_ACCEPT))
    b = batch.select(keep)
    member, states = classify_batch(b.mu_H, b.mu_V, b.phi_HV, regions, source.mu_max_per_pol)
    hit = member.any(axis=0)
    member, states = member[:, hit], states[:, hit]
    events = det.detect_batch(b.mu_H[hit], b.mu_V[hit], b.phi_HV[hit], channel,
                              block_rng(seed, block, STREAM_DETECT))
    h, v = b.mu_H[hit], b.mu_V[hit]
    return BlockResult(n, int(keep.sum()), det.accumulate(events, member, states, regions),
                       region_moment_sums(h, v, member, n_cut))


def _run_block(args):
    return simulate_block(*args)


def simulate(n_samples: int, seed: int, source: SourceConfig, reshape: ReshapeSpec,
             regions: Sequence[Region], channel: det.ChannelParams, shards: int = 1,
             block_size: int = BLOCK_SIZE, n_cut: int = DEFAULT_N_CUT) -> BlockResult:
    """Monte Carlo over fixed-size blocks; ``shards`` only sets the worker count."""
    tasks = [(seed, i, n, source, reshape, list(regions), channel, n_cut)
             for i, n in enumerate(block_sizes(n_samples, block_size))]
    if shards > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=shards) as pool:
            parts = list(pool.map(_run_block, tasks))
    else:
        parts = [_run_block(t) for t in tasks]
    total = BlockResult(0, 0, det.TallySet({r.label: det.RegionTally() for r in regions}),
                        np.zeros((len(regions), n_cut + 1)))
    for p in parts:
        total = total + p
    return total


def sample_reshaped_events(n: int, setup: Setup, channel: det.ChannelParams, rng: np.random.Generator):
    """Monte Carlo tallies drawn directly from the reshaped density (skips the source)."""
    mu_h, mu_v, phi = setup.density.sample(rng, n)
    member, states = classify_batch(mu_h, mu_v, phi, setup.regions, setup.density.mu_max)
    hit = member.any(axis=0)
    events = det.detect_batch(mu_h[hit], mu_v[hit], phi[hit], channel, rng)
    return det.accumulate(events, member[:, hit], states[:, hit], setup.regions)
