import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fpqkd import detection as det
from fpqkd.detection import (NO_CLICK, OUTCOMES, ChannelParams, EventBatch, PipelineError,
                             RegionTally, TallySet, accumulate, analytic_click_stats, detect_batch,
                             expected_tally, transmit_and_detect)
from fpqkd.pipeline import expected_observations, sample_reshaped_events
from fpqkd.source import PulseSample


def jones_intensities(mu_h, mu_v, phi, p):
    """Detector-arm mean photon numbers from explicit Jones vectors."""
    psi = np.array([math.sqrt(mu_h), math.sqrt(mu_v) * complex(math.cos(phi), math.sin(phi))])
    c, s = math.cos(p.theta_m), math.sin(p.theta_m)
    psi = np.array([[c, -s], [s, c]]) @ psi
    r = 1 / math.sqrt(2)
    basis = {"H": [1, 0], "V": [0, 1], "D": [r, r], "A": [r, -r]}
    return {k: p.eta_total * abs(np.vdot(v, psi)) ** 2 for k, v in basis.items()}


def oracle_probs(mu_h, mu_v, phi, p):
    i = jones_intensities(mu_h, mu_v, phi, p)
    q = {k: 1 - (1 - p.dark_prob) * math.exp(-v) for k, v in i.items()}
    out = {}
    for a, b in (("H", "V"), ("D", "A")):
        out[a] = q[a] * (1 - q[b]) + 0.5 * q[a] * q[b]
        out[b] = q[b] * (1 - q[a]) + 0.5 * q[a] * q[b]
    return out


def _one(mu_h, mu_v, phi):
    return PulseSample(mu_h, mu_v, phi, (0.0,) * 4)


def test_channel_validation():
    with pytest.raises(ValueError):
        ChannelParams(loss_dB=-1)
    with pytest.raises(ValueError):
        ChannelParams(dark_prob=2)
    assert ChannelParams(loss_dB=10, detector_efficiency=0.1).eta_total == pytest.approx(0.01)


def test_dead_channel_never_clicks():
    p = ChannelParams(detector_efficiency=0.0, dark_prob=0.0)
    ev = detect_batch(np.full(1000, 0.4), np.full(1000, 0.3), np.zeros(1000), p, np.random.default_rng(0))
    assert np.all(ev.outcome == NO_CLICK)
    assert not ev.clicks.any()


def test_orthogonal_detector_silent():
    p = ChannelParams(detector_efficiency=1.0, dark_prob=0.0, misalignment_e_d=0.0, basis_split=1.0)
    ev = detect_batch(np.full(10**4, 0.5), np.zeros(10**4), np.zeros(10**4), p, np.random.default_rng(1))
    assert not ev.clicks[:, 1].any()
    assert ev.clicks[:, 0].any()


def test_single_event_api():
    p = ChannelParams(detector_efficiency=1.0, dark_prob=0.0, misalignment_e_d=0.0, basis_split=1.0)
    e = transmit_and_detect(_one(0.5, 0.0, 0.0), p, np.random.default_rng(3))
    assert e.basis == "Z" and e.squashed in ("H", "no-click")


def test_h_state_gain_monte_carlo():
    mu = 0.4
    p = ChannelParams(loss_dB=3.0, detector_efficiency=0.1, dark_prob=1e-3, misalignment_e_d=0.0,
                      basis_split=1.0)
    n = 10**7
    ev = detect_batch(np.full(n, mu), np.zeros(n), np.zeros(n), p, np.random.default_rng(5))
    want = 1 - (1 - p.dark_prob) ** 2 * math.exp(-p.eta_total * mu)
    got = np.mean(ev.outcome != NO_CLICK)
    assert abs(got - want) < 4 * math.sqrt(want * (1 - want) / n)


def test_analytic_symmetric_state():
    p = ChannelParams(loss_dB=2.0, misalignment_e_d=0.03)
    s = analytic_click_stats(0.3, 0.3, math.pi / 2, p)
    assert s.error_gain("H") == pytest.approx(0.5 * s.gain_z, rel=1e-12)


def test_analytic_dark_floor():
    p = ChannelParams(dark_prob=1e-4)
    s = analytic_click_stats(1e-15, 1e-15, 0.0, p)
    assert s.gain_z == pytest.approx(1 - (1 - 1e-4) ** 2, rel=1e-9)
    assert s.gain_x == pytest.approx(1 - (1 - 1e-4) ** 2, rel=1e-9)


@given(st.floats(0, 0.5), st.floats(0, 0.5), st.floats(0, 2 * math.pi), st.floats(0, 30),
       st.floats(0, 0.1), st.floats(0, 0.1))
def test_analytic_matches_jones_oracle(mu_h, mu_v, phi, loss, dark, e_d):
    p = ChannelParams(loss_dB=loss, detector_efficiency=0.5, dark_prob=dark, misalignment_e_d=e_d)
    s = analytic_click_stats(mu_h, mu_v, phi, p)
    o = oracle_probs(mu_h, mu_v, phi, p)
    for k in OUTCOMES:
        assert float(s.prob[k]) == pytest.approx(o[k], rel=1e-9, abs=1e-15)
    assert float(s.gain_z) == pytest.approx(o["H"] + o["V"], rel=1e-9, abs=1e-15)
    assert float(s.gain_x) == pytest.approx(o["D"] + o["A"], rel=1e-9, abs=1e-15)


def test_monte_carlo_matches_analytic_random_points():
    rng = np.random.default_rng(77)
    n = 10**6
    for _ in range(5):
        mu_h, mu_v = rng.uniform(0, 0.5, 2)
        phi = rng.uniform(0, 2 * math.pi)
        p = ChannelParams(loss_dB=rng.uniform(0, 5), detector_efficiency=0.5,
                          dark_prob=10 ** rng.uniform(-6, -2), misalignment_e_d=rng.uniform(0, 0.05))
        ev = detect_batch(np.full(n, mu_h), np.full(n, mu_v), np.full(n, phi), p, rng)
        s = analytic_click_stats(mu_h, mu_v, phi, p)
        for basis, states in ((det.BASIS_Z, "HV"), (det.BASIS_X, "DA")):
            m = ev.basis == basis
            for st_ in states:
                want = float(s.prob[st_])
                got = np.mean(ev.outcome[m] == OUTCOMES[st_])
                assert abs(got - want) <= 4 * math.sqrt(want * (1 - want) / m.sum()) + 1e-12


def test_squash_double_clicks_random():
    p = ChannelParams(detector_efficiency=1.0, dark_prob=1.0, basis_split=1.0)
    ev = detect_batch(np.full(10**5, 0.1), np.zeros(10**5), np.zeros(10**5), p, np.random.default_rng(9))
    assert np.all(ev.clicks[:, 0] & ev.clicks[:, 1])
    frac_h = np.mean(ev.outcome == OUTCOMES["H"])
    assert abs(frac_h - 0.5) < 4 * 0.5 / math.sqrt(10**5)


def test_empty_tally():
    t = RegionTally(n_sent=100, n_matched=50)
    assert t.Q == 0 and t.QE == 0
    assert t.sigma_Q == pytest.approx(3 / 50)
    assert RegionTally().sigma_Q == 1.0


counts = st.integers(0, 1000)


@st.composite
def tallies(draw):
    e = draw(counts)
    d = e + draw(counts)
    m = d + draw(counts)
    s = m + draw(counts)
    return RegionTally(s, m, d, e)


@given(tallies(), tallies(), tallies())
def test_tally_merge_laws(a, b, c):
    x = TallySet({"R": a}) + TallySet({"R": b})
    y = TallySet({"R": b}) + TallySet({"R": a})
    assert x.tallies == y.tallies
    assert ((a + b) + c) == (a + (b + c))
    t = a + b + c
    assert 0 <= t.n_error <= t.n_detected <= t.n_matched <= t.n_sent
    assert 0 <= t.QE <= t.Q <= 1


def test_accumulate_concatenation_equals_merge(setup_std):
    p = ChannelParams(loss_dB=0.0)
    rng = np.random.default_rng(8)
    from fpqkd.postselect import classify_batch
    h, v, phi = setup_std.density.sample(rng, 200_000)
    member, states = classify_batch(h, v, phi, setup_std.regions)
    ev = detect_batch(h, v, phi, p, rng)
    whole = accumulate(ev, member, states, setup_std.regions)
    k = 77_777
    first = EventBatch(ev.basis[:k], ev.clicks[:k], ev.outcome[:k])
    second = EventBatch(ev.basis[k:], ev.clicks[k:], ev.outcome[k:])
    merged = (accumulate(first, member[:, :k], states[:, :k], setup_std.regions)
              + accumulate(second, member[:, k:], states[:, k:], setup_std.regions))
    assert merged.tallies == whole.tallies
    for t in whole.tallies.values():
        assert t.QE <= t.Q


def test_accumulate_length_mismatch(setup_std):
    ev = EventBatch(np.zeros(3, int), np.zeros((3, 4), bool), np.full(3, NO_CLICK))
    member = np.zeros((len(setup_std.regions), 4), bool)
    with pytest.raises(PipelineError):
        accumulate(ev, member, np.full(member.shape, ""), setup_std.regions)


def test_regions_monte_carlo_vs_expected(setup_std):
    p = ChannelParams(loss_dB=0.0)
    t = sample_reshaped_events(10**7, setup_std, p, np.random.default_rng(10))
    for r in setup_std.regions:
        e = expected_tally(r, setup_std.grids[r.label], p)
        got = t[r.label]
        assert abs(got.Q - e.Q) < 4 * math.sqrt(e.Q * (1 - e.Q) / got.n_matched), r.label
        assert abs(got.QE - e.QE) < 4 * math.sqrt(e.QE * (1 - e.QE) / got.n_matched) + 1e-12, r.label


def test_gain_monotone_in_loss(setup_std):
    grid = [0.0, 5.0, 10.0, 15.0, 20.0]
    q = [expected_observations(setup_std, ChannelParams(loss_dB=l))["Z1"].Q for l in grid]
    assert all(a > b for a, b in zip(q, q[1:]))
    mc = [sample_reshaped_events(2 * 10**6, setup_std, ChannelParams(loss_dB=l), np.random.default_rng(12))
          .group(["Z_H", "Z_V"]) for l in grid]
    for a, b in zip(mc, mc[1:]):
        assert b.Q <= a.Q + 4 * math.hypot(a.sigma_Q, b.sigma_Q)


@pytest.mark.parametrize("e_d", [0.012, 0.02])
def test_z_qber_at_highest_loss(setup_std, e_d):
    obs = expected_observations(setup_std, ChannelParams(loss_dB=16.7, misalignment_e_d=e_d))
    assert 0.015 <= obs["Z1"].E <= 0.035
