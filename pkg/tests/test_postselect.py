import logging
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from fpqkd.postselect import (ConfigurationError, Region, RegionParams, ReshapedDensity, ReshapeSpec,
                              UndefinedAzimuthError, accept, accept_mask, accept_pair, azimuth,
                              azimuth_batch, classify, classify_batch, compute_C, decoy_groups,
                              region_mass, standard_regions)
from fpqkd.source import (LocalReadout, PulseSample, SourceConfig, block_rng, generate_iid,
                          intensity_pdf, readout_da)

MM = 0.5


def c_closed_form(mm=MM):
    # stationary point of log f(mu) - mu: 2 mu^2 + (2 - 2 mm) mu - mm = 0
    a, b, c = 2.0, 2.0 - 2.0 * mm, -mm
    mu = (-b + math.sqrt(b * b - 4 * a * c)) / (2 * a)
    return mu, math.exp(-mu) / (math.pi * math.sqrt(mu * (mm - mu)))


def test_compute_C_matches_closed_form():
    mu_star, c = c_closed_form()
    assert mu_star == pytest.approx((math.sqrt(5) - 1) / 4, rel=1e-14)
    assert compute_C(MM) == pytest.approx(c, rel=1e-10)
    assert compute_C(MM) == pytest.approx(0.961, abs=1e-3)


def test_compute_C_grid_scan():
    mu = np.linspace(0, MM, 10**6 + 2)[1:-1]
    ratio = intensity_pdf(mu, MM) * np.exp(-mu)
    arg = mu[np.argmin(ratio)]
    assert 0.25 < arg < 0.5
    assert intensity_pdf(0.25, MM) * math.exp(-0.25) == pytest.approx(0.9915, abs=1e-4)
    c = compute_C(MM)
    assert np.count_nonzero(c * np.exp(mu) > intensity_pdf(mu, MM)) == 0


@pytest.mark.parametrize("mm", [0.1, 0.5, 1.0, 3.0])
def test_compute_C_other_scales(mm):
    assert compute_C(mm) == pytest.approx(c_closed_form(mm)[1], rel=1e-9)


def test_keep_fractions():
    spec = ReshapeSpec.auto()
    b = generate_iid(10**7, SourceConfig(), block_rng(21, 0))
    u = block_rng(21, 0, 1).random((2, len(b)))
    kh = accept_mask(b.mu_H, spec, u[0])
    kv = accept_mask(b.mu_V, spec, u[1])
    oracle = spec.target_scale_C * math.expm1(MM)
    assert kh.mean() == pytest.approx(0.6234, abs=1e-3)
    assert kh.mean() == pytest.approx(oracle, abs=5 * math.sqrt(oracle * (1 - oracle) / len(b)))
    assert (kh & kv).mean() == pytest.approx(0.3886, abs=2e-3)

    # survivors follow the normalised exponential law
    kept = b.mu_H[kh]
    counts, edges = np.histogram(kept, bins=100, range=(0, MM))
    cdf = np.expm1(edges) / math.expm1(MM)
    expect = np.diff(cdf) * len(kept)
    assert np.max(np.abs(counts - expect) / expect) < 0.02
    sub = kept[:10**6]
    assert stats.kstest(sub, lambda x: np.expm1(x) / math.expm1(MM)).pvalue > 1e-3


def test_accept_rejects_endpoints_and_range():
    spec = ReshapeSpec.auto()
    rng = np.random.default_rng(0)
    assert not any(accept(0.0, spec, rng) for _ in range(50))
    assert not any(accept(MM, spec, rng) for _ in range(50))
    with pytest.raises(ValueError):
        accept(0.6, spec, rng)


def test_accept_pair_shape():
    spec = ReshapeSpec.auto()
    keep = accept_pair(np.full(5, 0.3), np.full(5, 0.3), spec, np.random.default_rng(1))
    assert keep.shape == (5,) and keep.dtype == bool


def test_azimuth_examples():
    assert azimuth(LocalReadout(0.25, 0.25, 0.5, 0.0)) == pytest.approx(0.0, abs=1e-12)
    assert azimuth(LocalReadout(0.25, 0.25, 0.25, 0.25)) == pytest.approx(math.pi / 2)


def test_azimuth_pole():
    with pytest.raises(UndefinedAzimuthError):
        azimuth(LocalReadout(0.3, 0.0, 0.15, 0.15))


def test_azimuth_clamp_recorded(caplog):
    with caplog.at_level(logging.WARNING):
        phi = azimuth(LocalReadout(0.25, 0.25, 0.6, 0.0))
    assert phi == 0.0
    assert "clamped" in caplog.text
    _, clamped = azimuth_batch([0.25, 0.25], [0.25, 0.25], [0.5 + 1e-12, 0.6], [0.0, 0.0])
    assert list(clamped) == [False, True]


def test_azimuth_round_trip():
    rng = np.random.default_rng(2)
    n = 10**5
    mu_h = rng.uniform(1e-3, MM, n)
    mu_v = rng.uniform(1e-3, MM, n)
    phi = rng.uniform(0, math.pi, n)
    mu_d, mu_a = readout_da(mu_h, mu_v, phi)
    got, clamped = azimuth_batch(mu_h, mu_v, mu_d, mu_a)
    assert not clamped.any()
    assert np.max(np.abs(got - phi)) < 1e-9


def test_standard_regions_layout():
    regs = {r.label: r for r in standard_regions()}
    assert regs["X2"].radius_max / regs["X1"].radius_max == pytest.approx(0.5)
    assert regs["X3"].radius_max / regs["X1"].radius_max == pytest.approx(0.1)
    assert regs["Z_H"].polar_max == pytest.approx(0.02)
    assert regs["Z_V"].polar_min == pytest.approx(math.pi / 2 - 0.02)
    assert regs["Z_H"].radius_max is None
    assert regs["X1"].polar_min == pytest.approx(math.pi / 4 - 0.1)
    assert decoy_groups(list(regs.values()))["Z1"] == ["Z_H", "Z_V"]


def test_standard_regions_overlap_error():
    with pytest.raises(ConfigurationError):
        standard_regions(RegionParams(delta_z=0.8, delta_x=0.2))
    with pytest.raises(ConfigurationError):
        standard_regions(RegionParams(delta_x=-0.1))


def _sample(mu_h, mu_v, phi=0.0):
    return PulseSample(mu_h, mu_v, phi, (0.0, 0.0, 0.0, 0.0))


def test_classify_examples():
    regs = standard_regions()
    out = classify(_sample(0.3, 0.3 * math.tan(0.01)), regs)
    assert "Z_H" in out.region_labels and not any(k.startswith("X") for k in out.region_labels)
    assert out.state_label == "H"

    r = 0.05 * 0.5
    p = r / math.sqrt(2)
    out = classify(_sample(p, p, 0.05), regs)
    assert {"X1", "X2", "X3"} <= out.region_labels
    assert out.state_label == "D"

    out = classify(_sample(0.4, 1e-4), regs)
    assert "Z_H" in out.region_labels and out.state_label == "H"

    out = classify(_sample(0.2, 0.2, math.pi), regs)
    assert out.region_labels == {"X1"}  # radius 0.283 <= 0.5 only
    assert out.state_label == "A"

    out = classify(_sample(0.25, 0.25, math.pi / 2), regs)
    assert out.region_labels == frozenset() and out.state_label == "none"


mus = st.floats(1e-6, MM, allow_nan=False)
phis = st.floats(0.0, 2 * math.pi, exclude_max=True, allow_nan=False)


@given(mus, mus, phis)
def test_classification_properties(mu_h, mu_v, phi):
    regs = standard_regions()
    a = classify(_sample(mu_h, mu_v, phi), regs)
    b = classify(_sample(mu_h, mu_v, phi), regs)
    assert a == b
    labels = a.region_labels
    # nesting of the concentric X sectors
    if "X3" in labels:
        assert "X2" in labels
    if "X2" in labels:
        assert "X1" in labels
    # H/V only from Z, D/A only from X
    if a.state_label in ("H", "V"):
        assert all(k.startswith("Z") for k in labels)
    if a.state_label in ("D", "A"):
        assert all(k.startswith("X") for k in labels)
    # H <-> V swap symmetry
    sw = classify(_sample(mu_v, mu_h, phi), regs).region_labels
    assert ("Z_H" in labels) == ("Z_V" in sw)
    assert ("Z_V" in labels) == ("Z_H" in sw)


def test_classify_batch_matches_scalar():
    regs = standard_regions()
    rng = np.random.default_rng(5)
    h, v, phi = rng.uniform(0, MM, 2000), rng.uniform(0, MM, 2000), rng.uniform(0, 2 * math.pi, 2000)
    member, states = classify_batch(h, v, phi, regs)
    for i in range(0, 2000, 97):
        out = classify(_sample(h[i], v[i], phi[i]), regs)
        assert {r.label for k, r in enumerate(regs) if member[k, i]} == out.region_labels


def test_region_validation():
    with pytest.raises(ConfigurationError):
        Region("bad", 1.0, 0.5)
    with pytest.raises(ConfigurationError):
        Region("bad", 0.0, 0.5, radius_max=-1.0)


def test_region_mass_box_and_symmetry():
    box = Region("box", 0.0, math.pi / 2, state="H")
    assert region_mass(box) == pytest.approx(1.0, abs=1e-8)
    regs = {r.label: r for r in standard_regions()}
    assert region_mass(regs["Z_H"]) == pytest.approx(region_mass(regs["Z_V"]), abs=1e-10)


def test_region_mass_additive():
    whole = Region("w", 0.0, 0.3, state="H")
    parts = [Region("a", 0.0, 0.1, state="H"), Region("b", 0.1, 0.3, state="H")]
    assert sum(region_mass(p) for p in parts) == pytest.approx(region_mass(whole), rel=1e-8)
    sect = Region("s", 0.5, 1.0, radius_max=0.3, state="H")
    split = [Region("s1", 0.5, 0.7, radius_max=0.3, state="H"), Region("s2", 0.7, 1.0, radius_max=0.3, state="H")]
    assert sum(region_mass(p) for p in split) == pytest.approx(region_mass(sect), rel=1e-8)


def test_x1_d_mass_monte_carlo():
    x1 = {r.label: r for r in standard_regions()}["X1"]
    d_only = Region("X1_D", x1.polar_min, x1.polar_max, x1.radius_max,
                    tuple(w for w in x1.windows if w.state == "D"))
    dens = ReshapedDensity(MM)
    mass = region_mass(d_only, dens)
    rng = np.random.default_rng(31)
    hits = n = 0
    for _ in range(20):
        h, v, phi = dens.sample(rng, 5 * 10**6)
        member, _ = classify_batch(h, v, phi, [d_only], MM)
        hits += int(member.sum())
        n += len(h)
    sigma = math.sqrt(mass * (1 - mass) / n)
    assert abs(hits / n - mass) < 4 * sigma


def test_reshaped_density_sampler():
    dens = ReshapedDensity(MM)
    h, v, phi = dens.sample(np.random.default_rng(4), 10**5)
    cdf = lambda x: np.expm1(x) / math.expm1(MM)
    assert stats.kstest(h, cdf).pvalue > 1e-3
    assert stats.kstest(v, cdf).pvalue > 1e-3
    assert stats.kstest(phi, stats.uniform(0, 2 * math.pi).cdf).pvalue > 1e-3
