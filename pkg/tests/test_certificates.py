"""Certificate computations.

Reference numbers below were computed once with mpmath at 40 digits and are
frozen here; region tables are checked against brute-force enumeration of
the flipped dimensions.
"""

import itertools
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from hiersmooth.certificates import (IncompatibleThreatError, RegionTable, ablation_lower,
                                     ablation_regions, ablation_upper, ball_bounds, certify_ball,
                                     delta_fixed_ablation, delta_nonuniform, delta_uniform,
                                     discrete_lp_lower, discrete_lp_upper, gaussian_lower_bound,
                                     gaussian_upper_bound, hier_discrete_lower,
                                     hier_discrete_upper, hier_gaussian_lower,
                                     hier_gaussian_max_radius, hier_gaussian_upper,
                                     sparse_regions)
from hiersmooth.core import (Ablation, ContinuousL2, DiscreteFlip, Gaussian, PerRow,
                             SmoothingConfig, SparseFlip, Uniform)

PHI_MINUS_1 = 0.15865525393145705141
PHI_PLUS_1 = 0.84134474606854294859
HIER_GAUSS_LOWER_EX = 0.57598815518102102894   # p_y=0.99, eps=0.3, sigma=0.5, p=0.85, r=3
HIER_GAUSS_UPPER_EX = 0.64939295352454542615   # p_y=0.3, eps=0.5, sigma=1, delta=0.19
MAX_RADIUS_EX = 1.9478423628469362531          # p_y=0.99, sigma=1, delta=0.19
Q_975 = 1.9599639845400542355

probs = st.floats(0.0, 1.0)
open_probs = st.floats(1e-6, 1 - 1e-6)


def brute_regions(r_a, r_d, p_plus, p_minus):
    """Enumerate all bit patterns of the changed dimensions and group by ratio."""
    groups = {}
    for bits in itertools.product((0, 1), repeat=r_a + r_d):
        clean = pert = 1.0
        for j, w in enumerate(bits):
            if j < r_a:   # clean bit 0, perturbed bit 1
                clean *= p_plus if w else 1 - p_plus
                pert *= (1 - p_minus) if w else p_minus
            else:         # clean bit 1, perturbed bit 0
                clean *= (1 - p_minus) if w else p_minus
                pert *= p_plus if w else 1 - p_plus
        if clean == 0 and pert == 0:
            continue
        ratio = math.inf if pert == 0 else clean / pert
        key = ratio if math.isinf(ratio) else round(math.log(ratio), 9) if ratio > 0 else -math.inf
        c, p = groups.get(key, (0.0, 0.0))
        groups[key] = (c + clean, p + pert)
    return sorted(((k, c, p) for k, (c, p) in groups.items()), key=lambda t: -t[0])


# --- delta -----------------------------------------------------------------------

def test_delta_uniform_examples():
    for r in (0, 1, 5, 100):
        assert delta_uniform(1.0, r).delta == 0.0
    assert delta_uniform(0.0, 1).delta == 1.0
    assert delta_uniform(0.9, 2).delta == pytest.approx(0.19, abs=1e-15)
    assert delta_uniform(0.9, 0).delta == 0.0
    assert delta_uniform(0.85, 3).delta == pytest.approx(0.385875, abs=1e-15)


def test_delta_nonuniform_examples():
    assert delta_nonuniform([0.5, 0.9, 0.99], 2).delta == pytest.approx(0.55, abs=1e-15)
    assert delta_nonuniform([0.5, 0.9], 0).delta == 0.0
    assert delta_nonuniform([0.7] * 4, 3).delta == pytest.approx(delta_uniform(0.7, 3).delta,
                                                                 abs=1e-15)
    with pytest.raises(ValueError):
        delta_nonuniform([0.5, 0.5], 3)


def test_delta_fixed_ablation_examples():
    assert delta_fixed_ablation(4, 1, 1).delta == pytest.approx(0.25, abs=1e-15)
    assert delta_fixed_ablation(10, 0, 4).delta == 0.0
    assert delta_fixed_ablation(10, 3, 0).delta == 0.0
    assert delta_fixed_ablation(10, 3, 2).delta == pytest.approx(1 - 56 / 120, abs=1e-14)
    assert delta_fixed_ablation(5, 4, 2).delta == 1.0
    assert delta_fixed_ablation(10000, 50, 3).delta == pytest.approx(
        1 - math.comb(9997, 50) / math.comb(10000, 50), rel=1e-12)
    with pytest.raises(ValueError):
        delta_fixed_ablation(3, 4, 1)


@settings(max_examples=200, deadline=None)
@given(probs, st.integers(0, 50))
def test_delta_uniform_in_unit_interval_and_monotone(p, r):
    d = delta_uniform(p, r).delta
    assert 0.0 <= d <= 1.0
    assert delta_uniform(p, r + 1).delta >= d


# --- Gaussian ----------------------------------------------------------------------

def test_gaussian_bound_examples():
    assert gaussian_lower_bound(0.37, 0.0, 2.0) == 0.37
    assert gaussian_upper_bound(0.37, 0.0, 2.0) == 0.37
    assert gaussian_lower_bound(0.5, 0.7, 0.7) == pytest.approx(PHI_MINUS_1, abs=1e-15)
    assert gaussian_upper_bound(0.5, 0.7, 0.7) == pytest.approx(PHI_PLUS_1, abs=1e-15)
    assert gaussian_lower_bound(0.0, 1.0, 1.0) == 0.0
    assert gaussian_lower_bound(1.0, 1.0, 1.0) == 1.0
    with pytest.raises(ValueError):
        gaussian_lower_bound(0.5, 1.0, 0.0)


@settings(max_examples=300, deadline=None)
@given(open_probs, st.floats(0, 5), st.floats(0.05, 5))
def test_gaussian_reflection(p, eps, sigma):
    # forming 1 - p costs digits for small p, so compare relatively
    assert gaussian_upper_bound(p, eps, sigma) == pytest.approx(
        1 - gaussian_lower_bound(1 - p, eps, sigma), rel=1e-9, abs=1e-12)


def test_hier_gaussian_examples():
    d = delta_uniform(0.85, 3)
    assert hier_gaussian_lower(0.99, 0.3, 0.5, d) == pytest.approx(HIER_GAUSS_LOWER_EX, abs=1e-13)
    assert hier_gaussian_upper(0.3, 0.5, 1.0, 0.19) == pytest.approx(HIER_GAUSS_UPPER_EX,
                                                                      abs=1e-13)
    assert hier_gaussian_lower(0.2, 0.1, 1.0, 0.2) == 0.0
    assert hier_gaussian_upper(0.85, 0.1, 1.0, 0.2) == 1.0
    assert hier_gaussian_lower(0.9, 0.0, 1.0, 1.0) == 0.0
    assert hier_gaussian_upper(0.1, 0.0, 1.0, 1.0) == 1.0


@settings(max_examples=300, deadline=None)
@given(probs, st.floats(0, 3), st.floats(0.05, 3))
def test_hier_gaussian_reduces_at_zero_delta(p, eps, sigma):
    assert hier_gaussian_lower(p, eps, sigma, 0.0) == gaussian_lower_bound(p, eps, sigma)
    assert hier_gaussian_upper(p, eps, sigma, 0.0) == gaussian_upper_bound(p, eps, sigma)


def test_max_radius_examples():
    assert hier_gaussian_max_radius(0.99, 1.0, 0.19) == pytest.approx(MAX_RADIUS_EX, abs=1e-12)
    assert hier_gaussian_max_radius(0.975, 1.0, 0.0) == pytest.approx(Q_975, abs=1e-12)
    assert hier_gaussian_max_radius(0.6, 1.0, 0.5) == 0.0
    assert hier_gaussian_max_radius(1.0, 1.0, 0.1) == math.inf
    assert hier_gaussian_max_radius(0.5, 1.0, 0.0) == 0.0
    # arguments of the two quantiles coincide: p_y - delta = 1/2
    assert hier_gaussian_max_radius(0.6, 2.0, 0.1) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=300, deadline=None)
@given(st.floats(0.5, 0.9999), st.floats(0.05, 3), st.floats(0, 0.45))
def test_lower_bound_is_half_at_max_radius(p, sigma, delta):
    eps = hier_gaussian_max_radius(p, sigma, delta)
    assume(1e-6 < eps < math.inf)
    assert hier_gaussian_lower(p, eps, sigma, delta) == pytest.approx(0.5, abs=1e-8)
    assert hier_gaussian_lower(p, eps * 0.999, sigma, delta) > 0.5


# --- regions and the linear program -----------------------------------------------

def test_region_example():
    t = sparse_regions(1, 0, 0.1, 0.4)
    got = [(math.exp(r), math.exp(c), math.exp(p)) for r, c, p in t.regions]
    assert got[0] == pytest.approx((2.25, 0.9, 0.4), abs=1e-14)
    assert got[1] == pytest.approx((1 / 6, 0.1, 0.6), abs=1e-14)
    assert discrete_lp_lower(t, 0.9) == pytest.approx(0.4, abs=1e-15)
    assert discrete_lp_upper(t, 0.1) == pytest.approx(0.6, abs=1e-15)
    assert hier_discrete_lower(0.9, 0.2, t) == pytest.approx(0.875 / 0.9 * 0.4 * 0.8, abs=1e-15)


def test_identical_distributions_merge_to_one_region():
    t = sparse_regions(3, 2, 0.5, 0.5)
    assert len(t) == 1
    assert t.regions[0] == pytest.approx((0.0, 0.0, 0.0), abs=1e-12)
    for b in (0.0, 0.3, 1.0):
        assert discrete_lp_lower(t, b) == pytest.approx(b, abs=1e-15)
        assert discrete_lp_upper(t, b) == pytest.approx(b, abs=1e-15)


def test_degenerate_flip_probabilities_give_infinite_ratios():
    t = sparse_regions(1, 1, 0.0, 0.3)
    assert t.log_ratio[0] == math.inf
    assert discrete_lp_lower(t, 0.5) == 0.0
    # with p_plus = 0 the clean input never sets the inserted bit, so only the
    # perturbed outcomes with that bit cleared (mass 1 - 0.7) are reachable
    assert discrete_lp_lower(t, 1.0) == pytest.approx(0.3, abs=1e-15)


@pytest.mark.parametrize("r_a,r_d", [(0, 0), (1, 0), (0, 1), (2, 1), (3, 3), (4, 2)])
@pytest.mark.parametrize("pp,pm", [(0.1, 0.4), (0.05, 0.9), (0.5, 0.5), (0.0, 0.7),
                                   (0.2, 1.0), (0.01, 0.6)])
def test_regions_match_brute_force(r_a, r_d, pp, pm):
    want = brute_regions(r_a, r_d, pp, pm)
    got = sparse_regions(r_a, r_d, pp, pm).regions
    assert len(got) == len(want)
    for (lr, lc, lp), (k, c, p) in zip(got, want):
        assert math.exp(lc) == pytest.approx(c, abs=1e-12)
        assert math.exp(lp) == pytest.approx(p, abs=1e-12)
        if math.isinf(k):
            assert lr == k
        else:
            assert lr == pytest.approx(k, abs=1e-8)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 60), st.integers(0, 60), probs, probs)
def test_regions_normalized_and_distinct(r_a, r_d, pp, pm):
    t = sparse_regions(r_a, r_d, pp, pm)
    assert math.fsum(np.exp(t.log_mass_clean)) == pytest.approx(1.0, abs=1e-9)
    assert math.fsum(np.exp(t.log_mass_perturbed)) == pytest.approx(1.0, abs=1e-9)
    finite = t.log_ratio[np.isfinite(t.log_ratio)]
    assert np.all(np.diff(t.log_ratio[np.isfinite(t.log_ratio)]) < 0)
    assert len(set(t.log_ratio.tolist())) == len(t)
    assert finite.size >= len(t) - 2


def test_regions_survive_large_radii():
    t = sparse_regions(120, 80, 0.001, 0.999)
    assert math.fsum(np.exp(t.log_mass_clean)) == pytest.approx(1.0, abs=1e-9)
    assert 0.0 <= hier_discrete_lower(0.9, 0.1, t) <= 0.9


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 6), st.integers(0, 6), st.floats(0.0, 0.5))
def test_equal_flip_probabilities_only_count_total_flips(r_a, r_d, q):
    total = r_a + r_d
    a = sparse_regions(r_a, r_d, q, q)
    b = sparse_regions(total, 0, q, q)
    assert np.allclose(a.log_ratio, b.log_ratio, atol=1e-9) or len(a) == len(b) == 1
    for y in (0.1, 0.5, 0.77, 0.95):
        assert discrete_lp_lower(a, y) == pytest.approx(discrete_lp_lower(b, y), abs=1e-12)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 8), st.integers(0, 8), probs, probs, probs)
def test_complement_duality(r_a, r_d, pp, pm, b):
    t = sparse_regions(r_a, r_d, pp, pm)
    # the LP has slope up to 1/ratio, which amplifies one rounding per summed region
    finite = t.log_ratio[np.isfinite(t.log_ratio)]
    slope = math.exp(min(-finite.min(), 700.0)) if finite.size else 1.0
    tol = 1e-12 + 4e-16 * (len(t) + 1) * max(1.0, slope)
    assert discrete_lp_upper(t, b) == pytest.approx(1 - discrete_lp_lower(t, 1 - b), abs=tol)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 8), st.integers(0, 8), open_probs, open_probs, probs, probs)
def test_discrete_sandwich_and_delta_reduction(r_a, r_d, pp, pm, p, delta):
    t = sparse_regions(r_a, r_d, pp, pm)
    assert discrete_lp_lower(t, p) <= p + 1e-12
    assert discrete_lp_upper(t, p) >= p - 1e-12
    assert hier_discrete_lower(p, 0.0, t) == discrete_lp_lower(t, p)
    assert hier_discrete_upper(p, 0.0, t) == discrete_lp_upper(t, p)
    assert hier_discrete_upper(p, delta, t) >= delta
    assert hier_discrete_lower(p, delta, t) <= hier_discrete_upper(p, delta, t) + 1e-12


def test_discrete_lp_endpoints():
    t = sparse_regions(2, 3, 0.1, 0.4)
    assert discrete_lp_lower(t, 0.0) == 0.0
    assert discrete_lp_lower(t, 1.0) == pytest.approx(1.0, abs=1e-12)
    assert discrete_lp_upper(t, 1.0) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        discrete_lp_lower(t, 1.5)


def test_hier_discrete_clamps():
    t = sparse_regions(1, 1, 0.1, 0.4)
    assert hier_discrete_lower(0.2, 0.2, t) == 0.0
    assert hier_discrete_upper(0.85, 0.2, t) == 1.0
    assert hier_discrete_lower(0.9, 1.0, t) == 0.0
    assert hier_discrete_upper(0.0, 1.0, t) == 1.0


# --- ablation ----------------------------------------------------------------------

def test_ablation_examples():
    assert ablation_lower(0.9, 0.2) == pytest.approx(0.7, abs=1e-15)
    assert ablation_lower(0.2, 0.3) == 0.0
    assert ablation_upper(0.9, 0.2) == 1.0
    assert ablation_upper(0.05, 0.2) == pytest.approx(0.25, abs=1e-15)


@settings(max_examples=300, deadline=None)
@given(probs, probs)
def test_ablation_equals_single_region_pipeline(p, delta):
    t = ablation_regions()
    assert hier_discrete_lower(p, delta, t) == pytest.approx(ablation_lower(p, delta), abs=1e-12)
    assert hier_discrete_upper(p, delta, t) == pytest.approx(ablation_upper(p, delta), abs=1e-12)


# --- certify_ball ------------------------------------------------------------------

def test_certify_ball_examples():
    g = SmoothingConfig(Uniform(0.99), Gaussian(1.0))
    ok, eps = certify_ball(1.0, None, g, ContinuousL2(2, 5.0))
    assert ok and eps == math.inf

    a = SmoothingConfig(Uniform(0.8), Ablation())
    ok, eps = certify_ball(0.9, 0.05, a, ContinuousL2(1, 0.0))
    assert ok and eps is None
    lo, up, d = ball_bounds(0.9, 0.05, a, ContinuousL2(1, 0.0))
    assert (lo, up) == pytest.approx((0.7, 0.25), abs=1e-15)

    c = SmoothingConfig(Uniform(1.0), Gaussian(1.0))
    ok, eps = certify_ball(0.975, None, c, ContinuousL2(1, 1.9))
    assert ok and eps == pytest.approx(Q_975, abs=1e-12)
    assert not certify_ball(0.975, None, c, ContinuousL2(1, 1.97))[0]


def test_certify_ball_never_certifies_without_selection():
    for lower, threat in ((Gaussian(1.0), ContinuousL2(1, 0.0)),
                          (SparseFlip(0.1, 0.4), DiscreteFlip(1, 0, 0)),
                          (Ablation(), DiscreteFlip(1, 1, 1))):
        cfg = SmoothingConfig(Uniform(0.0), lower)
        assert not certify_ball(1.0, None, cfg, threat)[0]
        assert not certify_ball(1.0, 0.0, cfg, threat)[0]


def test_certify_ball_pairing_errors():
    with pytest.raises(IncompatibleThreatError):
        certify_ball(0.9, None, SmoothingConfig(Uniform(0.9), Gaussian(1.0)), DiscreteFlip(1, 1, 0))
    with pytest.raises(IncompatibleThreatError):
        certify_ball(0.9, None, SmoothingConfig(Uniform(0.9), SparseFlip(0.1, 0.4)),
                     ContinuousL2(1, 1.0))


def test_certify_ball_uses_per_row_worst_case():
    cfg = SmoothingConfig(PerRow((0.5, 0.9, 0.99)), Ablation())
    lo, _, d = ball_bounds(0.9, None, cfg, DiscreteFlip(2, 1, 1))
    assert d.delta == pytest.approx(0.55, abs=1e-15)
    assert lo == pytest.approx(0.35, abs=1e-15)


def test_region_table_from_masses_drops_empty_outcomes():
    t = RegionTable.from_log_masses([math.log(0.5), math.log(0.5), -math.inf],
                                    [math.log(0.5), -math.inf, math.log(0.5)])
    assert [r for r, _, _ in t.regions] == [math.inf, 0.0, -math.inf]
    t2 = RegionTable.from_log_masses([0.0, -math.inf], [0.0, -math.inf])
    assert len(t2) == 1
