"""Property-based checks of invariants that hold for any cohort or parameter point."""

import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from ctsurv.data_model import EVENT, INTERVAL_CENSORED
from ctsurv.inference.diagnostics import ess, split_rhat
from ctsurv.inference.samplers import _reflect
from ctsurv.likelihood import CompiledLikelihood, SurvivorTable
from ctsurv.priors import build_priors
from ctsurv.simulation import SimConfig, TrialGenerator

from helpers import random_setup

PROPS = settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
seeds = st.integers(0, 2**31 - 1)


def subjects_with(data, status):
    return [s for s in data.subjects if s.status == status]


@PROPS
@given(seed=seeds, data=st.data())
def test_survivor_is_monotone_and_in_unit_interval(seed, data):
    hm, study, params = random_setup(seed, n=6)
    subject = data.draw(st.sampled_from(study.subjects))
    days = sorted(data.draw(st.lists(
        st.floats(subject.enroll_day, study.grid.end_day, allow_nan=False), min_size=2,
        max_size=6)))
    surv = [hm.survivor(params, subject, t) for t in days]
    assert all(0.0 < s <= 1.0 for s in surv)
    assert all(b <= a for a, b in zip(surv, surv[1:]))


@PROPS
@given(seed=seeds)
def test_unknown_variant_density_is_sum_over_variants(seed):
    hm, study, params = random_setup(seed, n=12, n_variants=3)
    for s in subjects_with(study, EVENT) + subjects_with(study, INTERVAL_CENSORED):
        unknown = math.exp(hm.log_lik_subject(params, s, "unknown"))
        known = math.fsum(math.exp(hm.log_lik_subject(params, replace(s, variant=v), "known"))
                          for v in range(3))
        assert known == pytest.approx(unknown, rel=1e-10)


@PROPS
@given(seed=seeds)
def test_interval_censored_bounded_by_survival_to_lower(seed):
    hm, study, params = random_setup(seed, n=12)
    for s in subjects_with(study, INTERVAL_CENSORED):
        log_s_lower = -hm.cumulative_hazard(params, s, s.enroll_day, s.time_lower)
        assert hm.log_lik_subject(params, s) <= log_s_lower + 1e-12


@PROPS
@given(seed=seeds, data=st.data())
def test_trapezoid_differs_from_exact_by_endpoint_correction(seed, data):
    hm, study, params = random_setup(seed, n=6)
    s = data.draw(st.sampled_from(study.subjects))
    a = data.draw(st.integers(s.enroll_day, study.grid.end_day))
    b = data.draw(st.integers(a, study.grid.end_day))
    exact = hm.cumulative_hazard(params, s, a, b, scheme="exact_piecewise")
    trap = hm.cumulative_hazard(params, s, a, b, scheme="daily_trapezoid")
    corr = 0.0 if a == b else 0.5 * (hm.overall_hazard(params, s, a)
                                     - hm.overall_hazard(params, s, b))
    assert trap == pytest.approx(exact + corr, rel=1e-12, abs=1e-15)


@PROPS
@given(seed=seeds, perm_seed=seeds,
       knowledge=st.sampled_from(["known", "unknown"]),
       scheme=st.sampled_from(["exact_piecewise", "daily_trapezoid"]))
def test_total_likelihood_ignores_subject_order(seed, perm_seed, knowledge, scheme):
    hm, study, params = random_setup(seed, knowledge, scheme, n=25)
    order = np.random.default_rng(perm_seed).permutation(len(study))
    shuffled = study.replace_subjects([study.subjects[i] for i in order])
    a = CompiledLikelihood(hm, study).log_likelihood(params)
    b = CompiledLikelihood(hm, shuffled).log_likelihood(params)
    assert b == pytest.approx(a, rel=1e-12)


@PROPS
@given(seed=seeds)
def test_survivor_table_matches_pointwise_survivor(seed):
    hm, study, params = random_setup(seed, n=8)
    offsets = [1, 5, 12]
    keep = [s for s in study.subjects if s.enroll_day + 12 <= study.grid.end_day]
    if not keep:
        return
    study = study.replace_subjects(keep)
    table = SurvivorTable(hm, study, offsets).survivor(params)
    want = [[hm.survivor(params, s, s.enroll_day + d) for d in offsets] for s in keep]
    np.testing.assert_allclose(table, want, rtol=1e-12)
    assert np.all(np.diff(table, axis=1) <= 0)


@pytest.fixture(scope="module")
def prior_inputs():
    gen = TrialGenerator(SimConfig())
    return gen, gen.simulate(200, np.random.default_rng(11))


@settings(max_examples=25, deadline=None)
@given(log_factor=st.floats(-20, 20))
def test_prior_means_ignore_curve_scale(prior_inputs, log_factor):
    gen, study = prior_inputs
    base = build_priors(study, gen.curve, gen.grid)
    scaled = build_priors(study, gen.curve.scaled(math.exp(log_factor)), gen.grid)
    np.testing.assert_allclose(scaled.mu_r, base.mu_r, atol=1e-12)
    np.testing.assert_allclose(scaled.sigma_r, base.sigma_r, atol=1e-12)
    np.testing.assert_array_equal(scaled.ref_interval, base.ref_interval)


@given(x=st.floats(-1e6, 1e6), lo=st.floats(-100, 100), width=st.floats(1e-3, 100))
def test_reflection_stays_in_bounds(x, lo, width):
    hi = lo + width
    y = _reflect(x, lo, hi)
    assert lo - 1e-9 <= y <= hi + 1e-9
    if lo <= x <= hi:
        assert y == pytest.approx(x, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=seeds, power=st.integers(-20, 20), sign=st.sampled_from([-1.0, 1.0]),
       shift=st.floats(-1e3, 1e3))
def test_rhat_and_ess_ignore_affine_maps(seed, power, sign, shift):
    x = np.random.default_rng(seed).normal(size=(4, 200))
    x[1] += 0.3
    # power-of-two scaling and negation leave the ranks unchanged
    y = sign * 2.0 ** power * x
    assert split_rhat(y) == pytest.approx(split_rhat(x), rel=1e-12)
    assert ess(y) == pytest.approx(ess(x), rel=1e-12)
    # a shift can split the exact tie of the two folded values around the median
    z = x + shift
    assert split_rhat(z) == pytest.approx(split_rhat(x), rel=1e-3)
    assert ess(z) == pytest.approx(ess(x), rel=1e-2)
