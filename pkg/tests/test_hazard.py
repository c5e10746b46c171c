import dataclasses
import math

import numpy as np
import pytest

from ctsurv.data_model import (
    EVENT, INTERVAL_CENSORED, RIGHT_CENSORED, CalendarGrid, PiecewiseConstant, StudyData,
    Subject, ValidationError, VariantMix,
)
from ctsurv.hazard import HazardModel, LikelihoodWarning, ModelParameters, ThresholdConfig

import oracles
from helpers import random_params, random_setup, random_study


def one_site(n_variants=1, K_len=14, end=56):
    grid = CalendarGrid(0, end, K_len)
    mix = VariantMix.single(grid, 1) if n_variants == 1 else \
        VariantMix(grid, np.full((1, grid.n_days, n_variants), 1.0 / n_variants))
    return grid, mix


def params_for(grid, log_h=-3.0, log_r=None, gamma=0.0, alpha=None, beta=(), **kw):
    log_r = np.zeros((1, grid.K)) if log_r is None else np.atleast_2d(log_r)
    alpha = [0.0] if alpha is None else alpha
    gamma = [gamma] * len(alpha) if np.isscalar(gamma) else gamma
    return ModelParameters(np.array([log_h]), log_r, np.array(alpha, dtype=float),
                           np.array(gamma, dtype=float), np.array(beta, dtype=float), **kw)


class TestClosedForms:
    def test_constant_hazard_right_censored(self):
        grid, mix = one_site()
        hm = HazardModel(grid, mix)
        s = Subject("a", 0, 3, RIGHT_CENSORED, 40)
        p = params_for(grid, log_h=-3.0)
        assert hm.log_lik_subject(p, s) == pytest.approx(-37 * math.exp(-3.0), rel=1e-14)

    def test_event_uses_hazard_of_event_day(self):
        grid, mix = one_site()
        hm = HazardModel(grid, mix)
        log_r = np.array([[0.0, 1.0, 0.0, 0.0]])
        p = params_for(grid, log_h=-4.0, log_r=log_r)
        # event on day 15 falls in interval 2, i.e. (14, 28]
        s = Subject("a", 0, 10, EVENT, 15)
        H = 4 * math.exp(-4.0) + 1 * math.exp(-3.0)
        assert hm.log_lik_subject(p, s) == pytest.approx(-3.0 - H, rel=1e-14)
        # day 14 is still in interval 1
        s = Subject("a", 0, 10, EVENT, 14)
        assert hm.log_lik_subject(p, s) == pytest.approx(-4.0 - 4 * math.exp(-4.0), rel=1e-14)

    def test_interval_censored_unknown(self):
        grid, mix = one_site()
        hm = HazardModel(grid, mix)
        p = params_for(grid, log_h=-2.0)
        s = Subject("a", 0, 0, INTERVAL_CENSORED, 10, 20)
        h = math.exp(-2.0)
        expected = math.log(math.exp(-10 * h) - math.exp(-20 * h))
        assert hm.log_lik_subject(p, s) == pytest.approx(expected, rel=1e-13)

    def test_interval_known_equals_unknown_with_one_variant(self):
        grid, mix = one_site()
        p = params_for(grid, log_h=-2.5, log_r=[[0.0, 0.7, -0.4, 0.2]])
        s = Subject("a", 0, 2, INTERVAL_CENSORED, 9, 40, variant=0)
        known = HazardModel(grid, mix, variant_knowledge="known").log_lik_subject(p, s)
        unknown = HazardModel(grid, mix).log_lik_subject(p, s)
        assert known == pytest.approx(unknown, rel=1e-13)

    def test_known_variant_needs_label(self):
        grid, mix = one_site()
        hm = HazardModel(grid, mix, variant_knowledge="known")
        with pytest.raises(ValidationError):
            hm.log_lik_subject(params_for(grid), Subject("a", 0, 0, EVENT, 5))


class TestThreshold:
    def test_strict_comparison(self):
        grid, mix = one_site()
        hm = HazardModel(grid, mix, ThresholdConfig("fixed_llod", 1.0))
        p = params_for(grid, gamma=-1.0, gamma_T=np.array([-0.5]))
        at = Subject("a", 0, 0, RIGHT_CENSORED, 10, x_path=PiecewiseConstant.constant(1.0))
        above = Subject("b", 0, 0, RIGHT_CENSORED, 10, x_path=PiecewiseConstant.constant(1.0001))
        assert hm.linear_predictor(p, at, 0, 5) == 0.0
        assert hm.linear_predictor(p, above, 0, 5) == pytest.approx(-1.0001 - 0.5)

    def test_none_mode_is_linear_everywhere(self):
        grid, mix = one_site()
        hm = HazardModel(grid, mix)
        p = params_for(grid, gamma=-1.0)
        s = Subject("a", 0, 0, RIGHT_CENSORED, 10, x_path=PiecewiseConstant.constant(-3.0))
        assert hm.linear_predictor(p, s, 0, 5) == 3.0

    def test_estimate_mode_reads_parameter(self):
        grid, mix = one_site()
        hm = HazardModel(grid, mix, ThresholdConfig("estimate", 0.0, (0.0, 4.0)))
        p = params_for(grid, gamma=-1.0, gamma_T=np.array([0.0]), x_threshold=2.5)
        assert hm.tau(p) == 2.5

    @pytest.mark.parametrize("kw", [
        dict(mode="bogus"), dict(mode="fixed_llod"), dict(mode="estimate", x_llod=0.0),
        dict(mode="estimate", x_llod=0.0, bounds=(2.0, 1.0)),
    ])
    def test_config_errors(self, kw):
        with pytest.raises(ValidationError):
            ThresholdConfig(**kw)


class TestTrapezoid:
    def test_relation_to_exact(self):
        # trapezoid = exact + (h(start) - h(stop)) / 2 for the cumulative hazard
        hm, data, params = random_setup(5, n=40)
        trap = dataclasses.replace(hm, scheme="daily_trapezoid")
        for s in data.subjects:
            a, b = s.enroll_day, s.end_day
            ex = hm.cumulative_hazard(params, s, a, b)
            tr = trap.cumulative_hazard(params, s, a, b)
            corr = 0.5 * (hm.overall_hazard(params, s, a) - hm.overall_hazard(params, s, b))
            assert tr == pytest.approx(ex + corr, rel=1e-12)

    def test_needs_whole_days(self):
        hm, data, params = random_setup(1, scheme="daily_trapezoid", n=3)
        with pytest.raises(ValueError):
            hm.cumulative_hazard(params, data.subjects[0], 0.5, 3)


class TestOracle:
    @pytest.mark.parametrize("threshold", [
        ThresholdConfig(), ThresholdConfig("fixed_llod", 0.5),
        ThresholdConfig("estimate", 0.0, (0.0, 2.0)),
    ])
    @pytest.mark.parametrize("knowledge", ["known", "unknown"])
    def test_matches_quadrature(self, knowledge, threshold):
        hm, data, params = random_setup(11, knowledge, threshold=threshold, n=40, p=2)
        for s in data.subjects:
            got = hm.log_lik_subject(params, s)
            want = oracles.log_lik_subject(hm, params, s, knowledge)
            assert got == pytest.approx(want, rel=1e-6)

    def test_survivor_matches_quadrature(self):
        hm, data, params = random_setup(3, n=20)
        for s in data.subjects:
            t = s.end_day
            want = math.exp(-oracles.cumulative_hazard(hm, params, s, s.enroll_day, t))
            assert hm.survivor(params, s, t) == pytest.approx(want, rel=1e-9)


def test_total_warns_on_impossible_event():
    grid, mix = one_site(n_variants=2)
    props = np.array(mix.props)
    props[0, :, :] = [1.0, 0.0]
    mix = VariantMix(grid, props)
    hm = HazardModel(grid, mix, variant_knowledge="known")
    p = params_for(grid, alpha=[0.0, 0.5])
    data = StudyData((Subject("a", 0, 0, EVENT, 5, variant=1),), grid, ("GA",), ("v0", "v1"))
    with pytest.warns(LikelihoodWarning, match="a"):
        assert hm.log_lik_total(p, data) == -math.inf


def test_parameters_check_reference_interval():
    rng = np.random.default_rng(0)
    data, _ = random_study(rng, n=5, n_sites=2)
    params = random_params(rng, data.grid, 2, 2, 1, ref=[2, 3])
    params.check([2, 3])
    with pytest.raises(ValidationError):
        params.check([1, 1])
