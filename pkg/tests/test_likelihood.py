import copy
import math
import pickle

import numpy as np
import pytest

from ctsurv import kernels
from ctsurv.data_model import ValidationError
from ctsurv.hazard import ThresholdConfig
from ctsurv.likelihood import CompiledLikelihood, SurvivorTable

from helpers import random_setup

BACKENDS = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
THRESHOLDS = [ThresholdConfig(), ThresholdConfig("fixed_llod", 0.5),
              ThresholdConfig("estimate", 0.0, (0.0, 2.0))]


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("scheme", ["exact_piecewise", "daily_trapezoid"])
@pytest.mark.parametrize("knowledge", ["known", "unknown"])
@pytest.mark.parametrize("threshold", THRESHOLDS, ids=lambda t: t.mode)
def test_matches_reference(backend, scheme, knowledge, threshold):
    hm, data, params = random_setup(7, knowledge, scheme, threshold, n=60, n_variants=3, p=2)
    lik = CompiledLikelihood(hm, data, kernels.get_backend(backend))
    want = hm.log_lik_total(params, data)
    assert lik.log_likelihood(params) == pytest.approx(want, rel=1e-9)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("knowledge", ["known", "unknown"])
def test_subject_terms_match(backend, knowledge):
    hm, data, params = random_setup(8, knowledge, n=40)
    lik = CompiledLikelihood(hm, data, kernels.get_backend(backend))
    terms = lik.subject_terms(lik.log_baseline(params), lik.linear_predictor(params))
    want = [hm.log_lik_subject(params, s) for s in data.subjects]
    np.testing.assert_allclose(terms, want, rtol=1e-10)


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("knowledge", ["known", "unknown"])
def test_baseline_gradient_matches_finite_differences(backend, knowledge):
    hm, data, params = random_setup(9, knowledge, n=50, n_variants=2)
    lik = CompiledLikelihood(hm, data, kernels.get_backend(backend))
    _, g_lh, _ = lik.log_likelihood_grad(params)
    eps = 1e-6
    for s in range(params.log_r.shape[0]):
        for k in range(params.log_r.shape[1]):
            up, dn = copy.deepcopy(params), copy.deepcopy(params)
            up.log_r[s, k] += eps
            dn.log_r[s, k] -= eps
            fd = (lik.log_likelihood(up) - lik.log_likelihood(dn)) / (2 * eps)
            assert g_lh[s, k] == pytest.approx(fd, rel=1e-5, abs=1e-7)


def test_backends_agree_exactly_enough():
    if len(BACKENDS) < 2:
        pytest.skip("compiled backend not built")
    hm, data, params = random_setup(10, "known", n=80, n_variants=3)
    a = CompiledLikelihood(hm, data, kernels.get_backend("python")).log_likelihood_grad(params)
    b = CompiledLikelihood(hm, data, kernels.get_backend("cython")).log_likelihood_grad(params)
    assert a[0] == pytest.approx(b[0], rel=1e-12)
    np.testing.assert_allclose(a[1], b[1], rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(a[2], b[2], rtol=1e-10, atol=1e-14)


def test_pickle_round_trip():
    hm, data, params = random_setup(4, n=20)
    lik = CompiledLikelihood(hm, data)
    again = pickle.loads(pickle.dumps(lik))
    assert again.K is lik.K
    assert again.log_likelihood(params) == lik.log_likelihood(params)


def test_segments_are_deduplicated():
    hm, data, params = random_setup(2, n=60, n_variants=1, p=1)
    lik = CompiledLikelihood(hm, data)
    rows = np.column_stack([lik.seg_x, lik.seg_z])
    assert len(np.unique(rows, axis=0)) == len(rows)


@pytest.mark.parametrize("scheme", ["exact_piecewise", "daily_trapezoid"])
def test_survivor_table(scheme):
    hm, data, params = random_setup(6, scheme=scheme, n=20)
    offsets = [1, 5, 17]
    keep = [s for s in data.subjects if s.enroll_day + 17 <= hm.grid.end_day]
    data = data.replace_subjects(keep)
    table = SurvivorTable(hm, data, offsets)
    got = table.survivor(params)
    for i, s in enumerate(data.subjects):
        for j, d in enumerate(offsets):
            H = hm.cumulative_hazard(params, s, s.enroll_day, s.enroll_day + d)
            assert got[i, j] == pytest.approx(math.exp(-H), rel=1e-12)


def test_survivor_table_rejects_offsets_past_grid():
    hm, data, _ = random_setup(6, n=10)
    with pytest.raises(ValidationError):
        SurvivorTable(hm, data, [10_000])
