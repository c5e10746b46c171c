"""Random cohorts and parameters shared by the test modules."""

import numpy as np

from ctsurv.data_model import (
    EVENT, INTERVAL_CENSORED, RIGHT_CENSORED, CalendarGrid, PiecewiseConstant, StudyData,
    Subject, VariantMix,
)
from ctsurv.hazard import HazardModel, ModelParameters, ThresholdConfig


def random_mix(rng, grid, n_sites, n_variants):
    if n_variants == 1:
        return VariantMix.single(grid, n_sites)
    days = np.arange(grid.n_days)
    props = np.empty((n_sites, grid.n_days, n_variants))
    for s in range(n_sites):
        logits = np.stack([np.zeros(grid.n_days)] + [
            (days - rng.uniform(0, grid.n_days)) / rng.uniform(10, 40)
            for _ in range(n_variants - 1)], axis=1)
        # hold proportions fixed over weekly blocks so runs of equal rows exist
        logits = logits[(days // 7) * 7]
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        props[s] = e / e.sum(axis=1, keepdims=True)
    return VariantMix(grid, props)


def random_path(rng, lo, hi, values=(0.0, 1.0, 2.5)):
    if rng.random() < 0.6:
        return PiecewiseConstant.constant(float(rng.choice(values)))
    knot = int(rng.integers(lo + 1, hi))
    return PiecewiseConstant(np.array([-np.inf, knot, np.inf]),
                             np.array(rng.choice(values, 2), dtype=float))


def random_study(rng, n=30, n_sites=2, n_variants=2, p=1, grid=None, ic_fraction=0.3):
    grid = grid or CalendarGrid(0, 120, 14)
    subjects = []
    for i in range(n):
        t0 = int(rng.integers(grid.start_day, grid.end_day - 20))
        end = int(rng.integers(t0 + 2, grid.end_day + 1))
        u = rng.random()
        variant = int(rng.integers(n_variants))
        if u < ic_fraction:
            L = int(rng.integers(t0, end - 1))
            kw = dict(status=INTERVAL_CENSORED, time_lower=L, time_upper=end, variant=variant)
        elif u < 0.65:
            kw = dict(status=EVENT, time_lower=end, variant=variant)
        else:
            kw = dict(status=RIGHT_CENSORED, time_lower=end)
        subjects.append(Subject(
            id=f"s{i:03d}", site=int(rng.integers(n_sites)), enroll_day=t0,
            x_path=random_path(rng, t0, end),
            z_paths=tuple(random_path(rng, t0, end, (0.0, 1.0)) for _ in range(p)), **kw))
    data = StudyData(tuple(subjects), grid, tuple(f"site{s}" for s in range(n_sites)),
                     tuple(f"v{v}" for v in range(n_variants)),
                     tuple(f"z{j + 1}" for j in range(p)))
    return data, random_mix(rng, grid, n_sites, n_variants)


def random_params(rng, grid, n_sites, n_variants, p, ref=None, threshold=None):
    K = grid.K
    ref = ref or [1] * n_sites
    log_r = rng.normal(0, 0.5, (n_sites, K))
    for s, k in enumerate(ref):
        log_r[s, k - 1] = 0.0
    alpha = rng.normal(0, 0.3, n_variants)
    alpha[0] = 0.0
    kw = {}
    if threshold is not None and threshold.active:
        kw["gamma_T"] = rng.normal(0, 0.5, n_variants)
        if threshold.mode == "estimate":
            kw["x_threshold"] = float(rng.uniform(*threshold.bounds))
    return ModelParameters(
        log_h_ref=rng.normal(-4, 0.5, n_sites), log_r=log_r, alpha=alpha,
        gamma=-np.abs(rng.normal(0, 0.5, n_variants)), beta=rng.normal(0, 0.5, p), **kw)


def random_setup(seed, knowledge="unknown", scheme="exact_piecewise", threshold=None,
                 n=30, n_sites=2, n_variants=2, p=1):
    rng = np.random.default_rng(seed)
    data, mix = random_study(rng, n, n_sites, n_variants, p)
    threshold = threshold or ThresholdConfig()
    hm = HazardModel(data.grid, mix, threshold, knowledge, scheme)
    params = random_params(rng, data.grid, n_sites, n_variants, p, threshold=threshold)
    return hm, data, params
