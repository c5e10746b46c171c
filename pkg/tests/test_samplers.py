import numpy as np
import pytest
from scipy import stats

from ctsurv.data_model import ValidationError
from ctsurv.inference.diagnostics import mcse_mean, mcse_sd
from ctsurv.inference.samplers import (
    DualAveraging, SamplerConfig, SamplerError, Target, _reflect, resolve_threads, run_chains,
    warmup_windows,
)


class Gaussian(Target):
    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=float)
        self.prec = np.linalg.inv(cov)
        self.dim = len(self.mean)
        self.names = [f"x{i}" for i in range(self.dim)]

    def log_density(self, u, x_threshold=None):
        d = u - self.mean
        return -0.5 * d @ self.prec @ d

    def log_density_grad(self, u, x_threshold=None):
        d = u - self.mean
        return -0.5 * d @ self.prec @ d, -self.prec @ d

    def initial_point(self, rng, jitter=0.5):
        return self.mean + rng.uniform(-2, 2, self.dim), None


class WithThreshold(Gaussian):
    """Standard normal in u and a step-shaped density for the bounded scalar."""

    threshold_bounds = (0.0, 1.0)

    def __init__(self):
        super().__init__([0.0], [[1.0]])
        self.names = ["x0", "x_threshold"]

    def _step(self, xt):
        return np.log(3.0) if xt > 0.5 else 0.0

    def log_density(self, u, x_threshold=None):
        return super().log_density(u) + self._step(x_threshold)

    def log_density_grad(self, u, x_threshold=None):
        lp, g = super().log_density_grad(u)
        return lp + self._step(x_threshold), g

    def initial_point(self, rng, jitter=0.5):
        return rng.normal(size=1), rng.uniform(*self.threshold_bounds)


class Broken(Gaussian):
    def log_density_grad(self, u, x_threshold=None):
        return -np.inf, np.zeros(self.dim)


COV = [[1.0, 0.8], [0.8, 2.0]]


@pytest.mark.parametrize("algorithm", ["hmc", "adaptive_rwm"])
def test_gaussian_moments(algorithm):
    target = Gaussian([1.0, -2.0], COV)
    n = 4000 if algorithm == "hmc" else 8000
    draws = run_chains(target, SamplerConfig(n_chains=4, n_iterations=n, seed=3,
                                             algorithm=algorithm))
    for i, name in enumerate(target.names):
        x = draws[name]
        assert abs(x.mean() - target.mean[i]) < 4 * mcse_mean(x)
        assert abs(x.std(ddof=1) - np.sqrt(COV[i][i])) < 4 * mcse_sd(x)
    corr = np.corrcoef(draws.flat().T)[0, 1]
    assert corr == pytest.approx(0.8 / np.sqrt(2.0), abs=0.05)


def test_rwm_acceptance_near_target():
    draws = run_chains(Gaussian([0.0] * 5, np.eye(5)),
                       SamplerConfig(n_chains=2, n_iterations=4000, algorithm="adaptive_rwm"))
    assert np.all(np.abs(draws.accept_rate - 0.234) < 0.08)


def test_hmc_acceptance_near_target():
    draws = run_chains(Gaussian([0.0] * 5, np.eye(5)), SamplerConfig(n_chains=2, n_iterations=2000))
    # the averaged step used after warmup is a little conservative
    assert np.all((draws.accept_rate > 0.7) & (draws.accept_rate < 0.98))
    assert draws.n_divergent.sum() == 0


def test_seed_reproducible_and_independent_of_workers():
    target = Gaussian([0.0, 0.0], COV)
    cfg = SamplerConfig(n_chains=2, n_iterations=200, seed=11)
    a = run_chains(target, cfg, threads=1)
    b = run_chains(target, cfg, threads=1)
    c = run_chains(target, cfg, threads=2)
    np.testing.assert_array_equal(a.draws, b.draws)
    np.testing.assert_array_equal(a.draws, c.draws)
    d = run_chains(target, SamplerConfig(n_chains=2, n_iterations=200, seed=12))
    assert not np.array_equal(a.draws, d.draws)


def test_chains_differ():
    draws = run_chains(Gaussian([0.0], [[1.0]]), SamplerConfig(n_chains=3, n_iterations=100))
    assert not np.array_equal(draws.draws[0], draws.draws[1])


def test_threshold_move():
    draws = run_chains(WithThreshold(), SamplerConfig(n_chains=4, n_iterations=4000, seed=5))
    xt = draws["x_threshold"].ravel()
    assert xt.min() >= 0.0 and xt.max() <= 1.0
    # density 1 on [0, 0.5], 3 on (0.5, 1]: P(X_T > 0.5) = 0.75
    assert np.mean(xt > 0.5) == pytest.approx(0.75, abs=0.03)
    assert np.all(draws.threshold_accept_rate > 0.2)
    assert stats.kstest(draws["x0"].ravel()[::10], "norm").pvalue > 1e-3


def test_initialization_failure():
    with pytest.raises(SamplerError):
        run_chains(Broken([0.0], [[1.0]]), SamplerConfig(n_chains=1, n_iterations=10))


@pytest.mark.parametrize("kw", [
    dict(algorithm="nuts"), dict(n_iterations=11), dict(n_iterations=0),
    dict(warmup_fraction=1.0), dict(n_chains=0), dict(target_accept=1.5),
    dict(threshold_proposal_width=-1.0),
])
def test_config_validation(kw):
    with pytest.raises(ValidationError):
        SamplerConfig(**kw)


def test_output_shape():
    cfg = SamplerConfig(n_chains=3, n_iterations=100, warmup_fraction=0.4)
    draws = run_chains(Gaussian([0.0, 0.0], COV), cfg)
    assert draws.draws.shape == (3, 60, 2)
    assert cfg.n_warmup == 40


def test_warmup_windows():
    init, ends = warmup_windows(1000)
    assert init == 75 and ends[-1] == 950
    assert np.all(np.diff([init] + ends) > 0)
    assert warmup_windows(10) == (10, [])
    init, ends = warmup_windows(100)
    assert ends[-1] == 90 and init == 15


def test_reflect():
    assert _reflect(1.2, 0.0, 1.0) == pytest.approx(0.8)
    assert _reflect(-0.3, 0.0, 1.0) == pytest.approx(0.3)
    assert _reflect(2.5, 0.0, 1.0) == pytest.approx(0.5)
    assert _reflect(0.4, 0.0, 1.0) == 0.4


def test_dual_averaging_converges():
    da = DualAveraging(1.0, 0.8)
    step = 1.0
    for _ in range(500):
        accept = np.exp(-step)  # acceptance falls with step size
        step = da.update(accept)
    assert da.final_step == pytest.approx(-np.log(0.8), rel=0.1)


def test_resolve_threads(monkeypatch):
    monkeypatch.setenv("CTSURV_THREADS", "3")
    assert resolve_threads(None) == 3
    assert resolve_threads(2) == 2
    monkeypatch.setenv("CTSURV_THREADS", "x")
    assert resolve_threads(None) == 1


def test_threshold_split_matches_grid_marginalization():
    """gamma by HMC plus X_T by reflected Metropolis against an exact 2-D grid."""
    from scipy.special import logsumexp

    from ctsurv.inference.model import SurvivalModel
    from ctsurv.simulation import PriorCell, SimConfig, TrialGenerator, build_cell_priors

    gen = TrialGenerator(SimConfig(biomarker={"low": 0.0, "high": 4.0, "gamma": -1.5}))
    data = gen.simulate(300, np.random.default_rng(12))
    priors = build_cell_priors(gen, data, PriorCell("informative", 0.25))
    truth = gen.true_parameters(priors.ref_interval)
    model = SurvivalModel(data, priors, gen.hazard_model(), fixed={
        "log_h_ref": truth.log_h_ref, "log_r": truth.log_r.ravel(), "beta": truth.beta,
        "gamma_T": [0.0]})
    assert model.names == ["gamma[all]", "x_threshold"]
    draws = run_chains(model, SamplerConfig(n_chains=4, n_iterations=3000, seed=13))

    # the likelihood is constant in X_T between consecutive distinct X values
    lo, hi = model.threshold_bounds
    xs = np.unique([s.x(s.enroll_day) for s in data.subjects])
    cuts = np.concatenate([[lo], xs[(xs > lo) & (xs < hi)], [hi]])
    mids, widths = 0.5 * (cuts[1:] + cuts[:-1]), np.diff(cuts)
    gammas = np.linspace(-4.0, 1.0, 400)
    logp = np.array([[model.log_density(np.array([g]), t) for t in mids] for g in gammas])
    logp += np.log(widths)[None, :]
    w = np.exp(logp - logsumexp(logp))
    want = {"gamma[all]": (w.sum(axis=1) @ gammas), "x_threshold": (w.sum(axis=0) @ mids)}
    for name, value in want.items():
        x = draws[name]
        assert abs(x.mean() - value) < 4 * mcse_mean(x), name
