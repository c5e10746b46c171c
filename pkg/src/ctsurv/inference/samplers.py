"""MCMC for the hazard model: HMC or adaptive random-walk Metropolis on the
continuous block, plus a reflected random-walk move for the threshold.

Any object with the attributes used by :class:`Target` can be sampled, which
is how the samplers are tested on simple densities.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

ALGORITHMS = ("hmc", "adaptive_rwm")
MAX_INIT_TRIES = 100


class SamplerError(RuntimeError):
    pass


class Target:
    """Interface expected by :func:`run_chains`.

    ``dim`` continuous coordinates; ``threshold_bounds`` is ``None`` unless a
    bounded scalar is updated by its own Metropolis move.
    """

    dim: int = 0
    names: list = []
    threshold_bounds: tuple[float, float] | None = None

    def log_density(self, u, x_threshold=None) -> float:
        raise NotImplementedError

    def log_density_grad(self, u, x_threshold=None):
        raise NotImplementedError

    def initial_point(self, rng, jitter=0.5):
        raise NotImplementedError

    def named_vector(self, u, x_threshold=None):
        return u if x_threshold is None else np.append(u, x_threshold)


@dataclass
class SamplerConfig:
    n_chains: int = 4
    n_iterations: int = 4000
    warmup_fraction: float = 0.5
    seed: int = 1
    algorithm: str = "hmc"
    target_accept: float = 0.8
    path_length: float = 2.0
    max_leapfrog: int = 128
    rwm_target_accept: float = 0.234
    threshold_proposal_width: float | None = None
    threshold_target_accept: float = 0.4
    threshold_moves: int = 3
    init_jitter: float = 0.5
    threads: int = 1

    def __post_init__(self):
        from ..data_model import ValidationError

        if self.algorithm not in ALGORITHMS:
            raise ValidationError(f"unknown sampler algorithm {self.algorithm!r}")
        if self.n_iterations <= 0 or self.n_iterations % 2:
            raise ValidationError("n_iterations must be a positive even number")
        if not 0 < self.warmup_fraction < 1:
            raise ValidationError("warmup_fraction must lie in (0, 1)")
        if self.n_chains < 1:
            raise ValidationError("need at least one chain")
        if not 0 < self.target_accept < 1:
            raise ValidationError("target_accept must lie in (0, 1)")
        if self.threshold_proposal_width is not None and self.threshold_proposal_width <= 0:
            raise ValidationError("threshold proposal width must be positive")

    @property
    def n_warmup(self) -> int:
        return int(round(self.n_iterations * self.warmup_fraction))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ChainResult:
    draws: np.ndarray  # (n_keep, n_names)
    accept_rate: float
    threshold_accept_rate: float | None
    n_divergent: int
    n_nonfinite: int
    step_size: float
    n_leapfrog: int


@dataclass
class PosteriorDraws:
    """Post-warmup draws, shape (chains, iterations, parameters)."""

    names: list
    draws: np.ndarray
    accept_rate: np.ndarray
    threshold_accept_rate: np.ndarray | None = None
    n_divergent: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    n_nonfinite: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    step_size: np.ndarray = field(default_factory=lambda: np.zeros(0))
    config: SamplerConfig | None = None

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_iterations(self) -> int:
        return self.draws.shape[1]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __getitem__(self, name: str) -> np.ndarray:
        """(chains, iterations) draws of one parameter."""
        return self.draws[:, :, self.index(name)]

    def flat(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[2])

    def rhat(self, name: str) -> float:
        from .diagnostics import split_rhat
        return split_rhat(self[name])

    def ess(self, name: str) -> float:
        from .diagnostics import ess
        return ess(self[name])


# ---------------------------------------------------------------------------
# Adaptation helpers
# ---------------------------------------------------------------------------


class DualAveraging:
    """Nesterov dual averaging of log step size toward a target acceptance."""

    def __init__(self, step: float, target: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.restart(step)

    def restart(self, step: float):
        self.mu = math.log(10 * step)
        self.hbar = 0.0
        self.log_step_bar = 0.0
        self.t = 0
        self.log_step = math.log(step)

    def update(self, accept: float) -> float:
        self.t += 1
        eta = 1.0 / (self.t + self.t0)
        self.hbar = (1 - eta) * self.hbar + eta * (self.target - accept)
        self.log_step = self.mu - math.sqrt(self.t) / self.gamma * self.hbar
        w = self.t ** -self.kappa
        self.log_step_bar = w * self.log_step + (1 - w) * self.log_step_bar
        return math.exp(self.log_step)

    @property
    def final_step(self) -> float:
        return math.exp(self.log_step_bar)


def warmup_windows(n_warmup: int, init_buffer=75, term_buffer=50, base_window=25):
    """Metric adaptation schedule: (initial buffer, window end iterations).

    Windows double in length; a final window too short to double is merged
    into its predecessor. Short warmups scale the buffers down.
    """
    if n_warmup < 20:
        return n_warmup, []
    if init_buffer + term_buffer + base_window > n_warmup:
        init_buffer = int(0.15 * n_warmup)
        term_buffer = int(0.1 * n_warmup)
        base_window = n_warmup - init_buffer - term_buffer
    ends = []
    start, size = init_buffer, base_window
    last = n_warmup - term_buffer
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        ends.append(end)
        start, size = end, 2 * size
    return init_buffer, ends


def _reflect(x: float, lo: float, hi: float) -> float:
    width = hi - lo
    y = (x - lo) % (2 * width)
    return lo + (y if y <= width else 2 * width - y)


# ---------------------------------------------------------------------------
# Single chain
# ---------------------------------------------------------------------------


def _initialize(target, rng, jitter):
    for _ in range(MAX_INIT_TRIES):
        u, xt = target.initial_point(rng, jitter)
        lp, grad = target.log_density_grad(u, xt)
        if math.isfinite(lp) and np.all(np.isfinite(grad)):
            return np.asarray(u, dtype=float), xt, lp, grad
    raise SamplerError(f"no finite log density after {MAX_INIT_TRIES} initialization attempts")


def _leapfrog(target, u, p, grad, step, n_steps, inv_metric, xt):
    u = u.copy()
    p = p + 0.5 * step * grad
    lp = -math.inf
    for i in range(n_steps):
        u += step * inv_metric * p
        # wild trial steps may overflow; non-finite results are rejected by the callers
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            lp, grad = target.log_density_grad(u, xt)
        if not math.isfinite(lp):
            return u, p, lp, grad
        if i < n_steps - 1:
            p += step * grad
    p += 0.5 * step * grad
    return u, p, lp, grad


def _find_step(target, u, lp, grad, inv_metric, xt, rng):
    """Stan's heuristic: double/halve until one-step acceptance crosses 0.5."""
    step = 0.1
    p = rng.normal(size=len(u)) / np.sqrt(inv_metric)
    h0 = lp - 0.5 * np.sum(inv_metric * p * p)

    def log_ratio(s):
        _, p1, lp1, _ = _leapfrog(target, u, p, grad, s, 1, inv_metric, xt)
        if not math.isfinite(lp1):
            return -math.inf
        return lp1 - 0.5 * np.sum(inv_metric * p1 * p1) - h0

    direction = 1 if log_ratio(step) > math.log(0.5) else -1
    for _ in range(50):
        step *= 2.0 ** direction
        r = log_ratio(step)
        if (direction == 1 and not r > math.log(0.5)) or (direction == -1 and r > math.log(0.5)):
            break
    return step


def run_chain(target, config: SamplerConfig, seed_seq) -> ChainResult:
    rng = np.random.default_rng(seed_seq)
    u, xt, lp, grad = _initialize(target, rng, config.init_jitter)
    d = len(u)
    n_warm = config.n_warmup
    n_total = config.n_iterations
    n_keep = n_total - n_warm
    bounds = getattr(target, "threshold_bounds", None)
    th_width = None
    if bounds is not None:
        th_width = config.threshold_proposal_width or 0.1 * (bounds[1] - bounds[0])
    th_accepts = 0
    th_tries = 0
    n_divergent = 0
    n_nonfinite = 0
    accepts = 0.0
    out = None

    hmc = config.algorithm == "hmc"
    inv_metric = np.ones(d)
    if hmc:
        init_buffer, windows = warmup_windows(n_warm)
        step = _find_step(target, u, lp, grad, inv_metric, xt, rng) if d else 1.0
        da = DualAveraging(step, config.target_accept)
        window_draws = []
    else:
        log_scale = math.log(2.38 ** 2 / max(d, 1))
        cov = np.eye(d) * 0.01
        chol = np.linalg.cholesky(cov) if d else np.zeros((0, 0))
        mean_acc = np.zeros(d)
        cov_acc = np.zeros((d, d))
        n_acc = 0
        adapt_start = max(1, n_warm // 10)
    n_leap = 1

    for it in range(n_total):
        warm = it < n_warm
        if d:
            if hmc:
                eps = step * rng.uniform(0.9, 1.1)
                n_leap = int(min(config.max_leapfrog, max(1, math.ceil(config.path_length / step))))
                p0 = rng.normal(size=d) / np.sqrt(inv_metric)
                h0 = lp - 0.5 * np.sum(inv_metric * p0 * p0)
                u1, p1, lp1, g1 = _leapfrog(target, u, p0, grad, eps, n_leap, inv_metric, xt)
                if math.isfinite(lp1) and np.all(np.isfinite(g1)):
                    h1 = lp1 - 0.5 * np.sum(inv_metric * p1 * p1)
                    log_a = h1 - h0
                    if log_a < -1000 and not warm:
                        n_divergent += 1
                    acc_prob = math.exp(min(0.0, log_a))
                else:
                    n_nonfinite += 1
                    acc_prob = 0.0
                if rng.random() < acc_prob:
                    u, lp, grad = u1, lp1, g1
                accepts += acc_prob if not warm else 0.0
                if warm:
                    step = da.update(acc_prob)
                    if it >= init_buffer and windows:
                        window_draws.append(u.copy())
                    if windows and it + 1 == windows[0]:
                        w = np.array(window_draws)
                        n = len(w)
                        var = w.var(axis=0, ddof=1) if n > 1 else np.ones(d)
                        inv_metric = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
                        window_draws = []
                        windows = windows[1:]
                        step = _find_step(target, u, lp, grad, inv_metric, xt, rng)
                        da.restart(step)
                    if it + 1 == n_warm:
                        step = da.final_step
            else:
                prop = u + math.exp(0.5 * log_scale) * (chol @ rng.normal(size=d))
                with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                    lp1 = target.log_density(prop, xt)
                if not math.isfinite(lp1):
                    if not (lp1 == -math.inf):
                        n_nonfinite += 1
                    acc_prob = 0.0
                else:
                    acc_prob = math.exp(min(0.0, lp1 - lp))
                if rng.random() < acc_prob:
                    u, lp = prop, lp1
                if warm:
                    log_scale += (acc_prob - config.rwm_target_accept) / (it + 1) ** 0.6
                    if it >= adapt_start:
                        n_acc += 1
                        delta = u - mean_acc
                        mean_acc += delta / n_acc
                        cov_acc += np.outer(delta, u - mean_acc)
                        if n_acc > 2 * d and n_acc % 10 == 0:
                            emp = cov_acc / (n_acc - 1) + 1e-8 * np.eye(d)
                            try:
                                chol = np.linalg.cholesky(emp)
                            except np.linalg.LinAlgError:
                                pass
                else:
                    accepts += acc_prob

        if bounds is not None:
            lo, hi = bounds
            moved = False
            for _ in range(config.threshold_moves):
                x1 = _reflect(xt + rng.uniform(-th_width, th_width), lo, hi)
                lp1 = target.log_density(u, x1)
                a = math.exp(min(0.0, lp1 - lp)) if math.isfinite(lp1) else 0.0
                if rng.random() < a:
                    xt, lp = x1, lp1
                    moved = True
                if warm:
                    th_width = min(hi - lo, th_width * math.exp(
                        (a - config.threshold_target_accept) / (it + 1) ** 0.6))
                else:
                    th_accepts += a
                    th_tries += 1
            if moved and hmc and d:
                lp, grad = target.log_density_grad(u, xt)

        if not warm:
            if out is None:
                out = np.empty((n_keep, len(target.named_vector(u, xt))))
            out[it - n_warm] = target.named_vector(u, xt)

    return ChainResult(
        draws=out if out is not None else np.zeros((0, d)),
        accept_rate=accepts / max(n_keep, 1),
        threshold_accept_rate=(th_accepts / th_tries) if th_tries else None,
        n_divergent=n_divergent, n_nonfinite=n_nonfinite,
        step_size=step if hmc else math.exp(0.5 * log_scale), n_leapfrog=n_leap)


# ---------------------------------------------------------------------------
# Multiple chains
# ---------------------------------------------------------------------------


def _chain_job(args):
    target, config, seq = args
    return run_chain(target, config, seq)


def resolve_threads(threads: int | None) -> int:
    if threads is None or threads <= 0:
        env = os.environ.get("CTSURV_THREADS", "")
        threads = int(env) if env.strip().isdigit() else 1
    return max(1, threads)


def run_chains(target, config: SamplerConfig, threads: int | None = None) -> PosteriorDraws:
    """Run ``config.n_chains`` independent chains and collect post-warmup draws.

    Chain ``c`` uses the ``c``-th child of ``SeedSequence(config.seed)``, so
    results do not depend on the number of worker processes.
    """
    seqs = np.random.SeedSequence(config.seed).spawn(config.n_chains)
    threads = min(resolve_threads(threads or config.threads), config.n_chains)
    jobs = [(target, config, s) for s in seqs]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_chain_job, jobs))
    else:
        results = [_chain_job(j) for j in jobs]
    names = list(getattr(target, "names", None) or
                 [f"theta[{i}]" for i in range(results[0].draws.shape[1])])
    th = [r.threshold_accept_rate for r in results]
    return PosteriorDraws(
        names=names,
        draws=np.stack([r.draws for r in results]),
        accept_rate=np.array([r.accept_rate for r in results]),
        threshold_accept_rate=None if th[0] is None else np.array(th),
        n_divergent=np.array([r.n_divergent for r in results]),
        n_nonfinite=np.array([r.n_nonfinite for r in results]),
        step_size=np.array([r.step_size for r in results]),
        config=config,
    )


def sample_posterior(model, config: SamplerConfig | None = None,
                     threads: int | None = None) -> PosteriorDraws:
    """Sample a :class:`~ctsurv.inference.model.SurvivalModel` posterior."""
    return run_chains(model, config or SamplerConfig(), threads)
