"""Synthetic vaccine trials and the bias/coverage replication study.

Subjects enroll on a random day of their arm's window at a random site and
are followed for 180 days with visits at days 0, 60, 120 and 180. Infection
times are drawn from the model hazard with a single circulating variant; a
random share of infections is only known up to the bracketing visits.

The true baseline hazard of a site is its epidemic curve, normalized to mean
1 over the calendar grid, averaged within each grid interval and multiplied
by a common scale calibrated to a target placebo attack rate.
"""

from __future__ import annotations

import datetime as dt
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np
import pandas as pd
from scipy.optimize import brentq

from .data_model import (
    EVENT, INTERVAL_CENSORED, RIGHT_CENSORED, CalendarGrid, EpidemicCurve, PiecewiseConstant,
    StudyData, Subject, ValidationError, VariantMix, load_epidemic_curve, parse_date, to_day,
)
from .hazard import HazardModel, ModelParameters, ThresholdConfig
from .inference.model import SurvivalModel
from .inference.samplers import SamplerConfig, SamplerError, resolve_threads, sample_posterior
from .priors import (
    DEFAULT_SIGMA_REF, build_priors, coefficient_priors, flat_prior, misspecified_prior,
)


def fixture_curve_path():
    """Path of the bundled synthetic epidemic curves."""
    return resources.files("ctsurv") / "data" / "fixture_curves.csv"


def load_fixture_curves(origin: dt.date) -> EpidemicCurve:
    return load_epidemic_curve(fixture_curve_path(), None, origin)


@dataclass
class PriorCell:
    """One prior specification of the replication study."""

    name: str
    sd: float
    kind: str = "informative"  # informative | misspecified | flat

    @property
    def misspecified(self) -> bool:
        return self.kind == "misspecified"


FLAT_MU_REF = -5.0

DEFAULT_PRIOR_CELLS = tuple(
    [PriorCell("informative", sd) for sd in (0.25, 1.0, 2.5, 5.0)]
    + [PriorCell("misspecified", sd, "misspecified") for sd in (0.25, 1.0, 2.5, 5.0)]
    + [PriorCell("flat", sd, "flat") for sd in (2.5, 5.0)]
)


@dataclass
class SimConfig:
    n_subjects: int = 500
    origin: str = "2021-01-01"
    vaccine_window: tuple[str, str] = ("2021-07-01", "2021-12-01")
    placebo_window: tuple[str, str] = ("2021-03-01", "2021-09-01")
    sites: tuple[str, ...] = ("GA", "NY", "WA")
    gamma: float = -1.0
    beta: float = -0.5
    visit_days: tuple[int, ...] = (0, 60, 120, 180)
    followup_days: int = 180
    interval_censor_fraction: float = 0.2
    interval_length: int = 14
    attack_rate: float = 0.30
    curve_path: str | None = None
    # biomarker mode: X ~ Uniform(low, high) with a protective threshold
    biomarker: dict | None = None
    # replication study
    sample_sizes: tuple[int, ...] = (500,)
    n_replications: int = 20
    prior_cells: tuple = DEFAULT_PRIOR_CELLS
    misspecified_map: dict = field(default_factory=lambda: {"GA": "PA", "NY": "MO", "WA": "OH"})
    misspecified_shift: int = 30
    coefficient_sd: float = 2.0
    sampler: dict = field(default_factory=lambda: {"n_chains": 2, "n_iterations": 1000})
    seed: int = 2021

    def __post_init__(self):
        if not 0 <= self.interval_censor_fraction <= 1:
            raise ValidationError("interval_censor_fraction must lie in [0, 1]")
        if not 0 < self.attack_rate < 1:
            raise ValidationError("attack_rate must lie in (0, 1)")
        if sorted(self.visit_days) != list(self.visit_days) or self.visit_days[0] != 0:
            raise ValidationError("visit days must be increasing and start at 0")
        if self.visit_days[-1] != self.followup_days:
            raise ValidationError("the last visit must close follow-up")
        self.prior_cells = tuple(c if isinstance(c, PriorCell) else PriorCell(**c)
                                 for c in self.prior_cells)
        self.vaccine_window = tuple(self.vaccine_window)
        self.placebo_window = tuple(self.placebo_window)
        self.sites = tuple(self.sites)
        self.visit_days = tuple(self.visit_days)
        self.sample_sizes = tuple(self.sample_sizes)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown simulation settings: {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["prior_cells"] = [asdict(c) for c in self.prior_cells]
        return out

    @property
    def origin_date(self) -> dt.date:
        return parse_date(self.origin)

    def windows(self) -> dict[int, tuple[int, int]]:
        o = self.origin_date
        return {arm: (to_day(parse_date(a), o), to_day(parse_date(b), o))
                for arm, (a, b) in ((1, self.vaccine_window), (0, self.placebo_window))}

    def grid(self) -> CalendarGrid:
        w = self.windows()
        start = min(a for a, _ in w.values())
        end = max(b for _, b in w.values()) + self.followup_days
        return CalendarGrid(start, end, self.interval_length)

    def sampler_config(self, seed: int) -> SamplerConfig:
        return SamplerConfig(**{**self.sampler, "seed": seed})


# ---------------------------------------------------------------------------
# Event times
# ---------------------------------------------------------------------------


def sample_event_time(hazard_path: PiecewiseConstant, t0: float, rng: np.random.Generator):
    """Draw an event time after ``t0`` by inverting the cumulative hazard.

    E ~ Exp(1) is matched against the piecewise-linear cumulative hazard from
    ``t0``; returns ``None`` when follow-up ends (last boundary) first.
    """
    b = hazard_path.boundaries
    v = hazard_path.values
    if not b[0] <= t0 <= b[-1]:
        raise ValueError("t0 outside the hazard path")
    e = rng.exponential()
    lo = np.maximum(b[:-1], t0)
    lengths = np.clip(b[1:] - lo, 0.0, None)
    cum = np.cumsum(lengths * v)
    j = int(np.searchsorted(cum, e, side="left"))
    if j >= len(v):
        return None
    before = cum[j - 1] if j else 0.0
    return float(lo[j] + (e - before) / v[j])


# ---------------------------------------------------------------------------
# Trials
# ---------------------------------------------------------------------------


class TrialGenerator:
    """Holds the calibrated truth for one :class:`SimConfig`."""

    def __init__(self, config: SimConfig, curve: EpidemicCurve | None = None):
        self.config = config
        origin = config.origin_date
        if curve is None:
            curve = load_epidemic_curve(config.curve_path, None, origin) if config.curve_path \
                else load_fixture_curves(origin)
        self.curve = curve
        self.grid = config.grid()
        g = self.grid
        day_k = g.day_intervals()[1:] - 1  # days start+1 .. end
        lengths = g.interval_lengths()
        shape = np.empty((len(config.sites), g.K))
        for s, site in enumerate(config.sites):
            mean, _, _ = curve[site].window(g.start_day + 1, g.end_day)
            shape[s] = np.bincount(day_k, weights=mean, minlength=g.K) / lengths
            shape[s] /= shape[s].mean()
        self.shape = shape
        self.daily_shape = shape[:, day_k]  # value for day start+1+j
        self.scale = self._calibrate()

    def _cum_shape(self, site: int, t0: np.ndarray, days: int) -> np.ndarray:
        cs = np.concatenate([[0.0], np.cumsum(self.daily_shape[site])])
        i0 = t0 - self.grid.start_day
        return cs[i0 + days] - cs[i0]

    def _calibrate(self) -> float:
        cfg = self.config
        a, b = self.windows[0]
        t0 = np.arange(a, b + 1)
        H = np.concatenate([self._cum_shape(s, t0, cfg.followup_days)
                            for s in range(len(cfg.sites))])
        z_mult = np.array([1.0, math.exp(cfg.beta)])

        def gap(scale):
            risk = 1 - np.exp(-scale * np.outer(H, z_mult))
            return risk.mean() - cfg.attack_rate

        return brentq(gap, 1e-9, 10.0, xtol=1e-14)

    @property
    def windows(self):
        return self.config.windows()

    @property
    def biomarker_threshold(self) -> float | None:
        bm = self.config.biomarker
        if not bm:
            return None
        return bm["low"] + bm.get("threshold_quantile", 0.3) * (bm["high"] - bm["low"])

    def log_baseline(self) -> np.ndarray:
        """True log baseline hazard per (site, interval)."""
        return np.log(self.scale * self.shape)

    def true_parameters(self, ref) -> ModelParameters:
        """Truth expressed relative to 1-based reference intervals ``ref``."""
        lb = self.log_baseline()
        ref = np.asarray(ref, dtype=int)
        log_h_ref = lb[np.arange(len(ref)), ref - 1]
        return ModelParameters(log_h_ref, lb - log_h_ref[:, None], [0.0], [self.config.gamma],
                               [self.config.beta])

    def predictor(self, x: float, z: float) -> float:
        cfg = self.config
        bm = cfg.biomarker
        if bm:
            tau = self.biomarker_threshold
            on = x > tau
            return (bm.get("gamma", cfg.gamma) * x + bm.get("gamma_T", 0.0)) * on + cfg.beta * z
        return cfg.gamma * x + cfg.beta * z

    def simulate(self, n: int, rng: np.random.Generator) -> StudyData:
        cfg = self.config
        g = self.grid
        windows = self.windows
        visits = np.asarray(cfg.visit_days)
        subjects = []
        for i in range(n):
            arm = int(rng.random() < 0.5)
            a, b = windows[arm]
            t0 = int(rng.integers(a, b + 1))
            site = int(rng.integers(len(cfg.sites)))
            z = float(rng.random() < 0.5)
            if cfg.biomarker:
                x = float(rng.uniform(cfg.biomarker["low"], cfg.biomarker["high"]))
            else:
                x = float(arm)
            end = t0 + cfg.followup_days
            i0 = t0 - g.start_day
            values = self.scale * self.daily_shape[site, i0:i0 + cfg.followup_days] \
                * math.exp(self.predictor(x, z))
            path = PiecewiseConstant(np.arange(t0, end + 1, dtype=float), values)
            t = sample_event_time(path, t0, rng)
            common = dict(id=f"sim{i:05d}", site=site, enroll_day=t0,
                          x_path=PiecewiseConstant.constant(x),
                          z_paths=(PiecewiseConstant.constant(z),))
            if t is None:
                subjects.append(Subject(status=RIGHT_CENSORED, time_lower=end, **common))
                continue
            day = min(max(math.ceil(t), t0 + 1), end)
            if rng.random() < cfg.interval_censor_fraction:
                rel = day - t0
                k = int(np.searchsorted(visits, rel, side="left"))
                subjects.append(Subject(status=INTERVAL_CENSORED, time_lower=t0 + int(visits[k - 1]),
                                        time_upper=t0 + int(visits[k]), **common))
            else:
                subjects.append(Subject(status=EVENT, time_lower=day, **common))
        return StudyData(tuple(subjects), g, cfg.sites, ("all",), ("z1",))

    def hazard_model(self) -> HazardModel:
        threshold = ThresholdConfig()
        bm = self.config.biomarker
        if bm:
            threshold = ThresholdConfig("estimate", bm["low"], self.threshold_bounds())
        return HazardModel(self.grid, VariantMix.single(self.grid, len(self.config.sites)),
                           threshold, "unknown", "exact_piecewise")

    def threshold_bounds(self) -> tuple[float, float]:
        bm = self.config.biomarker
        return tuple(bm.get("bounds", (bm["low"], 0.5 * (bm["low"] + bm["high"]))))


def simulate_trial(config: SimConfig, rng: np.random.Generator,
                   n_subjects: int | None = None) -> StudyData:
    return TrialGenerator(config).simulate(n_subjects or config.n_subjects, rng)


# ---------------------------------------------------------------------------
# Fitting and replication
# ---------------------------------------------------------------------------


def build_cell_priors(gen: TrialGenerator, data: StudyData, cell: PriorCell):
    cfg = gen.config
    mode = "estimate" if cfg.biomarker else "none"
    coef = coefficient_priors(1, data.n_covariates, cfg.coefficient_sd, mode)
    bounds = gen.threshold_bounds() if cfg.biomarker else None
    kw = dict(coefficients=coef, threshold_bounds=bounds, grid=gen.grid)
    if cell.kind == "informative":
        return build_priors(data, gen.curve, sd_override=cell.sd, **kw)
    if cell.kind == "misspecified":
        return misspecified_prior(data, gen.curve, cfg.misspecified_map, cfg.misspecified_shift,
                                  sd_override=cell.sd, **kw)
    if cell.kind == "flat":
        # reference intervals come from the data; h_ref is centred on a fixed low rate
        ref = build_priors(data, gen.curve, **kw)
        flat = flat_prior(gen.grid, data.n_sites, "zero", cell.sd, reference=ref)
        return flat.with_baseline(mu_ref=np.full(data.n_sites, FLAT_MU_REF),
                                  sigma_ref=np.full(data.n_sites, DEFAULT_SIGMA_REF))
    raise ValidationError(f"unknown prior kind {cell.kind!r}")


def fit_cell(gen: TrialGenerator, data: StudyData, cell: PriorCell, seed: int):
    priors = build_cell_priors(gen, data, cell)
    model = SurvivalModel(data, priors, gen.hazard_model())
    return model, sample_posterior(model, gen.config.sampler_config(seed), threads=1)


def _truth(gen: TrialGenerator) -> dict:
    cfg = gen.config
    out = {"gamma[all]": cfg.biomarker.get("gamma", cfg.gamma) if cfg.biomarker else cfg.gamma,
           "beta[z1]": cfg.beta}
    if cfg.biomarker:
        out["x_threshold"] = gen.biomarker_threshold
    return out


def _replicate_one(args):
    config, n, rep = args
    gen = TrialGenerator(config)
    seq = np.random.SeedSequence([config.seed, n, rep])
    data_seq, fit_seq = seq.spawn(2)
    data = gen.simulate(n, np.random.default_rng(data_seq))
    fit_seed = int(fit_seq.generate_state(1)[0])
    truth = _truth(gen)
    records = []
    for cell in config.prior_cells:
        base = dict(N=n, rep=rep, prior=cell.name, prior_sd=cell.sd,
                    misspecified=cell.misspecified)
        try:
            _, draws = fit_cell(gen, data, cell, fit_seed)
        except (SamplerError, FloatingPointError, np.linalg.LinAlgError) as exc:
            for param in truth:
                records.append({**base, "param": param, "failed": True, "error": str(exc)})
            continue
        for param, true in truth.items():
            x = draws[param]
            lo, hi = np.percentile(x, [2.5, 97.5])
            records.append({**base, "param": param, "failed": False, "truth": true,
                            "post_mean": float(x.mean()), "q2.5": lo, "q97.5": hi,
                            "covers": bool(lo <= true <= hi), "rhat": draws.rhat(param)})
    return records


def run_replication_study(config: SimConfig, threads: int | None = None,
                          progress=None) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Fit every (sample size, replication, prior cell); returns (cells, fits).

    Each replication's dataset is shared by all prior cells, and so is the
    sampler seed, so cells differ only through the prior.
    """
    jobs = [(config, n, r) for n in config.sample_sizes for r in range(config.n_replications)]
    threads = resolve_threads(threads)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_replicate_one, jobs))
    else:
        results = []
        for j in jobs:
            results.append(_replicate_one(j))
            if progress:
                progress(len(results), len(jobs))
    fits = pd.DataFrame([rec for recs in results for rec in recs])
    return summarize_cells(fits), fits


CELL_COLUMNS = ["N", "prior", "prior_sd", "misspecified", "param", "bias", "coverage",
                "n_reps", "n_failures"]


def summarize_cells(fits: pd.DataFrame) -> pd.DataFrame:
    rows = []
    keys = ["N", "prior", "prior_sd", "misspecified", "param"]
    for key, grp in fits.groupby(keys, sort=False):
        ok = grp[~grp["failed"]]
        rows.append(dict(zip(keys, key),
                         bias=float((ok["post_mean"] - ok["truth"]).mean()) if len(ok) else np.nan,
                         coverage=float(ok["covers"].mean()) if len(ok) else np.nan,
                         n_reps=len(grp), n_failures=int(grp["failed"].sum())))
    return pd.DataFrame(rows, columns=CELL_COLUMNS)
