"""Prior construction for the baseline hazard and regression coefficients.

The baseline hazard of site ``s`` on interval ``k`` is ``h_ref[s] * r[s, k]``
with ``r`` fixed to 1 on a reference interval. Priors on ``log r`` come from
an epidemic curve (relative infection counts per interval); the prior on
``log h_ref`` is centred on the observed infection rate in the reference
interval.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data_model import (
    EVENT, INTERVAL_CENSORED, CalendarGrid, EpidemicCurve, StudyData, ValidationError,
    interval_index,
)

Z95 = 1.96
DEFAULT_SIGMA_REF = 5.0
SD_LADDER = (0.25, 1.0, 2.5, 5.0)
# wrong-site substitution used by the misspecified-prior experiments
MISSPECIFIED_MAP = {"GA": "PA", "NY": "MO", "WA": "OH"}
TRUNCATIONS = ("none", "upper_zero")


class PriorWarning(UserWarning):
    pass


@dataclass(frozen=True)
class NormalPrior:
    mean: float
    sd: float
    truncation: str = "none"

    def __post_init__(self):
        if not (self.sd > 0 and math.isfinite(self.sd)):
            raise ValidationError(f"prior sd must be positive, got {self.sd}")
        if self.truncation not in TRUNCATIONS:
            raise ValidationError(f"unknown truncation {self.truncation!r}")

    def to_json(self) -> dict:
        out = {"mean": self.mean, "sd": self.sd}
        if self.truncation != "none":
            out["truncation"] = self.truncation
        return out

    @classmethod
    def from_json(cls, d: dict) -> "NormalPrior":
        return cls(float(d["mean"]), float(d["sd"]), d.get("truncation", "none"))


@dataclass(frozen=True, eq=False)
class PriorSpec:
    """Priors for every model parameter.

    Baseline arrays are indexed by site (and interval, 0-based columns);
    ``ref_interval`` holds 1-based interval indices. ``alpha[0]`` is ``None``
    because the reference variant has no free effect.
    """

    ref_interval: np.ndarray
    mu_ref: np.ndarray
    sigma_ref: np.ndarray
    mu_r: np.ndarray
    sigma_r: np.ndarray
    alpha: tuple = (None,)
    gamma: tuple = (NormalPrior(0.0, 2.0),)
    gamma_T: tuple = ()
    beta: tuple = ()
    threshold_bounds: tuple[float, float] | None = None
    site_labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        ref = np.asarray(self.ref_interval, dtype=int).reshape(-1)
        mu_r = np.array(self.mu_r, dtype=float, ndmin=2)
        sigma_r = np.array(self.sigma_r, dtype=float, ndmin=2)
        object.__setattr__(self, "ref_interval", ref)
        object.__setattr__(self, "mu_ref", np.asarray(self.mu_ref, dtype=float).reshape(-1))
        object.__setattr__(self, "sigma_ref", np.asarray(self.sigma_ref, dtype=float).reshape(-1))
        S, K = mu_r.shape
        for s, k in enumerate(ref):
            if not 1 <= k <= K:
                raise ValidationError(f"reference interval {k} out of range 1..{K}")
            mu_r[s, k - 1] = 0.0
        object.__setattr__(self, "mu_r", mu_r)
        object.__setattr__(self, "sigma_r", sigma_r)
        if sigma_r.shape != (S, K) or len(ref) != S or len(self.mu_ref) != S \
                or len(self.sigma_ref) != S:
            raise ValidationError("baseline prior arrays disagree on the number of sites")
        free = np.ones((S, K), dtype=bool)
        free[np.arange(S), ref - 1] = False
        if np.any(~(sigma_r[free] > 0)) or np.any(~(self.sigma_ref > 0)):
            raise ValidationError("all prior sds must be positive")
        if not np.all(np.isfinite(mu_r)) or not np.all(np.isfinite(self.mu_ref)):
            raise ValidationError("prior means must be finite")
        if self.alpha and self.alpha[0] is not None:
            raise ValidationError("the reference variant has no alpha prior")
        if len(self.alpha) != len(self.gamma):
            raise ValidationError("alpha and gamma priors need one entry per variant")
        if self.gamma_T and len(self.gamma_T) != len(self.gamma):
            raise ValidationError("gamma_T priors need one entry per variant")
        if self.threshold_bounds is not None:
            lo, hi = self.threshold_bounds
            if not lo < hi:
                raise ValidationError("threshold prior bounds need lower < upper")
        if any(p is None for p in self.alpha[1:]):
            raise ValidationError("missing alpha prior for a non-reference variant")

    @property
    def n_sites(self) -> int:
        return len(self.ref_interval)

    @property
    def K(self) -> int:
        return self.mu_r.shape[1]

    @property
    def n_variants(self) -> int:
        return len(self.gamma)

    def with_baseline(self, **kw) -> "PriorSpec":
        return replace(self, **kw)

    # -- json ----------------------------------------------------------------

    def to_json(self) -> dict:
        labels = self.site_labels or tuple(str(s) for s in range(self.n_sites))
        return {
            "sites": [
                {"site": labels[s], "ref_interval": int(self.ref_interval[s]),
                 "mu_ref": float(self.mu_ref[s]), "sigma_ref": float(self.sigma_ref[s]),
                 "mu_r": [float(v) for v in self.mu_r[s]],
                 "sigma_r": [float(v) for v in self.sigma_r[s]]}
                for s in range(self.n_sites)],
            "alpha": [None if p is None else p.to_json() for p in self.alpha],
            "gamma": [p.to_json() for p in self.gamma],
            "gamma_T": [p.to_json() for p in self.gamma_T],
            "beta": [p.to_json() for p in self.beta],
            "threshold": None if self.threshold_bounds is None else
            {"lower": self.threshold_bounds[0], "upper": self.threshold_bounds[1]},
        }

    @classmethod
    def from_json(cls, d: dict) -> "PriorSpec":
        try:
            sites = d["sites"]
            th = d.get("threshold")
            return cls(
                ref_interval=[s["ref_interval"] for s in sites],
                mu_ref=[s["mu_ref"] for s in sites],
                sigma_ref=[s["sigma_ref"] for s in sites],
                mu_r=[s["mu_r"] for s in sites],
                sigma_r=[s["sigma_r"] for s in sites],
                alpha=tuple(None if p is None else NormalPrior.from_json(p) for p in d["alpha"]),
                gamma=tuple(NormalPrior.from_json(p) for p in d["gamma"]),
                gamma_T=tuple(NormalPrior.from_json(p) for p in d.get("gamma_T", [])),
                beta=tuple(NormalPrior.from_json(p) for p in d.get("beta", [])),
                threshold_bounds=None if th is None else (float(th["lower"]), float(th["upper"])),
                site_labels=tuple(s["site"] for s in sites),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed priors file: {exc}") from None


def write_priors(priors: PriorSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(priors.to_json(), indent=2) + "\n")


def read_priors(path: str | Path) -> PriorSpec:
    try:
        return PriorSpec.from_json(json.loads(Path(path).read_text()))
    except FileNotFoundError:
        raise ValidationError(f"priors file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None


# ---------------------------------------------------------------------------
# Coefficient priors
# ---------------------------------------------------------------------------


def coefficient_priors(n_variants: int, n_covariates: int, scale: float = 2.0,
                       threshold_mode: str = "none", gamma_truncation: str = "none",
                       alpha_prior: NormalPrior = NormalPrior(math.log(2.0), 0.2)) -> dict:
    """Default priors for alpha, gamma, gamma_T and beta.

    ``scale`` is the sd of the zero-mean normal priors: 2 when an effect is
    expected to exceed 0.1 in absolute value, 0.5 otherwise.
    """
    coef = NormalPrior(0.0, scale)
    out = {
        "alpha": (None,) + (alpha_prior,) * (n_variants - 1),
        "gamma": (NormalPrior(0.0, scale, gamma_truncation),) * n_variants,
        "beta": (coef,) * n_covariates,
        "gamma_T": (coef,) * n_variants if threshold_mode != "none" else (),
    }
    return out


# ---------------------------------------------------------------------------
# Data summaries
# ---------------------------------------------------------------------------


def _event_time(subject) -> float | None:
    if subject.status == EVENT:
        return float(subject.time_lower)
    if subject.status == INTERVAL_CENSORED:
        return 0.5 * (subject.time_lower + subject.time_upper)
    return None


def interval_event_counts(data: StudyData, grid: CalendarGrid | None = None) -> np.ndarray:
    """Observed infections per (site, interval).

    Interval-censored infections count in the interval containing (L + R) / 2.
    """
    grid = grid or data.grid
    counts = np.zeros((data.n_sites, grid.K))
    for s in data.subjects:
        t = _event_time(s)
        if t is not None:
            counts[s.site, interval_index(grid, t) - 1] += 1
    return counts


def interval_person_days(data: StudyData, grid: CalendarGrid | None = None) -> np.ndarray:
    """Person-days at risk per (site, interval).

    Follow-up runs from enrollment to the event, censoring or, for
    interval-censored subjects, the midpoint of the censoring interval.
    """
    grid = grid or data.grid
    b = np.asarray(grid.boundaries, dtype=float)
    out = np.zeros((data.n_sites, grid.K))
    for s in data.subjects:
        t = _event_time(s)
        stop = float(s.time_lower) if t is None else t
        overlap = np.minimum(stop, b[1:]) - np.maximum(float(s.enroll_day), b[:-1])
        out[s.site] += np.clip(overlap, 0.0, None)
    return out


def select_reference_interval(data: StudyData, grid: CalendarGrid | None = None) -> np.ndarray:
    """1-based interval with the most observed infections at each site.

    Ties go to the earliest interval. A site with no infections falls back to
    the interval with the most person-days (with a warning).
    """
    grid = grid or data.grid
    counts = interval_event_counts(data, grid)
    pdays = None
    ref = np.empty(data.n_sites, dtype=int)
    for s in range(data.n_sites):
        if counts[s].max() > 0:
            ref[s] = int(np.argmax(counts[s])) + 1
            continue
        if pdays is None:
            pdays = interval_person_days(data, grid)
        if pdays[s].max() <= 0:
            raise ValidationError(f"site {data.site_labels[s]}: no follow-up in any interval")
        ref[s] = int(np.argmax(pdays[s])) + 1
        warnings.warn(f"site {data.site_labels[s]}: no observed infections; reference interval "
                      f"{ref[s]} chosen by person-days", PriorWarning, stacklevel=2)
    return ref


def reference_rate_prior(data: StudyData, ref, sigma_ref: float = DEFAULT_SIGMA_REF,
                         grid: CalendarGrid | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Prior mean log(events / person-days) in the reference interval, per site.

    Zero events use 0.5 in place of the count.
    """
    grid = grid or data.grid
    ref = np.asarray(ref, dtype=int)
    counts = interval_event_counts(data, grid)
    pdays = interval_person_days(data, grid)
    mu = np.empty(data.n_sites)
    for s in range(data.n_sites):
        k = ref[s] - 1
        if pdays[s, k] <= 0:
            raise ValidationError(
                f"site {data.site_labels[s]}: no person-time in reference interval {ref[s]}")
        mu[s] = math.log(max(counts[s, k], 0.5) / pdays[s, k])
    return mu, np.full(data.n_sites, float(sigma_ref))


# ---------------------------------------------------------------------------
# Curve-based priors
# ---------------------------------------------------------------------------


def interval_curve_totals(curve: EpidemicCurve, grid: CalendarGrid, site: str,
                          day_shift: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-day mean of the curve's mean/lower/upper over each interval.

    Interval k covers days t_{k-1}+1 .. t_k. Values are read ``day_shift``
    days earlier.
    """
    b = grid.boundaries
    m, lo, hi = curve[site].window(b[0] + 1, b[-1], day_shift)
    out = np.empty((3, grid.K))
    for k in range(grid.K):
        sl = slice(b[k] - b[0], b[k + 1] - b[0])
        n = b[k + 1] - b[k]
        out[:, k] = m[sl].sum() / n, lo[sl].sum() / n, hi[sl].sum() / n
    return out[0], out[1], out[2]


def curve_to_relative_prior(curve: EpidemicCurve, grid: CalendarGrid, ref, sites,
                            sd_scale: float = 1.0, sd_override: float | None = None,
                            curve_map: dict | None = None,
                            day_shift: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """(mu_r, sigma_r), each (sites, K), from the epidemic curve.

    ``mu_r[k] = log(C_k / C_ref)`` with C the interval's average daily mean.
    ``sigma_r`` combines the log-scale widths of interval k and the reference
    interval, times ``sd_scale``; ``sd_override`` replaces it by a constant.
    ``curve_map`` substitutes another site's curve (for misspecification
    experiments) and ``day_shift`` reads the curve that many days earlier.
    """
    ref = np.asarray(ref, dtype=int)
    K = grid.K
    mu = np.zeros((len(sites), K))
    sd = np.zeros((len(sites), K))
    for s, label in enumerate(sites):
        source = (curve_map or {}).get(label, label)
        C, L, U = interval_curve_totals(curve, grid, source, day_shift)
        bad = np.flatnonzero(C <= 0)
        if len(bad):
            raise ValidationError(
                f"site {label}: epidemic curve total is zero in interval {bad[0] + 1}")
        k0 = ref[s] - 1
        mu[s] = np.log(C) - math.log(C[k0])
        mu[s, k0] = 0.0
        if sd_override is not None:
            sd[s] = float(sd_override)
            continue
        with np.errstate(divide="ignore"):
            width = (np.log(U) - np.log(L)) / (2 * Z95)
        if not np.all(np.isfinite(width)):
            k = int(np.flatnonzero(~np.isfinite(width))[0]) + 1
            raise ValidationError(f"site {label}: zero lower bound in interval {k}")
        sd[s] = sd_scale * np.sqrt(width ** 2 + width[k0] ** 2)
    return mu, sd


def build_priors(data: StudyData, curve: EpidemicCurve, grid: CalendarGrid | None = None,
                 sd_scale: float = 1.0, sd_override: float | None = None,
                 sigma_ref: float = DEFAULT_SIGMA_REF, curve_map: dict | None = None,
                 day_shift: int = 0, ref=None, coefficients: dict | None = None,
                 threshold_bounds=None) -> PriorSpec:
    """Informative prior from data and an epidemic curve."""
    grid = grid or data.grid
    if ref is None:
        ref = select_reference_interval(data, grid)
    mu_ref, sig_ref = reference_rate_prior(data, ref, sigma_ref, grid)
    mu_r, sigma_r = curve_to_relative_prior(curve, grid, ref, data.site_labels, sd_scale,
                                            sd_override, curve_map, day_shift)
    coefficients = coefficients or coefficient_priors(data.n_variants, data.n_covariates)
    return PriorSpec(ref, mu_ref, sig_ref, mu_r, sigma_r, threshold_bounds=threshold_bounds,
                     site_labels=data.site_labels, **coefficients)


def misspecified_prior(data: StudyData, curve: EpidemicCurve, curve_map: dict | None = None,
                       day_shift: int = 30, **kw) -> PriorSpec:
    """Prior built from another site's curve read ``day_shift`` days early."""
    return build_priors(data, curve, curve_map=MISSPECIFIED_MAP if curve_map is None else curve_map,
                        day_shift=day_shift, **kw)


def flat_prior(grid: CalendarGrid, n_sites: int, mean_mode: str = "zero", sd: float = 5.0,
               reference: PriorSpec | None = None, mu_ref: float = -5.0,
               sigma_ref: float = DEFAULT_SIGMA_REF, coefficients: dict | None = None) -> PriorSpec:
    """Constant-mean, constant-sd prior on log r.

    ``mean_mode="site_mean"`` centres every interval of a site on the mean of
    that site's ``reference.mu_r``. When ``reference`` is given its reference
    intervals and h_ref priors are reused.
    """
    if mean_mode not in ("zero", "site_mean"):
        raise ValidationError(f"unknown flat prior mean mode {mean_mode!r}")
    K = grid.K
    if mean_mode == "site_mean":
        if reference is None:
            raise ValidationError("site_mean mode needs a reference prior")
        mu_r = np.repeat(reference.mu_r.mean(axis=1, keepdims=True), K, axis=1)
    else:
        mu_r = np.zeros((n_sites, K))
    if reference is not None:
        ref, m_ref, s_ref = reference.ref_interval, reference.mu_ref, reference.sigma_ref
        labels = reference.site_labels
        coefficients = coefficients or dict(alpha=reference.alpha, gamma=reference.gamma,
                                            gamma_T=reference.gamma_T, beta=reference.beta)
        bounds = reference.threshold_bounds
    else:
        ref, m_ref, s_ref = np.ones(n_sites, dtype=int), np.full(n_sites, mu_ref), \
            np.full(n_sites, sigma_ref)
        labels, bounds = (), None
        coefficients = coefficients or {}
    return PriorSpec(ref, m_ref, s_ref, mu_r, np.full((n_sites, K), float(sd)),
                     threshold_bounds=bounds, site_labels=labels, **coefficients)
