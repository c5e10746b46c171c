"""Reference evaluation of hazards, survivor functions and likelihood terms.

Everything here works one subject and one time point at a time. It is the
readable definition of the model; :mod:`ctsurv.likelihood` compiles the same
quantities into vectorized tables for sampling and is tested against this
module.

The variant-specific hazard for subject ``i`` at calendar time ``t`` is::

    pi_v(s_i, t) * h_ref[s_i] * r[s_i](t) * exp(alpha_v + g(X_i(t)) + Z_i(t) . beta)

where ``g`` is the (optionally thresholded) predictor term.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .data_model import (
    EVENT,
    INTERVAL_CENSORED,
    RIGHT_CENSORED,
    CalendarGrid,
    StudyData,
    Subject,
    ValidationError,
    VariantMix,
    interval_index,
)

THRESHOLD_MODES = ("none", "fixed_llod", "estimate")
SCHEMES = ("exact_piecewise", "daily_trapezoid")
KNOWLEDGE = ("known", "unknown")


class LikelihoodWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class ThresholdConfig:
    mode: str = "none"
    x_llod: float | None = None
    bounds: tuple[float, float] | None = None

    def __post_init__(self):
        if self.mode not in THRESHOLD_MODES:
            raise ValidationError(f"unknown threshold mode {self.mode!r}")
        if self.mode != "none" and (self.x_llod is None or not math.isfinite(self.x_llod)):
            raise ValidationError("threshold modes need a finite x_llod")
        if self.mode == "estimate":
            if self.bounds is None:
                raise ValidationError("threshold estimation needs bounds")
            lo, hi = self.bounds
            if not lo < hi:
                raise ValidationError("threshold bounds need lower < upper")

    @property
    def active(self) -> bool:
        return self.mode != "none"


@dataclass(eq=False)
class ModelParameters:
    """Constrained parameter values.

    ``log_r`` holds all K entries per site; the reference interval entry must be
    exactly 0. Variant 0 is the reference variant (``alpha[0] == 0``).
    """

    log_h_ref: np.ndarray
    log_r: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    gamma_T: np.ndarray | None = None
    x_threshold: float | None = None

    def __post_init__(self):
        self.log_h_ref = np.asarray(self.log_h_ref, dtype=float)
        self.log_r = np.atleast_2d(np.asarray(self.log_r, dtype=float))
        self.alpha = np.asarray(self.alpha, dtype=float).reshape(-1)
        self.gamma = np.asarray(self.gamma, dtype=float).reshape(-1)
        self.beta = np.asarray(self.beta, dtype=float).reshape(-1)
        if self.gamma_T is not None:
            self.gamma_T = np.asarray(self.gamma_T, dtype=float).reshape(-1)

    def check(self, ref_intervals=None, threshold: ThresholdConfig | None = None) -> None:
        if self.alpha[0] != 0.0:
            raise ValidationError("alpha of the reference variant must be 0")
        if ref_intervals is not None:
            for s, k in enumerate(ref_intervals):
                if self.log_r[s, k - 1] != 0.0:
                    raise ValidationError(f"log_r at the reference interval of site {s} must be 0")
        if threshold is not None:
            if threshold.mode == "none" and (self.gamma_T is not None or self.x_threshold is not None):
                raise ValidationError("threshold parameters given without a threshold mode")
            if threshold.active and self.gamma_T is None:
                raise ValidationError("threshold mode needs gamma_T")
            if threshold.mode == "estimate" and self.x_threshold is None:
                raise ValidationError("threshold estimation needs x_threshold")


def log1m_exp(a: float) -> float:
    """log(1 - exp(-a)) for a > 0."""
    if a <= 0:
        return -math.inf
    return math.log(-math.expm1(-a)) if a < 0.693 else math.log1p(-math.exp(-a))


@dataclass(frozen=True, eq=False)
class HazardModel:
    grid: CalendarGrid
    mix: VariantMix
    threshold: ThresholdConfig = ThresholdConfig()
    variant_knowledge: str = "unknown"
    scheme: str = "exact_piecewise"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValidationError(f"unknown integration scheme {self.scheme!r}")
        if self.variant_knowledge not in KNOWLEDGE:
            raise ValidationError(f"unknown variant knowledge {self.variant_knowledge!r}")

    @property
    def n_variants(self) -> int:
        return self.mix.n_variants

    def tau(self, params: ModelParameters) -> float:
        mode = self.threshold.mode
        if mode == "fixed_llod":
            return self.threshold.x_llod
        if mode == "estimate":
            return params.x_threshold
        return -math.inf

    # -- pointwise -----------------------------------------------------------

    def baseline_hazard(self, params: ModelParameters, site: int, t: float) -> float:
        k = interval_index(self.grid, t)
        return math.exp(params.log_h_ref[site] + params.log_r[site, k - 1])

    def linear_predictor(self, params: ModelParameters, subject: Subject, variant: int,
                         t: float) -> float:
        x = subject.x(t)
        eta = params.alpha[variant]
        if self.threshold.mode == "none":
            eta += params.gamma[variant] * x
        elif x > self.tau(params):
            eta += params.gamma[variant] * x + params.gamma_T[variant]
        if len(params.beta):
            eta += float(subject.z(t) @ params.beta)
        return eta

    def variant_hazard(self, params: ModelParameters, subject: Subject, variant: int,
                       t: float) -> float:
        pi = self.mix.at(subject.site, t)[variant]
        if pi == 0.0:
            return 0.0
        return pi * self.baseline_hazard(params, subject.site, t) * math.exp(
            self.linear_predictor(params, subject, variant, t))

    def overall_hazard(self, params: ModelParameters, subject: Subject, t: float) -> float:
        return sum(self.variant_hazard(params, subject, v, t) for v in range(self.n_variants))

    # -- integrated ----------------------------------------------------------

    def cumulative_hazard(self, params: ModelParameters, subject: Subject, start: float,
                          stop: float, scheme: str | None = None) -> float:
        scheme = scheme or self.scheme
        if start > stop:
            raise ValueError("cumulative hazard needs start <= stop")
        if start == stop:
            return 0.0
        if scheme == "daily_trapezoid":
            if start != int(start) or stop != int(stop):
                raise ValueError("daily trapezoid needs whole-day limits")
            a, b = int(start), int(stop)
            total = 0.5 * (self.overall_hazard(params, subject, a)
                           + self.overall_hazard(params, subject, b))
            for d in range(a + 1, b):
                total += self.overall_hazard(params, subject, d)
            return total
        # All step functions are constant on (d - 1, d]; integrate day by day.
        total = 0.0
        lo = start
        while lo < stop:
            hi = min(math.floor(lo) + 1.0, stop)
            total += (hi - lo) * self.overall_hazard(params, subject, hi)
            lo = hi
        return total

    def survivor(self, params: ModelParameters, subject: Subject, t: float) -> float:
        if t < subject.enroll_day:
            raise ValueError("survivor evaluated before enrollment")
        return math.exp(-self.cumulative_hazard(params, subject, subject.enroll_day, t))

    def _interval_integral_known(self, params, subject, variant) -> float:
        """log of the integral of h_v(t) S(t) over (L, R]."""
        t0, L, R = subject.enroll_day, subject.time_lower, subject.time_upper
        H_L = self.cumulative_hazard(params, subject, t0, L, scheme="exact_piecewise")
        logs = []
        if self.scheme == "daily_trapezoid":
            h0 = self.overall_hazard(params, subject, t0)
            cum = H_L
            for d in range(L, R + 1):
                if d > L:
                    cum += self.overall_hazard(params, subject, d)
                hd = self.overall_hazard(params, subject, d)
                a = self.variant_hazard(params, subject, variant, d)
                if a == 0.0:
                    continue
                weight = 0.5 if d in (L, R) else 1.0
                h_trap = cum + 0.5 * (h0 - hd)
                logs.append(math.log(weight * a) - h_trap)
        else:
            # closed form on each day piece: S(d-1) * a * (1 - exp(-b)) / b
            cum = H_L
            for d in range(L + 1, R + 1):
                a = self.variant_hazard(params, subject, variant, d)
                b = self.overall_hazard(params, subject, d)
                if a > 0.0:
                    logs.append(-cum + math.log(a) + math.log(-math.expm1(-b) / b))
                cum += b
        if not logs:
            return -math.inf
        m = max(logs)
        return m + math.log(math.fsum(math.exp(x - m) for x in logs))

    def log_lik_subject(self, params: ModelParameters, subject: Subject,
                        variant_knowledge: str | None = None) -> float:
        knowledge = variant_knowledge or self.variant_knowledge
        t0 = subject.enroll_day
        if subject.status == RIGHT_CENSORED:
            return -self.cumulative_hazard(params, subject, t0, subject.time_lower)
        if subject.status == EVENT:
            T = subject.time_lower
            if knowledge == "known":
                if subject.variant is None:
                    raise ValidationError(f"subject {subject.id}: known-variant mode needs a variant")
                h = self.variant_hazard(params, subject, subject.variant, T)
            else:
                h = self.overall_hazard(params, subject, T)
            logh = math.log(h) if h > 0 else -math.inf
            return logh - self.cumulative_hazard(params, subject, t0, T)
        if subject.status == INTERVAL_CENSORED:
            if knowledge == "known":
                if subject.variant is None:
                    raise ValidationError(f"subject {subject.id}: known-variant mode needs a variant")
                return self._interval_integral_known(params, subject, subject.variant)
            L, R = subject.time_lower, subject.time_upper
            H_L = self.cumulative_hazard(params, subject, t0, L)
            H_R = self.cumulative_hazard(params, subject, t0, R)
            return -H_L + log1m_exp(H_R - H_L)
        raise ValidationError(f"subject {subject.id}: unknown status")

    def log_lik_total(self, params: ModelParameters, data: StudyData,
                      variant_knowledge: str | None = None) -> float:
        terms = [self.log_lik_subject(params, s, variant_knowledge) for s in data.subjects]
        bad = [s.id for s, v in zip(data.subjects, terms) if not math.isfinite(v)]
        if bad:
            warnings.warn(f"non-finite likelihood for subject(s) {', '.join(bad)}",
                          LikelihoodWarning, stacklevel=2)
            return -math.inf if all(v == -math.inf for v in terms if not math.isfinite(v)) \
                else math.nan
        return math.fsum(terms)
