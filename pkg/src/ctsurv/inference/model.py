"""Posterior assembly: parameter layout, log prior and log posterior."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import log_ndtr
from scipy.stats import truncnorm

from ..data_model import StudyData, ValidationError
from ..hazard import HazardModel, ModelParameters
from ..likelihood import CompiledLikelihood
from ..priors import NormalPrior, PriorSpec

LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)
BLOCKS = ("log_h_ref", "log_r", "alpha", "gamma", "gamma_T", "beta")


def normal_logpdf(x, prior: NormalPrior) -> float:
    """Log density of a (possibly upper-zero truncated) normal prior."""
    z = (x - prior.mean) / prior.sd
    lp = -0.5 * z * z - LOG_SQRT_2PI - math.log(prior.sd)
    if prior.truncation == "upper_zero":
        if x >= 0:
            return -math.inf
        lp -= float(log_ndtr(-prior.mean / prior.sd))
    return lp


def prior_center(prior: NormalPrior) -> float:
    """Prior mean, accounting for truncation."""
    if prior.truncation == "upper_zero":
        return float(truncnorm.mean(-np.inf, -prior.mean / prior.sd, loc=prior.mean,
                                    scale=prior.sd))
    return prior.mean


def log_prior(params: ModelParameters, priors: PriorSpec) -> float:
    """Sum of prior log densities over all free parameters."""
    S, K = priors.mu_r.shape
    total = 0.0
    for s in range(S):
        total += normal_logpdf(params.log_h_ref[s], NormalPrior(priors.mu_ref[s], priors.sigma_ref[s]))
        for k in range(K):
            if k == priors.ref_interval[s] - 1:
                continue
            total += normal_logpdf(params.log_r[s, k], NormalPrior(priors.mu_r[s, k], priors.sigma_r[s, k]))
    for v, p in enumerate(priors.alpha):
        if p is not None:
            total += normal_logpdf(params.alpha[v], p)
    for v, p in enumerate(priors.gamma):
        total += normal_logpdf(params.gamma[v], p)
    if params.gamma_T is not None:
        for v, p in enumerate(priors.gamma_T):
            total += normal_logpdf(params.gamma_T[v], p)
    for j, p in enumerate(priors.beta):
        total += normal_logpdf(params.beta[j], p)
    if params.x_threshold is not None:
        lo, hi = priors.threshold_bounds
        if not lo <= params.x_threshold <= hi:
            return -math.inf
        total -= math.log(hi - lo)
    return total


def log_posterior(params: ModelParameters, data: StudyData, priors: PriorSpec,
                  hm: HazardModel) -> float:
    """Log likelihood plus log prior, evaluated with the reference engine."""
    lp = log_prior(params, priors)
    if lp == -math.inf:
        return lp
    return hm.log_lik_total(params, data) + lp


class _VectorPrior:
    """Vectorized equivalent of :func:`log_prior` for one PriorSpec.

    Blocks named in ``skip`` are held fixed and carry no prior density.
    """

    def __init__(self, priors: PriorSpec, free_r: np.ndarray, with_gamma_T: bool,
                 skip=()):
        def stack(ps):
            a = np.array([[q.mean, q.sd] for q in ps], dtype=float).reshape(-1, 2)
            return a[:, 0], a[:, 1]

        self.free_r = free_r
        blocks = {
            "log_r": (priors.mu_r[free_r], priors.sigma_r[free_r]),
            "log_h_ref": (priors.mu_ref, priors.sigma_ref),
            "alpha": stack(priors.alpha[1:]),
            "gamma": stack(priors.gamma),
            "beta": stack(priors.beta),
        }
        if with_gamma_T:
            blocks["gamma_T"] = stack(priors.gamma_T)
        self.blocks = {k: v for k, v in blocks.items() if k not in skip}
        trunc = np.array([q.truncation == "upper_zero" for q in priors.gamma])
        self.trunc = trunc if "gamma" in self.blocks else np.zeros_like(trunc)
        self.bounds = priors.threshold_bounds
        sd_all = np.concatenate([sd for _, sd in self.blocks.values()])
        self.const = -float(np.sum(np.log(sd_all))) - LOG_SQRT_2PI * len(sd_all)
        if self.trunc.any():
            m, sd = self.blocks["gamma"]
            self.const -= float(np.sum(log_ndtr(-m[self.trunc] / sd[self.trunc])))

    def _values(self, params: ModelParameters, block: str) -> np.ndarray:
        if block == "log_r":
            return params.log_r[self.free_r]
        if block == "alpha":
            return params.alpha[1:]
        return getattr(params, block)

    def __call__(self, params: ModelParameters) -> float:
        if np.any(params.gamma[self.trunc] >= 0):
            return -math.inf
        q = 0.0
        for block, (m, sd) in self.blocks.items():
            z = (self._values(params, block) - m) / sd
            q += z @ z
        total = self.const - 0.5 * q
        if params.x_threshold is not None:
            lo, hi = self.bounds
            if not lo <= params.x_threshold <= hi:
                return -math.inf
            total -= math.log(hi - lo)
        return total


class SurvivalModel:
    """Sampling target for the calendar-time hazard model.

    The continuous parameters are packed into one unconstrained vector; the
    threshold X_T (when estimated) is carried separately because the
    likelihood is piecewise constant in it. Gamma priors truncated at zero are
    sampled as ``gamma = -exp(u)``.

    ``fixed`` maps block names to constant values that are held out of the
    sampled vector (e.g. ``{"gamma": [0.0]}``); fixed blocks carry no prior
    density.
    """

    def __init__(self, data: StudyData, priors: PriorSpec, hm: HazardModel,
                 fixed: dict | None = None, kernels=None, fd_step: float = 1e-5):
        self.data, self.priors, self.hm = data, priors, hm
        S, V, p, K = data.n_sites, data.n_variants, data.n_covariates, data.grid.K
        if priors.n_sites != S or priors.K != K:
            raise ValidationError("priors do not match the data's sites/intervals")
        if priors.n_variants != V or len(priors.beta) != p:
            raise ValidationError("priors do not match the data's variants/covariates")
        if hm.threshold.active and len(priors.gamma_T) != V:
            raise ValidationError("threshold mode needs gamma_T priors")
        if hm.threshold.mode == "estimate":
            if priors.threshold_bounds is None:
                priors = priors.with_baseline(threshold_bounds=hm.threshold.bounds)
                self.priors = priors
        for g in priors.gamma:
            if g.truncation == "upper_zero" and hm.threshold.mode != "estimate":
                raise ValidationError("upper-zero truncated gamma priors need threshold estimation")
        self.fixed = {k: np.asarray(v, dtype=float) for k, v in (fixed or {}).items()}
        for k in self.fixed:
            if k not in BLOCKS:
                raise ValidationError(f"cannot fix unknown block {k!r}")
        self.lik = CompiledLikelihood(hm, data, kernels)
        self.fd_step = fd_step
        self.estimate_threshold = hm.threshold.mode == "estimate"
        self.threshold_bounds = priors.threshold_bounds if self.estimate_threshold else None
        self.ref = priors.ref_interval
        self._free_r = np.ones((S, K), dtype=bool)
        self._free_r[np.arange(S), self.ref - 1] = False
        self._trunc = np.array([g.truncation == "upper_zero" for g in priors.gamma])
        self._prior = _VectorPrior(priors, self._free_r, hm.threshold.active, self.fixed)
        self._build_layout()

    # -- layout --------------------------------------------------------------

    def _build_layout(self):
        d = self.data
        S, V, p = d.n_sites, d.n_variants, d.n_covariates
        sites, variants = d.site_labels, d.variant_labels
        blocks = [
            ("log_h_ref", [f"log_h_ref[{s}]" for s in sites]),
            ("log_r", [f"log_r[{sites[s]},{k + 1}]" for s, k in zip(*np.nonzero(self._free_r))]),
            ("alpha", [f"alpha[{variants[v]}]" for v in range(1, V)]),
            ("gamma", [f"gamma[{v}]" for v in variants]),
        ]
        if self.hm.threshold.active:
            blocks.append(("gamma_T", [f"gamma_T[{v}]" for v in variants]))
        blocks.append(("beta", [f"beta[{z}]" for z in d.covariate_names]))
        self.slices = {}
        names = []
        for block, labels in blocks:
            if block in self.fixed or not labels:
                continue
            self.slices[block] = slice(len(names), len(names) + len(labels))
            names.extend(labels)
        self.continuous_names = names
        self.dim = len(names)
        self.names = names + (["x_threshold"] if self.estimate_threshold else [])
        del S, V, p

    def _block(self, u, name, size):
        if name in self.fixed:
            return self.fixed[name]
        sl = self.slices.get(name)
        return u[sl] if sl is not None else np.zeros(size)

    def to_params(self, u: np.ndarray, x_threshold: float | None = None) -> ModelParameters:
        d = self.data
        S, V, p, K = d.n_sites, d.n_variants, d.n_covariates, d.grid.K
        log_r = np.zeros((S, K))
        if "log_r" in self.fixed:
            log_r = self.fixed["log_r"].reshape(S, K).copy()
        elif "log_r" in self.slices:
            log_r[self._free_r] = u[self.slices["log_r"]]
        alpha = np.zeros(V)
        if V > 1:
            alpha[1:] = self._block(u, "alpha", V - 1)
        gamma = np.array(self._block(u, "gamma", V), dtype=float)
        if "gamma" not in self.fixed:
            gamma = np.where(self._trunc, -np.exp(gamma), gamma)
        gamma_T = None
        if self.hm.threshold.active:
            gamma_T = np.array(self._block(u, "gamma_T", V), dtype=float)
        beta = np.array(self._block(u, "beta", p), dtype=float)
        xt = None
        if self.estimate_threshold:
            xt = float(x_threshold)
        return ModelParameters(np.array(self._block(u, "log_h_ref", S), dtype=float), log_r,
                               alpha, gamma, beta, gamma_T, xt)

    def from_params(self, params: ModelParameters) -> np.ndarray:
        u = np.zeros(self.dim)
        for block, sl in self.slices.items():
            if block == "log_r":
                u[sl] = params.log_r[self._free_r]
            elif block == "alpha":
                u[sl] = params.alpha[1:]
            elif block == "gamma":
                g = params.gamma.copy()
                with np.errstate(divide="ignore", invalid="ignore"):
                    g[self._trunc] = np.log(-g[self._trunc])
                u[sl] = g
            else:
                u[sl] = getattr(params, block)
        return u

    def named_vector(self, u: np.ndarray, x_threshold: float | None = None) -> np.ndarray:
        """Constrained values in ``self.names`` order."""
        out = np.array(u, dtype=float)
        sl = self.slices.get("gamma")
        if sl is not None:
            out[sl] = np.where(self._trunc, -np.exp(out[sl]), out[sl])
        if self.estimate_threshold:
            out = np.append(out, x_threshold)
        return out

    def params_from_named(self, row: np.ndarray) -> ModelParameters:
        row = np.asarray(row, dtype=float)
        u = row[:self.dim].copy()
        sl = self.slices.get("gamma")
        if sl is not None:
            with np.errstate(divide="ignore", invalid="ignore"):
                u[sl] = np.where(self._trunc, np.log(-u[sl]), u[sl])
        return self.to_params(u, row[self.dim] if self.estimate_threshold else None)

    # -- densities -------------------------------------------------------------

    def log_prior(self, params: ModelParameters) -> float:
        return self._prior(params)

    def log_likelihood(self, params: ModelParameters) -> float:
        return self.lik.log_likelihood(params)

    def log_posterior(self, params: ModelParameters) -> float:
        lp = self.log_prior(params)
        if lp == -math.inf:
            return lp
        return self.lik.log_likelihood(params) + lp

    def log_density(self, u: np.ndarray, x_threshold: float | None = None) -> float:
        """Unnormalized log density on the unconstrained scale."""
        params = self.to_params(u, x_threshold)
        lp = self.log_posterior(params)
        if self._trunc.any() and "gamma" in self.slices:
            lp += float(np.sum(u[self.slices["gamma"]][self._trunc]))
        return lp

    def log_density_grad(self, u: np.ndarray, x_threshold: float | None = None):
        if self.hm.scheme != "exact_piecewise":
            return self._fd_grad(u, x_threshold)
        params = self.to_params(u, x_threshold)
        lp = self.log_prior(params)
        if lp == -math.inf:
            return lp, np.zeros(self.dim)
        ll, g_lh, g_eta = self.lik.log_likelihood_grad(params)
        grad = np.zeros(self.dim)
        pr = self.priors
        lik = self.lik
        for block, sl in self.slices.items():
            if block == "log_h_ref":
                grad[sl] = g_lh.sum(axis=1) - (params.log_h_ref - pr.mu_ref) / pr.sigma_ref ** 2
            elif block == "log_r":
                grad[sl] = (g_lh - (params.log_r - pr.mu_r) / pr.sigma_r ** 2)[self._free_r]
            elif block == "alpha":
                a = np.array([[q.mean, q.sd] for q in pr.alpha[1:]])
                grad[sl] = g_eta.sum(axis=0)[1:] - (params.alpha[1:] - a[:, 0]) / a[:, 1] ** 2
            elif block == "gamma":
                x = lik.seg_x
                if self.hm.threshold.active:
                    x = x * lik.indicator(self.hm.tau(params))
                g = x @ g_eta
                q = np.array([[p.mean, p.sd] for p in pr.gamma])
                g = g - (params.gamma - q[:, 0]) / q[:, 1] ** 2
                # gamma = -exp(u) where truncated: chain rule plus log-Jacobian
                grad[sl] = np.where(self._trunc, g * params.gamma + 1.0, g)
            elif block == "gamma_T":
                ind = lik.indicator(self.hm.tau(params)).astype(float)
                q = np.array([[p.mean, p.sd] for p in pr.gamma_T])
                grad[sl] = ind @ g_eta - (params.gamma_T - q[:, 0]) / q[:, 1] ** 2
            elif block == "beta":
                q = np.array([[p.mean, p.sd] for p in pr.beta]).reshape(-1, 2)
                grad[sl] = lik.seg_z.T @ g_eta.sum(axis=1) - (params.beta - q[:, 0]) / q[:, 1] ** 2
        value = ll + lp
        if self._trunc.any() and "gamma" in self.slices:
            value += float(np.sum(u[self.slices["gamma"]][self._trunc]))
        return value, grad

    def _fd_grad(self, u, x_threshold):
        value = self.log_density(u, x_threshold)
        grad = np.empty(self.dim)
        for j in range(self.dim):
            h = self.fd_step * max(1.0, abs(u[j]))
            up, dn = u.copy(), u.copy()
            up[j] += h
            dn[j] -= h
            grad[j] = (self.log_density(up, x_threshold) - self.log_density(dn, x_threshold)) / (2 * h)
        return value, grad

    # -- initialization --------------------------------------------------------

    def prior_center(self) -> np.ndarray:
        """Prior means on the unconstrained scale."""
        pr = self.priors
        center = ModelParameters(
            pr.mu_ref.copy(), pr.mu_r.copy(),
            np.array([0.0] + [q.mean for q in pr.alpha[1:]]),
            np.array([prior_center(q) for q in pr.gamma]),
            np.array([q.mean for q in pr.beta]),
            np.array([q.mean for q in pr.gamma_T]) if self.hm.threshold.active else None,
        )
        return self.from_params(center)

    def initial_point(self, rng: np.random.Generator, jitter: float = 0.5):
        u = self.prior_center() + rng.uniform(-jitter, jitter, self.dim)
        xt = None
        if self.estimate_threshold:
            lo, hi = self.threshold_bounds
            xt = float(rng.uniform(lo, hi))
        return u, xt
