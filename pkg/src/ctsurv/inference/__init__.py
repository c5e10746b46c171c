"""Posterior assembly, MCMC, diagnostics and posterior summaries."""

from .diagnostics import ess, split_rhat
from .model import SurvivalModel, log_posterior, log_prior
from .samplers import PosteriorDraws, SamplerConfig, SamplerError, run_chains, sample_posterior
from .summary import posterior_predict_cuminc, summarize

__all__ = [
    "PosteriorDraws", "SamplerConfig", "SamplerError", "SurvivalModel", "ess", "log_posterior",
    "log_prior", "posterior_predict_cuminc", "run_chains", "sample_posterior", "split_rhat",
    "summarize",
]
