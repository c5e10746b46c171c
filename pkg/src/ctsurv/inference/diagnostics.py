"""Rank-normalized split R-hat and effective sample size.

Input arrays are (chains, draws) for one parameter.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata


class DiagnosticWarning(RuntimeWarning):
    pass


def _as_chains(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("expected a (chains, draws) array")
    return x


def split_chains(x: np.ndarray) -> np.ndarray:
    """Split each chain into halves (dropping the middle draw when odd)."""
    x = _as_chains(x)
    n = x.shape[1] // 2
    return np.concatenate([x[:, :n], x[:, -n:]], axis=0)


def z_scale(x: np.ndarray) -> np.ndarray:
    """Normal scores of the pooled ranks (ties share their average rank)."""
    r = rankdata(x, method="average").reshape(x.shape)
    return ndtri((r - 0.375) / (x.size + 0.25))


def _rhat(x: np.ndarray) -> float:
    n = x.shape[1]
    w = np.mean(np.var(x, axis=1, ddof=1))
    b = n * np.var(np.mean(x, axis=1), ddof=1)
    var_hat = (n - 1) / n * w + b / n
    return float(np.sqrt(var_hat / w))


def _degenerate(x: np.ndarray, what: str) -> bool:
    if np.all(np.var(x, axis=1) == 0):
        warnings.warn(f"{what} undefined for zero-variance chains", DiagnosticWarning, stacklevel=3)
        return True
    return False


def split_rhat(x) -> float:
    """max(bulk, tail) rank-normalized split R-hat; NaN for constant chains."""
    x = _as_chains(x)
    if x.shape[0] * (x.shape[1] // 2) < 2 or x.shape[1] < 4:
        raise ValueError("R-hat needs at least 4 draws per chain")
    s = split_chains(x)
    if _degenerate(s, "R-hat"):
        return float("nan")
    bulk = _rhat(z_scale(s))
    folded = np.abs(s - np.median(s))
    tail = _rhat(z_scale(folded)) if not np.all(np.var(folded, axis=1) == 0) else bulk
    return max(bulk, tail)


def _autocov(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row via FFT."""
    n = x.shape[1]
    m = 1 << (2 * n - 1).bit_length()
    xc = x - x.mean(axis=1, keepdims=True)
    f = np.fft.rfft(xc, n=m, axis=1)
    return np.fft.irfft(f * np.conj(f), n=m, axis=1)[:, :n] / n


def _ess(x: np.ndarray) -> float:
    """ESS with Geyer's initial monotone sequence estimator."""
    n_chain, n = x.shape
    acov = _autocov(x)
    mean_var = np.mean(acov[:, 0]) * n / (n - 1)
    var_plus = mean_var * (n - 1) / n
    if n_chain > 1:
        var_plus += np.var(np.mean(x, axis=1), ddof=1)
    rho = np.zeros(n)
    rho[0] = 1.0
    rho_even = 1.0
    rho_odd = 1.0 - (mean_var - np.mean(acov[:, 1])) / var_plus
    rho[1] = rho_odd
    t = 1
    while t < n - 3 and rho_even + rho_odd > 0:
        rho_even = 1.0 - (mean_var - np.mean(acov[:, t + 1])) / var_plus
        rho_odd = 1.0 - (mean_var - np.mean(acov[:, t + 2])) / var_plus
        if rho_even + rho_odd >= 0:
            rho[t + 1] = rho_even
            rho[t + 2] = rho_odd
        t += 2
    max_t = t - 2
    if rho_even > 0:
        rho[max_t + 1] = rho_even
    # enforce monotone decrease of the paired sums
    t = 1
    while t <= max_t - 2:
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t]:
            rho[t + 1] = (rho[t - 1] + rho[t]) / 2
            rho[t + 2] = rho[t + 1]
        t += 2
    total = n_chain * n
    tau = -1.0 + 2.0 * np.sum(rho[:max_t + 1]) + np.sum(rho[max_t + 1:max_t + 2])
    tau = max(tau, 1.0 / np.log10(total))
    return float(total / tau)


def ess(x) -> float:
    """Bulk effective sample size (rank-normalized split chains)."""
    x = _as_chains(x)
    if x.shape[1] < 4:
        raise ValueError("ESS needs at least 4 draws per chain")
    s = split_chains(x)
    if _degenerate(s, "ESS"):
        return float("nan")
    return _ess(z_scale(s))


def ess_mean(x) -> float:
    """ESS for the posterior mean (split chains, no rank normalization)."""
    s = split_chains(_as_chains(x))
    if _degenerate(s, "ESS"):
        return float("nan")
    return _ess(s)


def mcse_mean(x) -> float:
    x = _as_chains(x)
    return float(np.std(x, ddof=1) / np.sqrt(ess_mean(x)))


def mcse_sd(x) -> float:
    """Delta-method Monte Carlo error of the posterior sd."""
    x = _as_chains(x)
    sd = np.std(x, ddof=1)
    sq = (x - x.mean()) ** 2
    n_eff = ess_mean(sq)
    return float(np.std(sq, ddof=1) / np.sqrt(n_eff) / (2 * sd))
