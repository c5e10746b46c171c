"""Posterior summaries, hazard-ratio contrasts and posterior-predictive checks."""

from __future__ import annotations

import warnings

import numpy as np
import pandas as pd

from ..data_model import EVENT, INTERVAL_CENSORED, StudyData, ValidationError
from ..likelihood import SurvivorTable
from .diagnostics import ess, split_rhat
from .samplers import PosteriorDraws

SUMMARY_COLUMNS = ["parameter", "mean", "sd", "q2.5", "q50", "q97.5", "rhat", "ess"]
DEFAULT_PPC_DRAWS = 100


def _row(name: str, x: np.ndarray) -> dict:
    """Summary statistics of one (chains, iterations) array."""
    flat = x.reshape(-1)
    q = np.percentile(flat, [2.5, 50, 97.5])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if x.shape[0] >= 2 and x.shape[1] >= 4:
            rhat, n_eff = split_rhat(x), ess(x)
        else:
            rhat = n_eff = float("nan")
    return {"parameter": name, "mean": float(flat.mean()),
            "sd": float(flat.std(ddof=1)) if flat.size > 1 else 0.0,
            "q2.5": q[0], "q50": q[1], "q97.5": q[2], "rhat": rhat, "ess": n_eff}


def summarize(draws: PosteriorDraws, contrasts=None) -> pd.DataFrame:
    """One row per parameter plus hazard-ratio rows.

    ``contrasts`` is a list of predictor differences dx; for each gamma
    parameter it adds ``HR[gamma[v],dx]`` = exp(gamma * dx) and the relative
    risk reduction ``RRR[...]`` = 1 - HR.
    """
    if draws.draws.size == 0:
        raise ValidationError("no posterior draws to summarize")
    rows = [_row(n, draws[n]) for n in draws.names]
    for dx in contrasts or ():
        for n in draws.names:
            if not n.startswith("gamma["):
                continue
            hr = np.exp(draws[n] * dx)
            rows.append(_row(f"HR[{n},dx={dx:g}]", hr))
            rows.append(_row(f"RRR[{n},dx={dx:g}]", 1.0 - hr))
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def unconverged(summary: pd.DataFrame, max_rhat: float = 1.05) -> pd.DataFrame:
    """Rows whose R-hat is at least ``max_rhat`` (or undefined)."""
    base = summary[~summary["parameter"].str.contains(r"^(?:HR|RRR)\[")]
    bad = ~(base["rhat"] < max_rhat)
    return base[bad]


def draws_frame(draws: PosteriorDraws) -> pd.DataFrame:
    """Long table: chain, iteration, one column per parameter."""
    C, N, _ = draws.draws.shape
    df = pd.DataFrame(draws.flat(), columns=draws.names)
    df.insert(0, "iteration", np.tile(np.arange(N), C))
    df.insert(0, "chain", np.repeat(np.arange(C), N))
    return df


def draws_from_frame(df: pd.DataFrame) -> PosteriorDraws:
    names = [c for c in df.columns if c not in ("chain", "iteration")]
    chains = sorted(df["chain"].unique())
    arr = np.stack([df.loc[df["chain"] == c].sort_values("iteration")[names].to_numpy()
                    for c in chains])
    return PosteriorDraws(names=names, draws=arr, accept_rate=np.full(len(chains), np.nan))


# ---------------------------------------------------------------------------
# Posterior-predictive cumulative incidence
# ---------------------------------------------------------------------------


def observed_cuminc(data: StudyData, day: int) -> float:
    """Share infected by ``day`` days after enrollment among subjects whose
    status at that time is known."""
    infected = known = 0
    for s in data.subjects:
        t = s.enroll_day + day
        if s.status == EVENT:
            known += 1
            infected += s.time_lower <= t
        elif s.status == INTERVAL_CENSORED:
            if s.time_upper <= t:
                known += 1
                infected += 1
            elif s.time_lower >= t:
                known += 1
        elif s.time_lower >= t:
            known += 1
    return infected / known if known else float("nan")


def posterior_predict_cuminc(draws: PosteriorDraws, model, eval_days,
                             n_draws: int = DEFAULT_PPC_DRAWS, seed: int = 0,
                             data: StudyData | None = None) -> pd.DataFrame:
    """Predicted cumulative incidence at follow-up days ``eval_days``.

    For each of ``n_draws`` retained posterior draws (sampled without
    replacement), subject i gets one uniform u_i and counts as infected by
    day d when u_i > S_i(t0_i + d). Sharing u_i across days makes each
    subject's infection indicator non-decreasing in d.
    """
    data = data or model.data
    eval_days = [int(d) for d in eval_days]
    flat = draws.flat()
    if n_draws > len(flat):
        raise ValidationError(f"n_draws={n_draws} exceeds the {len(flat)} retained draws")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(flat), size=n_draws, replace=False)
    table = SurvivorTable(model.hm, data, eval_days, model.lik.K)
    obs = [observed_cuminc(data, d) for d in eval_days]
    order = [draws.index(n) for n in model.names]
    rows = []
    for j, idx in enumerate(pick):
        params = model.params_from_named(flat[idx, order])
        surv = table.survivor(params)
        u = rng.random(len(data))
        infected = u[:, None] > surv
        frac = infected.mean(axis=0)
        for d, f, o in zip(eval_days, frac, obs):
            rows.append({"draw": j, "eval_day": d, "predicted_cuminc": float(f),
                         "observed_cuminc": o})
    return pd.DataFrame(rows, columns=["draw", "eval_day", "predicted_cuminc", "observed_cuminc"])
