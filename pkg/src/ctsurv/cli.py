"""Command-line front end.

Subcommands: fit, simulate, prior-build, ppc, replicate, summarize.
Exit codes: 0 success, 1 invalid input or configuration, 2 sampler failure
or (with --require-converged) an R-hat at or above the limit.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__, kernels
from .config import RunConfig, file_digest
from .data_model import (
    ValidationError, VariantMix, load_epidemic_curve, load_participants, load_variant_proportions,
    write_participants,
)
from .hazard import HazardModel
from .inference.model import SurvivalModel
from .inference.samplers import SamplerError, resolve_threads, sample_posterior
from .inference.summary import (
    draws_frame, draws_from_frame, posterior_predict_cuminc, summarize, unconverged,
)
from .priors import (
    PriorSpec, build_priors, coefficient_priors, flat_prior, read_priors, reference_rate_prior,
    select_reference_interval, write_priors,
)
from .simulation import SimConfig, TrialGenerator, run_replication_study

log = logging.getLogger("ctsurv")

EXIT_OK, EXIT_INVALID, EXIT_SAMPLER = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Shared pipeline
# ---------------------------------------------------------------------------


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    for attr, key in (("data", "io.data"), ("curve", "io.curve"), ("variants", "io.variants"),
                      ("priors", "io.priors"), ("out", "io.out"), ("draws", "io.draws"),
                      ("seed", "sampler.seed"), ("chains", "sampler.n_chains"),
                      ("iterations", "sampler.n_iterations"), ("algorithm", "sampler.algorithm")):
        value = getattr(args, attr, None)
        if value is not None:
            cfg.set_value(key, json.dumps(value))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        cfg.set_value(key.strip(), raw)
    # re-run validation on the overridden values
    return RunConfig.from_dict(cfg.to_dict())


def _require_file(path, what):
    if not path:
        raise ValidationError(f"missing {what} file (set io.{what} or pass --{what})")
    if not Path(path).is_file():
        raise ValidationError(f"{what} file {path} not found")
    return path


class Pipeline:
    """Everything needed to sample, validated up front."""

    def __init__(self, cfg: RunConfig, need_priors_source=True):
        self.cfg = cfg
        io = cfg.io
        data_path = _require_file(io.data, "data")
        origin = cfg.origin_date
        self.grid = cfg.grid(data_path)
        m = cfg.model
        self.data = load_participants(data_path, self.grid, origin, m.sites, m.variants)
        self.data.check_sites_populated()
        self.inputs = {"data": data_path}
        V = self.data.n_variants
        if io.variants:
            self.inputs["variants"] = _require_file(io.variants, "variants")
            mix = load_variant_proportions(io.variants, self.grid, V, self.data.site_labels,
                                           origin, self.data.variant_labels)
        elif V > 1:
            raise ValidationError("several variants need a variant proportions file (io.variants)")
        else:
            mix = VariantMix.single(self.grid, self.data.n_sites)
        self.hm = HazardModel(self.grid, mix, m.threshold(), m.variant_knowledge, m.scheme)
        self.priors = self._priors() if need_priors_source else None
        self.model = SurvivalModel(self.data, self.priors, self.hm) if self.priors else None

    def _curve(self):
        path = _require_file(self.cfg.io.curve, "curve")
        self.inputs["curve"] = path
        return load_epidemic_curve(path, self.grid, self.cfg.origin_date)

    def _priors(self) -> PriorSpec:
        cfg, data = self.cfg, self.data
        p = cfg.prior
        if p.source == "file":
            self.inputs["priors"] = _require_file(cfg.io.priors, "priors")
            return read_priors(cfg.io.priors)
        bounds = tuple(cfg.model.threshold_bounds) if cfg.model.threshold_bounds else None
        coef = coefficient_priors(data.n_variants, data.n_covariates, p.coefficient_scale,
                                  cfg.model.threshold_mode, p.gamma_truncation)
        if p.source == "built":
            return build_priors(data, self._curve(), self.grid, p.sd_scale, p.sd_override,
                                p.sigma_ref, p.misspecified_map, p.day_shift,
                                coefficients=coef, threshold_bounds=bounds)
        # flat
        if cfg.io.curve:
            reference = build_priors(data, self._curve(), self.grid, sigma_ref=p.sigma_ref,
                                     coefficients=coef, threshold_bounds=bounds)
        else:
            ref = select_reference_interval(data, self.grid)
            mu_ref, sig_ref = reference_rate_prior(data, ref, p.sigma_ref, self.grid)
            K = self.grid.K
            reference = PriorSpec(ref, mu_ref, sig_ref, np.zeros((data.n_sites, K)),
                                  np.ones((data.n_sites, K)), threshold_bounds=bounds,
                                  site_labels=data.site_labels, **coef)
        return flat_prior(self.grid, data.n_sites, p.flat_mean_mode, p.flat_sd, reference)


def _manifest(command: str, cfg: RunConfig | SimConfig, seed, inputs: dict, outputs: list,
              config_hash: str) -> dict:
    return {
        "command": command,
        "config_hash": config_hash,
        "config": cfg.to_dict(),
        "seed": seed,
        "versions": {"ctsurv": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__,
                     "pandas": pd.__version__},
        "kernel_backend": kernels.BACKEND,
        "inputs": {k: {"path": str(v), "sha256": file_digest(v)} for k, v in sorted(inputs.items())},
        "outputs": sorted(outputs),
    }


def _write_manifest(out: Path, manifest: dict):
    (out / "run-manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _float_csv(df: pd.DataFrame, path: Path):
    df.to_csv(path, index=False, float_format="%.10g")


def _report_unconverged(summary, max_rhat) -> bool:
    bad = unconverged(summary, max_rhat)
    if len(bad):
        print(f"convergence check failed: {len(bad)} parameter(s) with R-hat >= {max_rhat}",
              file=sys.stderr)
        for _, r in bad.iterrows():
            print(f"  {r['parameter']}: rhat={r['rhat']:.4f} ess={r['ess']:.1f}", file=sys.stderr)
        return True
    return False


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_fit(args) -> int:
    cfg = _apply_overrides(RunConfig.load(args.config), args)
    pipe = Pipeline(cfg)
    out = Path(cfg.io.out)
    out.mkdir(parents=True, exist_ok=True)
    threads = resolve_threads(args.threads)
    log.info("sampling %d parameters, %d chains x %d iterations", len(pipe.model.names),
             cfg.sampler.n_chains, cfg.sampler.n_iterations)
    draws = sample_posterior(pipe.model, cfg.sampler, threads)
    summary = summarize(draws, cfg.contrasts)
    _float_csv(draws_frame(draws), out / "draws.csv")
    _float_csv(summary, out / "summary.csv")
    outputs = ["draws.csv", "summary.csv"]
    if args.ppc:
        ppc = posterior_predict_cuminc(draws, pipe.model, cfg.ppc.eval_days, cfg.ppc.n_draws,
                                       cfg.ppc.seed)
        _float_csv(ppc, out / "ppc.csv")
        outputs.append("ppc.csv")
    write_priors(pipe.priors, out / "priors.json")
    outputs.append("priors.json")
    _write_manifest(out, _manifest("fit", cfg, cfg.sampler.seed, pipe.inputs, outputs, cfg.hash()))
    if args.require_converged and _report_unconverged(summary, cfg.max_rhat):
        return EXIT_SAMPLER
    return EXIT_OK


def cmd_prior_build(args) -> int:
    cfg = _apply_overrides(RunConfig.load(args.config), args)
    if cfg.prior.source == "file":
        raise ValidationError("prior-build needs prior.source 'built' or 'flat'")
    pipe = Pipeline(cfg)
    out = Path(args.output) if args.output else Path(cfg.io.out) / "priors.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_priors(pipe.priors, out)
    return EXIT_OK


def cmd_ppc(args) -> int:
    cfg = _apply_overrides(RunConfig.load(args.config), args)
    draws_path = _require_file(cfg.io.draws, "draws")
    pipe = Pipeline(cfg)
    draws = draws_from_frame(pd.read_csv(draws_path))
    missing = set(pipe.model.names) - set(draws.names)
    if missing:
        raise ValidationError(f"draws file lacks parameter(s): {', '.join(sorted(missing))}")
    out = Path(cfg.io.out)
    out.mkdir(parents=True, exist_ok=True)
    n = args.n_draws if args.n_draws is not None else cfg.ppc.n_draws
    days = args.eval_days or cfg.ppc.eval_days
    ppc = posterior_predict_cuminc(draws, pipe.model, days, n, cfg.ppc.seed)
    _float_csv(ppc, out / "ppc.csv")
    pipe.inputs["draws"] = draws_path
    _write_manifest(out, _manifest("ppc", cfg, cfg.ppc.seed, pipe.inputs, ["ppc.csv"], cfg.hash()))
    return EXIT_OK


def cmd_summarize(args) -> int:
    path = _require_file(args.draws, "draws")
    draws = draws_from_frame(pd.read_csv(path))
    summary = summarize(draws, args.contrast or [])
    out = Path(args.output) if args.output else Path(path).with_name("summary.csv")
    _float_csv(summary, out)
    if args.require_converged and _report_unconverged(summary, args.max_rhat):
        return EXIT_SAMPLER
    return EXIT_OK


def _load_sim_config(path) -> SimConfig:
    if path is None:
        return SimConfig()
    try:
        return SimConfig.from_dict(json.loads(Path(path).read_text()))
    except FileNotFoundError:
        raise ValidationError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    except TypeError as exc:
        raise ValidationError(f"simulation config: {exc}") from None


def _sim_hash(cfg: SimConfig) -> str:
    import hashlib
    text = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def cmd_simulate(args) -> int:
    cfg = _load_sim_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.n is not None:
        cfg.n_subjects = args.n
    gen = TrialGenerator(cfg)
    data = gen.simulate(cfg.n_subjects, np.random.default_rng(cfg.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_participants(data, out / "participants.csv", cfg.origin_date)
    ref = select_reference_interval(data, gen.grid)
    truth = gen.true_parameters(ref)
    (out / "truth.json").write_text(json.dumps({
        "baseline_scale": gen.scale, "gamma": cfg.gamma, "beta": cfg.beta,
        "grid": {"start_day": gen.grid.start_day, "end_day": gen.grid.end_day,
                 "interval_length": gen.grid.interval_length},
        "ref_interval": [int(k) for k in ref],
        "log_h_ref": truth.log_h_ref.tolist(), "log_r": truth.log_r.tolist(),
        "x_threshold": gen.biomarker_threshold,
    }, indent=2) + "\n")
    inputs = {"curve": cfg.curve_path} if cfg.curve_path else {}
    _write_manifest(out, _manifest("simulate", cfg, cfg.seed, inputs,
                                   ["participants.csv", "truth.json"], _sim_hash(cfg)))
    return EXIT_OK


def cmd_replicate(args) -> int:
    cfg = _load_sim_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.replications is not None:
        cfg.n_replications = args.replications
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def progress(i, n):
        log.info("replication job %d/%d done", i, n)

    cells, fits = run_replication_study(cfg, resolve_threads(args.threads), progress)
    _float_csv(cells, out / "cells.csv")
    _float_csv(fits, out / "fits.csv")
    inputs = {"curve": cfg.curve_path} if cfg.curve_path else {}
    _write_manifest(out, _manifest("replicate", cfg, cfg.seed, inputs, ["cells.csv", "fits.csv"],
                                   _sim_hash(cfg)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _run_options(p, with_priors=True):
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--data", help="participants.csv")
    p.add_argument("--curve", help="epidemic_curve.csv")
    p.add_argument("--variants", help="variant_props.csv")
    if with_priors:
        p.add_argument("--priors", help="priors.json (with prior.source = file)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field, e.g. sampler.n_iterations=2000")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctsurv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ctsurv {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="sample the posterior")
    _run_options(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--chains", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--algorithm", choices=["hmc", "adaptive_rwm"])
    p.add_argument("--threads", type=int, help="worker processes (default $CTSURV_THREADS or 1)")
    p.add_argument("--ppc", action="store_true", help="also write ppc.csv")
    p.add_argument("--require-converged", action="store_true",
                   help="exit 2 when any R-hat reaches the configured limit")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("prior-build", help="write priors.json")
    _run_options(p, with_priors=False)
    p.add_argument("-o", "--output", help="priors.json path (default OUT/priors.json)")
    p.set_defaults(func=cmd_prior_build)

    p = sub.add_parser("ppc", help="posterior-predictive cumulative incidence")
    _run_options(p)
    p.add_argument("--draws", help="draws.csv from fit")
    p.add_argument("--n-draws", type=int)
    p.add_argument("--eval-days", type=int, nargs="+")
    p.set_defaults(func=cmd_ppc)

    p = sub.add_parser("summarize", help="summary table from draws.csv")
    p.add_argument("--draws", required=True)
    p.add_argument("-o", "--output")
    p.add_argument("--contrast", type=float, action="append",
                   help="predictor difference for hazard-ratio rows (repeatable)")
    p.add_argument("--max-rhat", type=float, default=1.05)
    p.add_argument("--require-converged", action="store_true")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("simulate", help="write a synthetic participants.csv")
    p.add_argument("--config", help="simulation configuration JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int, help="number of subjects")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("replicate", help="bias/coverage replication study")
    p.add_argument("--config", help="simulation configuration JSON")
    p.add_argument("--out", default="replication")
    p.add_argument("--seed", type=int)
    p.add_argument("--replications", type=int)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_replicate)
    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except SamplerError as exc:
        print(f"sampler failure: {exc}", file=sys.stderr)
        return EXIT_SAMPLER


def main(argv=None):
    sys.exit(dispatch(argv))


if __name__ == "__main__":
    main()
