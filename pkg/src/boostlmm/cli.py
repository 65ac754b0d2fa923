"""Command-line front end.

Subcommands: ``fit`` (boosting path with optional CV stopping), ``cv``
(same pipeline, CV required), ``oracle`` (direct ML fit) and ``simulate``
(simulation grid).  Options can come from a flat ``key = value`` config
file via ``--config``, with command-line flags taking precedence.

Exit codes: 0 success, 1 input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DataError, NumericError


@dataclass
class RunConfig:
    """Resolved settings of one CLI invocation."""

    command: str
    data: str = ""
    response: str = ""
    cluster: str = ""
    fixed: list = field(default_factory=list)
    square: list = field(default_factory=list)
    random_slope: list = field(default_factory=list)
    nu: float = 0.1
    mstop: int = 1000
    k: int = 10
    seed: int = 1
    start: str = ""   # empty picks the mode-appropriate default
    no_correction: bool = False
    standardize: bool = False
    out: str = "boostlmm_out"
    plots: bool = True
    jobs: int = 1
    # simulate-only
    p: list = field(default_factory=lambda: [10])
    tau: list = field(default_factory=lambda: [0.4])
    slopes: bool = False
    replicates: int = 20
    methods: list = field(default_factory=lambda: ["boostlmm_a", "boostlmm_b"])


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # input errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _csv_list(text):
    return [t.strip() for t in str(text).split(",") if t.strip()]


def _float_list(text):
    return [float(t) for t in _csv_list(text)]


def _int_list(text):
    return [int(t) for t in _csv_list(text)]


def read_config_file(path):
    """Flat ``key = value`` file; '#' starts a comment, keys use option names."""
    values = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


_BOOL_KEYS = {"no_correction", "standardize", "plots", "slopes"}
_LIST_KEYS = {"fixed", "square", "random_slope", "methods"}
_FLOAT_LIST_KEYS = {"tau"}
_INT_LIST_KEYS = {"p"}
_FLOAT_KEYS = {"nu"}
_INT_KEYS = {"mstop", "k", "seed", "jobs", "replicates"}


def _coerce(key, value):
    if key in _BOOL_KEYS:
        return str(value).strip().lower() in ("1", "true", "yes", "on")
    if key in _LIST_KEYS:
        return _csv_list(value)
    if key in _FLOAT_LIST_KEYS:
        return _float_list(value)
    if key in _INT_LIST_KEYS:
        return _int_list(value)
    if key in _FLOAT_KEYS:
        return float(value)
    if key in _INT_KEYS:
        return int(value)
    return value


def build_parser():
    parser = _Parser(prog="boostlmm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(sp):
        sp.add_argument("--config", help="flat key=value settings file")
        sp.add_argument("--data", help="input CSV")
        sp.add_argument("--response", help="response column")
        sp.add_argument("--cluster", help="cluster-id column")
        sp.add_argument("--fixed", type=_csv_list, help="comma-separated fixed-effect columns")
        sp.add_argument("--square", type=_csv_list, help="columns to add as squared terms")
        sp.add_argument("--random-intercept", action="store_true",
                        help="random intercept (always included; flag kept for clarity)")
        sp.add_argument("--random-slope", type=_csv_list,
                        help="design columns with random slopes")
        sp.add_argument("--nu", type=float, help="step length (default 0.1)")
        sp.add_argument("--mstop", type=int, help="maximum boosting iterations")
        sp.add_argument("--k", type=int, help="CV folds; 0 disables CV (fit only)")
        sp.add_argument("--seed", type=int, help="seed for fold assignment")
        sp.add_argument("--start", choices=["zero_ranef", "ml_intercept_ranef"],
                        help="starting-value variant")
        sp.add_argument("--no-correction", action="store_true", default=None,
                        help="legacy mode: joint random-effects treatment, no correction")
        sp.add_argument("--standardize", action="store_true", default=None,
                        help="standardize covariates; coefficients reported on the data scale")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--plots", dest="plots", action="store_true", default=None,
                        help="render figures next to the delimited output (default)")
        sp.add_argument("--no-plots", dest="plots", action="store_false", default=None)
        sp.add_argument("--jobs", type=int, help="parallel workers for folds/replicates")

    for name, doc in (("fit", "fit the boosting path, optionally CV-stopped"),
                      ("cv", "cross-validated fit (k >= 2 required)"),
                      ("oracle", "direct maximum-likelihood fit")):
        add_common(sub.add_parser(name, help=doc))

    sim = sub.add_parser("simulate", help="run the simulation grid")
    sim.add_argument("--config", help="flat key=value settings file")
    sim.add_argument("--p", type=_int_list, help="covariate counts, comma separated")
    sim.add_argument("--tau", type=_float_list, help="random-effect sds, comma separated")
    sim.add_argument("--slopes", action="store_true", default=None,
                     help="random-slopes design instead of random intercepts")
    sim.add_argument("--replicates", type=int)
    sim.add_argument("--methods", type=_csv_list,
                     help="subset of boostlmm_a,boostlmm_b,ml_oracle,legacy_nocorrection")
    sim.add_argument("--nu", type=float)
    sim.add_argument("--mstop", type=int)
    sim.add_argument("--k", type=int)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--jobs", type=int)
    sim.add_argument("--out", help="output directory")
    sim.add_argument("--plots", dest="plots", action="store_true", default=None)
    sim.add_argument("--no-plots", dest="plots", action="store_false", default=None)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig(command=args.command)
    if getattr(args, "config", None):
        for key, value in read_config_file(args.config).items():
            if not hasattr(cfg, key):
                raise DataError(f"unknown config key {key!r}")
            setattr(cfg, key, _coerce(key, value))
    for key in vars(cfg):
        cli_val = getattr(args, key, None)
        if cli_val is not None and key != "command":
            setattr(cfg, key, cli_val)
    return cfg


def _require(cfg, *keys):
    missing = [k for k in keys if not getattr(cfg, k)]
    if missing:
        raise DataError(f"missing required option(s): {', '.join('--' + k for k in missing)}")


def _boost_config(cfg: RunConfig, m_stop=None):
    from .engine import BoostConfig

    m = cfg.mstop if m_stop is None else m_stop
    if cfg.no_correction:
        extra = {"start_mode": cfg.start} if cfg.start else {}
        return BoostConfig.legacy(nu=cfg.nu, m_stop=m, seed=cfg.seed, **extra)
    return BoostConfig(nu=cfg.nu, m_stop=m, seed=cfg.seed,
                       start_mode=cfg.start or "zero_ranef")


def _load_dataset(cfg: RunConfig):
    from .dataio import ingest_csv

    _require(cfg, "data", "response", "cluster", "fixed")
    return ingest_csv(
        cfg.data, response=cfg.response, cluster=cfg.cluster, fixed=cfg.fixed,
        square=cfg.square, random_slopes=cfg.random_slope,
    )


def run_fit(cfg: RunConfig):
    from .crossval import cv_curve
    from .dataio import destandardize_trace, export_results, standardize_dataset
    from .engine import boost_fit
    from .plots import save_report_figures

    if cfg.command == "cv" and cfg.k < 2:
        raise DataError("the cv command needs --k >= 2")
    data = _load_dataset(cfg)
    means = sds = None
    if cfg.standardize:
        data, means, sds = standardize_dataset(data)

    config = _boost_config(cfg)
    trace = boost_fit(data, config)
    curve = cv_curve(data, config, cfg.k, cfg.seed, n_jobs=cfg.jobs) if cfg.k >= 2 else None
    if cfg.standardize:
        trace = destandardize_trace(trace, means, sds)

    files = export_results(trace, curve, cfg.out)
    if cfg.plots:
        files += save_report_figures(trace, curve, cfg.out)

    m_star = curve.m_star if curve is not None else trace.m_stop
    print(f"stopped at m* = {m_star} of {trace.m_stop}")
    print(f"intercept = {trace.beta_path[m_star, 0]:.4f}")
    for name, value in zip(trace.colnames, trace.beta_path[m_star, 1:]):
        print(f"{name} = {value:.4f}")
    print(f"sigma2 = {trace.sigma2_path[m_star]:.4f}, tau2 = {trace.Q_path[m_star][0, 0]:.4f}")
    for f in files:
        print(f"wrote {f}")
    return 0


def run_oracle(cfg: RunConfig):
    import json

    import numpy as np

    from .dataio import _fmt, _round12
    from .mle import ml_fit

    data = _load_dataset(cfg)
    state = ml_fit(data)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    est = {
        "intercept": _round12(state.beta0),
        "coefficients": {n: _round12(v) for n, v in zip(data.colnames, state.beta)},
        "sigma2": _round12(state.sigma2),
        "tau2": _round12(state.Q[0, 0]),
        "Q": [[_round12(v) for v in row] for row in np.atleast_2d(state.Q)],
    }
    (out / "estimates.json").write_text(json.dumps(est, indent=2) + "\n")
    with (out / "ranef.csv").open("w") as fh:
        fh.write(",".join(["cluster", "intercept", *data.z_cols[1:]]) + "\n")
        for label, row in zip(data.cluster_labels, state.gamma):
            fh.write(",".join([str(label), *(_fmt(v) for v in row)]) + "\n")
    print(f"intercept = {state.beta0:.4f}")
    for name, value in zip(data.colnames, state.beta):
        print(f"{name} = {value:.4f}")
    print(f"sigma2 = {state.sigma2:.4f}, tau2 = {state.Q[0, 0]:.4f}")
    print(f"wrote {out / 'estimates.json'}")
    print(f"wrote {out / 'ranef.csv'}")
    return 0


def run_simulate(cfg: RunConfig):
    from .plots import simulation_summary_plot
    from .simulate import SimDesign, run_study

    designs = [
        SimDesign(p=p, tau=tau, slopes=cfg.slopes, replicates=cfg.replicates, seed=cfg.seed)
        for p in cfg.p for tau in cfg.tau
    ]
    table = run_study(designs, methods=cfg.methods, nu=cfg.nu,
                      m_stop=cfg.mstop, k=max(cfg.k, 2), n_jobs=cfg.jobs, progress=True)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "results.csv", index=False, float_format="%.12g")
    print(table.to_string(index=False))
    print(f"wrote {out / 'results.csv'}")
    if cfg.plots:
        fig = simulation_summary_plot(table, out / "results.png")
        print(f"wrote {fig}")
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        if cfg.command in ("fit", "cv"):
            return run_fit(cfg)
        if cfg.command == "oracle":
            return run_oracle(cfg)
        if cfg.command == "simulate":
            return run_simulate(cfg)
        raise DataError(f"unknown command {cfg.command!r}")
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
