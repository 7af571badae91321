"""
Command-line entry point.

    python -m app.main simulate  --config settings.json --out data/study1.csv
    python -m app.main fit       --config settings.json --data data/study1.csv --out results/fit.json
    python -m app.main curve     --fit results/fit.json --data data/study1.csv --ids 1,2 --out-dir curves
    python -m app.main bootstrap --config configs/grouped.yaml --data ema.csv --replicates 200 --out-dir boot
    python -m app.main study     --config settings.json --out-dir results/study1

Exit codes: 0 ok, 1 invalid config/data/model, 2 I/O error, 3 fit did not converge.
"""
import argparse
import json
import logging
import os
import sys
import time

from app.core.bootstrap import bootstrap
from app.core.config import RunConfig, build_model, load_config, model_to_dict
from app.core.csv_utils import ingest_csv, log_run, write_csv
from app.core.dataset import LGPError
from app.core.filters import filter_individuals
from app.core.fit import fit
from app.core.posterior import infer_curves
from app.core.simulate import simulate_dataset
from app.scheduler.headless import run_study
from app.utils import atomic_write_frame, atomic_write_text, setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_IO = 2
EXIT_NOT_CONVERGED = 3


def _write_json(path, payload):
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _sidecar(path, suffix):
    stem, _ = os.path.splitext(path)
    return stem + suffix


def _overrides(args):
    """Dotted config keys for every CLI flag that was given."""
    flags = {
        "seed": "seed",
        "threads": "threads",
        "max_iter": "fit.max_iter",
        "tol": "fit.tol",
        "m0": "fit.m0",
        "m": "fit.m",
        "sweeps": "fit.sweeps",
        "method": "fit.method",
        "samples": "curve.samples",
        "burn_in": "curve.burn_in",
        "grid_points": "curve.grid_points",
        "group": "curve.group",
        "replicates": "bootstrap.replicates",
        "replications": "study.replications",
        "n": "simulate.N",
    }
    out = {dotted: getattr(args, name, None) for name, dotted in flags.items()}
    if getattr(args, "random_init", False):
        out["fit.random_init"] = True
    if getattr(args, "alphas", None):
        out["curve.alphas"] = [float(a) for a in args.alphas.split(",")]
    return out


def _load_data(config: RunConfig, path):
    dataset = ingest_csv(path, config.csv_schema())
    logger.info("read %d individuals, %d observations from %s", dataset.N, dataset.n_observations, path)
    return dataset


def cmd_simulate(args, config: RunConfig):
    sim = config.sim_config()
    dataset, truth = simulate_dataset(sim, n_jobs=config.threads)
    write_csv(dataset, args.out)
    _write_json(_sidecar(args.out, ".truth.json"), {
        "seed": config.seed,
        "model": model_to_dict(sim.model),
        "config": config.raw,
    })
    atomic_write_frame(truth.grid_frame(dataset.ids), _sidecar(args.out, ".truth_grid.csv"),
                       index=False, float_format="%.17g")
    atomic_write_text(os.path.join(os.path.dirname(os.path.abspath(args.out)), "run_config.yaml"), config.dump())
    print(f"Simulated N={dataset.N}, {dataset.n_observations} observations, seed {config.seed} -> {args.out}")
    return EXIT_OK, dataset


def cmd_fit(args, config: RunConfig):
    dataset = _load_data(config, args.data)
    template = config.model(dataset.time_horizon, dataset.pooled_times())
    result = fit(dataset, template, config.fit_options())
    report = result.report()
    report["model"] = model_to_dict(result.psi_hat)
    report["config"] = config.raw
    _write_json(args.out, report)
    atomic_write_frame(result.trace, _sidecar(args.out, ".trace.csv"), index=False, float_format="%.17g")
    print(f"{result.method.upper()} fit: {result.reason}; report -> {args.out}")
    code = EXIT_OK if result.converged else EXIT_NOT_CONVERGED
    return code, dataset


def cmd_curve(args, config: RunConfig):
    with open(args.fit, "r", encoding="utf-8") as f:
        report = json.load(f)
    base = RunConfig.from_dict(report.get("config", {}))
    if args.config:
        base = RunConfig.from_dict({**base.raw, **config.raw})
    config = base.with_overrides(_overrides(args))
    dataset = _load_data(config, args.data)
    model = build_model(report["model"], dataset.time_horizon)
    section = config.section("curve")
    requested = [i for i in (args.ids or "").split(",") if i.strip()] or section.get("ids")
    ids = filter_individuals(dataset, requested, section.get("group"))
    curves = infer_curves(dataset, model, ids, config.curve_options(), seed=config.seed, n_jobs=config.threads)
    os.makedirs(args.out_dir, exist_ok=True)
    for individual_id, curve in curves:
        atomic_write_frame(curve.to_frame(), os.path.join(args.out_dir, f"curve_{individual_id}.csv"),
                           index=False, float_format="%.10g")
    atomic_write_text(os.path.join(args.out_dir, "run_config.yaml"), config.dump())
    print(f"Wrote {len(curves)} posterior curves to {args.out_dir}")
    return EXIT_OK, dataset


def cmd_bootstrap(args, config: RunConfig):
    dataset = _load_data(config, args.data)
    template = config.model(dataset.time_horizon, dataset.pooled_times())
    section = config.section("bootstrap")
    result = bootstrap(
        dataset, template, int(section.get("replicates", 200)), fitter=section.get("fitter", "auto"),
        seed=config.seed, opts=config.fit_options(), contrasts=config.contrasts(), n_jobs=config.threads,
        level=float(section.get("level", 0.95)), progress=bool(config.section("fit").get("progress", False)),
    )
    os.makedirs(args.out_dir, exist_ok=True)
    atomic_write_frame(result.replicates, os.path.join(args.out_dir, "replicates.csv"), float_format="%.10g")
    atomic_write_frame(result.ci, os.path.join(args.out_dir, "ci.csv"), index=False, float_format="%.10g")
    atomic_write_text(os.path.join(args.out_dir, "run_config.yaml"), config.dump())
    print(f"Bootstrap: {result.B - result.n_failed}/{result.B} replicates -> {args.out_dir}")
    return EXIT_OK, dataset


def cmd_study(args, config: RunConfig):
    summary = run_study(config, args.out_dir)
    print(f"Finished {summary['replications']} replications; results in {args.out_dir}")
    return EXIT_OK, None


def build_parser():
    parser = argparse.ArgumentParser(prog="app.main", description="Latent Gaussian process curve models")
    parser.add_argument("--log-level", default=None, help="overrides $LGP_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required)
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)

    p = sub.add_parser("simulate", help="simulate a study dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, help="number of individuals")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("fit", help="fit a model by EM or stochastic EM")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=("auto", "em", "stem"))
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--m0", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--sweeps", type=int)
    p.add_argument("--random-init", dest="random_init", action="store_true")
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("curve", help="posterior curves for selected individuals")
    common(p, config_required=False)
    p.add_argument("--fit", required=True, help="fit report JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--ids", default="", help="comma-separated ids (default: all)")
    p.add_argument("--group")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--samples", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--grid-points", dest="grid_points", type=int)
    p.add_argument("--alphas", help="comma-separated quantile levels")
    p.set_defaults(handler=cmd_curve)

    p = sub.add_parser("bootstrap", help="individual-level bootstrap confidence intervals")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--replicates", type=int)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--m0", type=int)
    p.add_argument("--m", type=int)
    p.set_defaults(handler=cmd_bootstrap)

    p = sub.add_parser("study", help="replicated simulate -> fit -> score study")
    common(p)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--replications", type=int)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--m0", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--n", type=int, help="number of individuals")
    p.set_defaults(handler=cmd_study)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    started = time.perf_counter()
    config, dataset = None, None
    try:
        config = load_config(args.config).with_overrides(_overrides(args))
        code, dataset = args.handler(args, config)
        status, error = ("ok" if code == EXIT_OK else "not_converged"), None
    except LGPError as e:
        logger.error("%s", e)
        print(f"ERROR: {e}", file=sys.stderr)
        code, status, error = EXIT_INVALID, "invalid", str(e)
    except OSError as e:
        logger.error("%s", e)
        print(f"ERROR: {e}", file=sys.stderr)
        code, status, error = EXIT_IO, "io_error", str(e)
    try:
        log_run(
            args.command,
            seed=config.seed if config is not None else None,
            n_individuals=dataset.N if dataset is not None else 0,
            n_observations=dataset.n_observations if dataset is not None else 0,
            elapsed=time.perf_counter() - started,
            status=status,
            error=error,
        )
    except OSError as e:
        logger.warning("could not append to the run log: %s", e)
    return code


if __name__ == "__main__":
    sys.exit(main())
