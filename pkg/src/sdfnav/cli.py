"""Command line entry point: run episodes, score saved map bundles, export level sets.

Exit codes: 0 ok, 1 configuration error, 2 training divergence.
SDFNAV_THREADS sets how many episodes run side by side when several seeds
are given; each episode itself stays single-threaded so results do not
depend on it.
"""

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2
THREADS_ENV = "SDFNAV_THREADS"
_BLAS_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _pin_blas():
    # must happen before numpy loads its BLAS
    for var in _BLAS_VARS:
        os.environ.setdefault(var, "1")


def n_workers():
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise SystemExit(f"{THREADS_ENV} must be an integer, got {raw!r}")
    return max(1, n)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="sdfnav", description="Continual neural SDF mapping with SCP navigation.")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run a closed-loop episode and export its artifacts")
    r.add_argument("--config", required=True, help="episode YAML (world, seed, n_scans, mapper, planner, ...)")
    r.add_argument("--mode", choices=("ours", "fine_tune", "batched"))
    r.add_argument("--seed", type=int, nargs="+", help="one or more seeds; several run in parallel")
    r.add_argument("--out", help="output directory")
    r.add_argument("--no-figures", action="store_true")
    r.add_argument("--quiet", action="store_true")

    m = sub.add_parser("metrics", help="score a saved map bundle against a world")
    m.add_argument("--bundle", required=True)
    m.add_argument("--world", required=True, help="world YAML or builtin name")

    e = sub.add_parser("export-levelset", help="extract the zero level set of a saved bundle")
    e.add_argument("--bundle", required=True)
    e.add_argument("--res", type=int, required=True, help="grid cells along the longest side")
    e.add_argument("--out")
    return p


def _run_one(cfg, outdir, figures, quiet):
    from .bench import export_artifacts, run_episode

    def progress(k, mapper):
        if not quiet and k % 25 == 0:
            print(f"[seed {cfg.seed}] scan {k}/{cfg.n_scans}  maps {mapper.n_cached}  steps {mapper.global_step}",
                  file=sys.stderr, flush=True)

    report = run_episode(cfg, progress)
    export_artifacts(report, outdir, figures=figures)
    return cfg.seed, report.metrics


def cmd_run(args):
    from .bench import EpisodeConfig

    cfg = EpisodeConfig.from_file(args.config, mode=args.mode)
    seeds = args.seed or [cfg.seed]
    base = Path(args.out or cfg.out or f"runs/{Path(str(cfg.world)).stem}_{cfg.mode}")
    jobs = []
    for s in seeds:
        c = EpisodeConfig(**dict(cfg.to_dict(), seed=s))
        jobs.append((c, base if len(seeds) == 1 else base / f"seed_{s}"))
    workers = min(n_workers(), len(jobs))
    if workers == 1:
        results = [_run_one(c, o, not args.no_figures, args.quiet) for c, o in jobs]
    else:
        with ProcessPoolExecutor(workers) as pool:
            futs = [pool.submit(_run_one, c, o, not args.no_figures, args.quiet) for c, o in jobs]
            results = [f.result() for f in futs]
    for seed, metrics in results:
        keys = ("n_local_maps", "mae", "chamfer", "eikonal_rms", "collisions", "coverage")
        print(f"seed {seed}: " + "  ".join(f"{k}={metrics[k]:.4g}" for k in keys if k in metrics))
    print(f"artifacts in {base}")
    return EXIT_OK


def cmd_metrics(args):
    from .bench import bundle_metrics

    for k, v in bundle_metrics(args.bundle, args.world).items():
        print(f"{k},{v}")
    return EXIT_OK


def cmd_export(args):
    from .bench import ConfigError, export_levelset

    if args.res < 2:
        raise ConfigError("--res must be at least 2")
    print(export_levelset(args.bundle, args.res, args.out))
    return EXIT_OK


def main(argv=None):
    _pin_blas()
    args = build_parser().parse_args(argv)
    from .bench import ConfigError
    from .network import DivergenceError

    handler = {"run": cmd_run, "metrics": cmd_metrics, "export-levelset": cmd_export}[args.cmd]
    try:
        return handler(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(f"training diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
