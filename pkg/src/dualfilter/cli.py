"""Command line entry point: ``dualfilter <experiment> [--config F] [--seed N] [--out DIR] [--format csv|json]``.

On success the manifest summary is printed as JSON and the exit code is 0.
On failure a JSON object ``{"error": ..., "message": ..., "details": ...}``
goes to stderr and the exit code is nonzero.  The BLAS thread count can be
capped with ``DUALFILTER_THREADS``.
"""
import argparse
import json
import os
import sys

THREADS_ENV = "DUALFILTER_THREADS"


def build_parser():
    from .experiments import RUNNERS

    p = argparse.ArgumentParser(prog="dualfilter", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "two-cycle": "two-cycle HMM: dual-filter weights, heatmap and losses",
        "dhat-sweep": "Baum-Welch fits over model sizes d_hat and their dual-filter losses",
        "perturb": "weight patterns and losses under transition/emission perturbation",
        "bench": "runtime scaling of the linear dual filter and the augmented Kalman filter",
        "lgssm-check": "duality and Kalman agreement on random linear models",
    }
    for name in RUNNERS:
        sp = sub.add_parser(name, help=helps[name])
        sp.add_argument("--config", help="JSON file overriding the experiment defaults")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--out", default=f"out/{name}", help="output directory (default: %(default)s)")
        sp.add_argument("--format", choices=("csv", "json"), default="csv", help="data file format")
    return p


def _fail(kind, message, details=None, code=1):
    json.dump({"error": kind, "message": message, "details": details or {}}, sys.stderr, default=str)
    sys.stderr.write("\n")
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        return _fail("usage", "invalid command line arguments", code=2)

    from .experiments import RUNNERS, ExperimentError, resolve_config

    threads = os.environ.get(THREADS_ENV)
    limiter = None
    try:
        if threads is not None:
            n = int(threads) if threads.strip().isdigit() else 0
            if n < 1:
                raise ValueError(f"{THREADS_ENV} must be a positive integer, got {threads!r}")
            from threadpoolctl import threadpool_limits

            limiter = threadpool_limits(limits=n)
        overrides = {} if args.seed is None else {"seed": args.seed}
        if args.seed is not None and args.seed < 0:
            raise ValueError("seed must be nonnegative")
        cfg = resolve_config(args.command, overrides, args.config)
        manifest = RUNNERS[args.command](cfg, args.out, args.format)
    except ExperimentError as exc:
        return _fail("experiment", str(exc), exc.details)
    except (ValueError, OSError) as exc:
        return _fail(type(exc).__name__, str(exc))
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    json.dump({"experiment": manifest["experiment"], "out": args.out, "summary": manifest["summary"]}, sys.stdout,
              indent=1, default=str)
    sys.stdout.write("\n")
    if args.command == "lgssm-check" and not manifest["summary"]["passed"]:
        return _fail("check_failed", "linear checks exceeded their tolerances", manifest["summary"]["worst"])
    return 0


if __name__ == "__main__":
    sys.exit(main())
