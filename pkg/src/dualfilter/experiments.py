"""Experiment runners behind the command line interface.

Each runner takes a config dict (defaults filled in from ``DEFAULTS``), an
output directory and a file format, writes its data files plus a
``manifest.json`` and returns the manifest.  Data files depend only on the
config and seed, so re-running reproduces them byte for byte; the manifest
additionally records versions and wall-clock time.
"""
import math
import platform
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .dual_hmm import dual_filter_path, heatmap, path_predictor, query_weights_path
from .hmm import (baum_welch, cross_entropy, entropy_benchmark, filter_predictor, forward_filter, perturb,
                  simulate_hmm, two_cycle)
from .io import heatmap_rows, hmm_from_dict, load_json, save_hmm, write_csv, write_json
from .lgssm import (bench_complexity, dual_cost, dual_filter_solve, dual_memory_profile, fit_slopes,
                    kalman_augmented, mse_exact, NonConvergenceError, predict_linear, random_model, simulate)

DEFAULTS = {
    "two-cycle": {"d": 16, "q": 4, "T": 64, "query_step": 54, "n_eval": 200, "tol": 1e-8, "max_layers": 100,
                  "damping": 1.0, "hmm": None, "long_T": 4096, "n_long": 4},
    "dhat-sweep": {"d": 16, "q": 4, "T": 64, "d_hats": [8, 16, 32], "n_train": 200, "n_eval": 200, "iters": 200,
                   "restarts": 5, "tol": 1e-8, "max_layers": 100},
    "perturb": {"d": 16, "q": 4, "T": 64, "query_step": 54, "eps": [0.01, 0.1, 0.2],
                "targets": ["transition", "emission"], "n_eval": 200, "tol": 1e-8, "max_layers": 100,
                "damping": 1.0},
    "bench": {"dims": [32], "kalman_dims": [4], "horizons": [64, 128, 256, 512, 1024], "repeats": 3,
              "memory_d": 8},
    "lgssm-check": {"n_instances": 100, "max_d": 4, "max_m": 3, "max_T": 12},
}


class ExperimentError(RuntimeError):
    """An experiment could not produce its outputs; ``details`` is JSON serialisable."""

    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = details or {}


def resolve_config(name, config=None, path=None):
    """Defaults for ``name`` updated by the JSON file at ``path`` and then by ``config``."""
    if name not in DEFAULTS:
        raise ValueError(f"unknown experiment {name!r}")
    cfg = dict(DEFAULTS[name])
    extra = dict(load_json(path)) if path else {}
    extra.update(config or {})
    unknown = set(extra) - set(cfg) - {"seed"}
    if unknown:
        raise ValueError(f"unknown config keys for {name}: {sorted(unknown)}")
    cfg.update(extra)
    cfg.setdefault("seed", 0)
    return cfg


def child_seeds(seed, n):
    """``n`` independent integer seeds derived from a master seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(int(seed)).spawn(n)]


def _manifest(name, cfg, out, files, summary, started):
    manifest = {
        "experiment": name,
        "config": cfg,
        "seed": cfg["seed"],
        "files": sorted(str(Path(f).relative_to(out)) for f in files),
        "summary": summary,
        "versions": {"dualfilter": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "wall_clock_seconds": time.perf_counter() - started,
    }
    write_json(Path(out) / "manifest.json", manifest)
    return manifest


def _write_table(out, stem, header, rows, fmt):
    if fmt == "json":
        return write_json(Path(out) / f"{stem}.json", {"columns": header, "rows": [list(r) for r in rows]})
    return write_csv(Path(out) / f"{stem}.csv", header, rows)


def event_columns(z):
    """Mask over weight columns: column t (the weight on Z_{t+1}) follows an observed Z_t = 1."""
    z = np.asarray(z)
    ev = np.zeros(z.size, dtype=bool)
    ev[1:] = z[:-1] == 1
    return ev


def weight_pattern(H, z):
    """Summaries of a causal heatmap against the event-column mask.

    ``off_event_fraction`` is the share of total weight outside event
    columns; ``event_enrichment`` is the mean weight per event cell over the
    mean weight per other cell (cells on or below the diagonal only).
    """
    T = H.shape[0]
    ev = event_columns(z)
    low = np.tril(np.ones((T, T), dtype=bool))
    total = H.sum()
    on, off = H[low & ev[None]], H[low & ~ev[None]]
    return {
        "off_event_fraction": float(off.sum() / total) if total > 0 else 0.0,
        # undefined (None) when all weight sits on event columns
        "event_enrichment": float(on.mean() / off.mean()) if off.size and off.mean() > 0 else None,
        "max_above_diagonal": float(np.abs(np.triu(H, 1)).max()) if T > 1 else 0.0,
    }


def two_cycle_point(hmm, cfg, seeds, out, fmt="csv"):
    """Simulate one path, run the path-local dual filter and write its outputs.

    Shared by the two-cycle and perturbation experiments so that an
    unperturbed model yields identical files in both.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    T = int(cfg["T"])
    x, z = simulate_hmm(hmm, T, seed=seeds[0])
    zo = z[:T]
    state = dual_filter_path(hmm, zo, tol=cfg["tol"], max_layers=cfg["max_layers"], damping=cfg["damping"])
    if not state.converged:
        raise ExperimentError("layer iteration did not converge",
                              {"iterations": state.iteration, "residual": state.residual,
                               "history": state.history})
    pi = forward_filter(hmm, zo).pi
    H = heatmap(query_weights_path(hmm, state.rho, zo))
    s = int(cfg["query_step"])
    if not 1 <= s <= T:
        raise ExperimentError(f"query_step {s} outside 1..{T}")
    _, eval_paths = simulate_hmm(hmm, T, seed=seeds[1], n_paths=int(cfg["n_eval"]))
    loss_dual = cross_entropy(hmm, path_predictor(hmm, tol=cfg["tol"], max_layers=cfg["max_layers"]), T,
                              paths=eval_paths)
    loss_opt = entropy_benchmark(hmm, T, paths=eval_paths)
    files = []
    if fmt == "json":
        files.append(write_json(out / "heatmap.json", {"query_step": list(range(1, T + 1)), "matrix": H}))
    else:
        files.append(write_csv(out / "heatmap.csv", ["query_step", "time_index", "magnitude"], heatmap_rows(H)))
    files.append(_write_table(out, "slice", ["time_index", "magnitude", "z"],
                              [(t + 1, float(H[s - 1, t]), int(zo[t])) for t in range(s)], fmt))
    files.append(_write_table(out, "path", ["t", "x", "z"], [(t, int(x[t]), int(z[t])) for t in range(T + 1)], fmt))
    files.append(_write_table(out, "filter", ["t", "state", "dual", "forward"],
                              [(t + 1, i, float(state.rho[t, i]), float(pi[t, i]))
                               for t in range(T) for i in range(hmm.d)], fmt))
    files.append(_write_table(out, "losses", ["method", "loss"],
                              [("dual_filter", loss_dual), ("optimal", loss_opt)], fmt))
    summary = {
        "layers": state.iteration,
        "layer_residual": state.residual,
        "singular_steps": state.rank_deficient,
        "max_filter_error": float(np.abs(state.rho - pi).max()),
        "loss_dual": loss_dual,
        "loss_optimal": loss_opt,
        **weight_pattern(H, zo),
    }
    return files, summary


def run_two_cycle(cfg, out, fmt="csv"):
    """Two-cycle HMM (or the HMM in ``cfg['hmm']``): heatmap, slice, filter and losses."""
    started = time.perf_counter()
    cfg = resolve_config("two-cycle", cfg)
    hmm = _hmm_for(cfg)
    seeds = child_seeds(cfg["seed"], 3)
    files, summary = two_cycle_point(hmm, cfg, seeds[:2], out, fmt)
    if cfg["n_long"] > 0:
        # stationary loss estimate: long paths wash out the start-up transient of a length-T window
        L = int(cfg["long_T"])
        _, long_paths = simulate_hmm(hmm, L, seed=seeds[2], n_paths=int(cfg["n_long"]))
        predictor = path_predictor(hmm, tol=cfg["tol"], max_layers=cfg["max_layers"])
        summary["loss_dual_long"] = cross_entropy(hmm, predictor, L, paths=long_paths)
        summary["loss_optimal_long"] = entropy_benchmark(hmm, L, paths=long_paths)
    if cfg["hmm"] is None:
        summary["loss_asymptotic"] = math.log(2) / (0.5 * cfg["d"] + 0.5 * (cfg["q"] + 1))
    return _manifest("two-cycle", cfg, Path(out), files, summary, started)


def _hmm_for(cfg):
    spec = cfg.get("hmm")
    if spec is None:
        return two_cycle(int(cfg["d"]), int(cfg["q"]))
    return hmm_from_dict(load_json(spec) if isinstance(spec, str) else spec)


def run_perturbation(cfg, out, fmt="csv"):
    """Perturbed two-cycle models: one two-cycle run per (target, eps), common seeds."""
    started = time.perf_counter()
    cfg = resolve_config("perturb", cfg)
    out = Path(out)
    base = two_cycle(int(cfg["d"]), int(cfg["q"]))
    seeds = child_seeds(cfg["seed"], 2)
    files, summary, loss_rows = [], {}, []
    for target in cfg["targets"]:
        for eps in cfg["eps"]:
            key = f"{target}_eps{eps:g}"
            point = dict(cfg, hmm=None)
            f, s = two_cycle_point(perturb(base, eps, target), point, seeds, out / key, fmt)
            files += f
            summary[key] = s
            loss_rows += [("dual_filter", cfg["d"], eps, s["loss_dual"], target),
                          ("optimal", cfg["d"], eps, s["loss_optimal"], target)]
    files.append(_write_table(out, "losses", ["method", "d_hat", "epsilon", "loss", "target"], loss_rows, fmt))
    return _manifest("perturb", cfg, out, files, summary, started)


def run_dhat_sweep(cfg, out, fmt="csv"):
    """Baum-Welch fits of d_hat-state models and the losses of their dual filters."""
    started = time.perf_counter()
    cfg = resolve_config("dhat-sweep", cfg)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    truth = two_cycle(int(cfg["d"]), int(cfg["q"]))
    T = int(cfg["T"])
    s_train, s_eval, *s_fit = child_seeds(cfg["seed"], 2 + len(cfg["d_hats"]))
    _, train = simulate_hmm(truth, T, seed=s_train, n_paths=int(cfg["n_train"]))
    _, evals = simulate_hmm(truth, T, seed=s_eval, n_paths=int(cfg["n_eval"]))
    loss_opt = entropy_benchmark(truth, T, paths=evals)
    rows, ll_rows, summary, files = [], [], {"loss_optimal": loss_opt, "points": {}}, []
    for d_hat, seed in zip(cfg["d_hats"], s_fit):
        try:
            fit = baum_welch(train, int(d_hat), truth.m, iters=int(cfg["iters"]), seed=seed,
                             restarts=int(cfg["restarts"]))
        except (ValueError, FloatingPointError) as exc:
            rows.append((d_hat, math.nan, math.nan, loss_opt))
            summary["points"][str(d_hat)] = {"error": str(exc)}
            continue
        loss_dual = cross_entropy(truth, path_predictor(fit.hmm, tol=cfg["tol"], max_layers=cfg["max_layers"]), T,
                                  paths=evals)
        loss_fit = cross_entropy(truth, filter_predictor(fit.hmm), T, paths=evals)
        rows.append((d_hat, loss_dual, loss_fit, loss_opt))
        ll_rows += [(d_hat, i, float(v)) for i, v in enumerate(fit.loglik)]
        steps = np.concatenate([np.diff(r) for r in fit.restart_logliks])  # every restart, not just the best
        summary["points"][str(d_hat)] = {
            "loss_dual": loss_dual, "loss_fitted_filter": loss_fit,
            "relative_gap": loss_dual / loss_opt - 1.0,
            "loglik_min_step": float(steps.min()) if steps.size else 0.0,
            "restart_final_logliks": [float(r[-1]) for r in fit.restart_logliks],
        }
        path = out / f"fitted_dhat{d_hat}.json"
        save_hmm(fit.hmm, path)
        files.append(path)
    files.append(_write_table(out, "dhat_sweep", ["d_hat", "loss_dual", "loss_fitted_filter", "loss_optimal"],
                              rows, fmt))
    files.append(_write_table(out, "loglik", ["d_hat", "iteration", "loglik"], ll_rows, fmt))
    return _manifest("dhat-sweep", cfg, out, files, summary, started)


def run_linear_bench(cfg, out, fmt="csv"):
    """Runtime scaling of the dual filter against the augmented Kalman filter."""
    started = time.perf_counter()
    cfg = resolve_config("bench", cfg)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = bench_complexity(cfg["dims"], cfg["horizons"], repeats=int(cfg["repeats"]), seed=cfg["seed"],
                            kalman_dims=cfg["kalman_dims"])
    slopes = fit_slopes(rows, by="T")
    slope_rows = [(meth, d, sl, se, sl - 1.96 * se, sl + 1.96 * se) for (meth, d), (sl, se) in sorted(slopes.items())]
    peaks = dual_memory_profile(int(cfg["memory_d"]), cfg["horizons"], seed=cfg["seed"])
    mem_slope = float(np.polyfit(np.log(cfg["horizons"]), np.log(peaks), 1)[0])
    files = [
        _write_table(out, "bench", ["method", "d", "T", "seconds"], [(r["method"], r["d"], r["T"], r["seconds"])
                                                                    for r in rows], fmt),
        _write_table(out, "slopes", ["method", "d", "slope", "stderr", "ci_low", "ci_high"], slope_rows, fmt),
        _write_table(out, "memory", ["d", "T", "peak_bytes"],
                     [(cfg["memory_d"], T, p) for T, p in zip(cfg["horizons"], peaks)], fmt),
    ]
    summary = {"slopes_T": {f"{m}@d={d}": sl for (m, d), (sl, _) in slopes.items()}, "memory_slope_T": mem_slope}
    if len(cfg["dims"]) > 1:
        summary["slopes_d"] = {f"{m}@T={T}": sl for (m, T), (sl, _) in fit_slopes(rows, by="d").items()}
    return _manifest("bench", cfg, out, files, summary, started)


def check_linear_instance(model, rng, fp_tol=1e-12):
    """Duality, Kalman and solver-agreement errors for one random model."""
    f = rng.standard_normal(model.d)
    u = rng.standard_normal((model.T, model.m))
    mse = mse_exact(model, u, f)
    duality = abs(2.0 * dual_cost(model, u, f) - mse) / mse
    direct = dual_filter_solve(model, f, method="direct")
    fixed = dual_filter_solve(model, f, method="fixed_point", tol=fp_tol)
    z = simulate(model, seed=int(rng.integers(2**31))).z[: model.T]
    pred = predict_linear(model, direct, z)
    ref = kalman_augmented(model, z, f, weights=False)
    return {
        "duality_rel": duality,
        "mean_rel": abs(pred.mean - ref.mean) / max(abs(ref.mean), 1e-300),
        "var_rel": abs(pred.variance - ref.variance) / ref.variance,
        "solver_diff": float(np.abs(fixed.u - direct.u).max()),
    }


def random_linear_instances(seed, n, max_d=4, max_m=3, max_T=12):
    """Random well-conditioned models with tau cycling through 1, 2 and T.

    The weak observation gain and inflated R keep the damped layer iteration
    contractive, so the fixed-point solver can be compared with the direct one.
    """
    rng = np.random.default_rng(seed)
    for i in range(n):
        d = int(rng.integers(1, max_d + 1))
        m = int(rng.integers(1, max_m + 1))
        T = int(rng.integers(2, max_T + 1))
        tau = (1, 2, T)[i % 3]
        yield random_model(rng, d, m, T, tau, scale=0.8, obs_gain=0.3, noise=2.0), rng


LINEAR_TOLERANCES = {"duality_rel": 1e-10, "mean_rel": 1e-8, "var_rel": 1e-8, "solver_diff": 1e-10}


def run_lgssm_check(cfg, out, fmt="csv"):
    """Duality, Kalman agreement and solver agreement on random linear models."""
    started = time.perf_counter()
    cfg = resolve_config("lgssm-check", cfg)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (model, rng) in enumerate(random_linear_instances(cfg["seed"], int(cfg["n_instances"]), cfg["max_d"],
                                                              cfg["max_m"], cfg["max_T"])):
        try:
            r = check_linear_instance(model, rng)
        except NonConvergenceError as exc:
            raise ExperimentError(f"instance {i}: {exc}", {"instance": i, "residual": exc.residual}) from exc
        rows.append((i, model.d, model.m, model.T, model.tau, *(r[k] for k in LINEAR_TOLERANCES)))
    arr = np.array([r[5:] for r in rows])
    worst = {k: float(arr[:, j].max()) for j, k in enumerate(LINEAR_TOLERANCES)}
    summary = {"worst": worst, "tolerances": LINEAR_TOLERANCES,
               "passed": all(worst[k] <= tol for k, tol in LINEAR_TOLERANCES.items())}
    files = [_write_table(out, "lgssm_check", ["instance", "d", "m", "T", "tau", *LINEAR_TOLERANCES], rows, fmt)]
    return _manifest("lgssm-check", cfg, out, files, summary, started)


RUNNERS = {
    "two-cycle": run_two_cycle,
    "dhat-sweep": run_dhat_sweep,
    "perturb": run_perturbation,
    "bench": run_linear_bench,
    "lgssm-check": run_lgssm_check,
}
