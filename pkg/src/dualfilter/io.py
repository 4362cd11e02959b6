"""Config loading and CSV/JSON writers.

Configs are JSON objects.  Matrices are nested lists.  A linear model config
has keys d, m, T, tau, A (one d x d matrix per lag, or per time and lag), C,
Q, R, mu0, Sigma0; an HMM config has d, m, A, C, mu.
"""
import csv
import json
from pathlib import Path

import numpy as np

from .hmm import Hmm
from .lgssm import LinearGaussianModel
from ._numerics import ModelError


class ConfigError(ValueError):
    """The experiment or model config is malformed."""


def load_json(path):
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def linear_model_from_dict(data):
    missing = {"T", "A", "C", "Q", "R", "mu0", "Sigma0"} - set(data)
    if missing:
        raise ConfigError(f"linear model config is missing {sorted(missing)}")
    model = LinearGaussianModel(A=data["A"], C=data["C"], Q=data["Q"], R=data["R"], mu0=data["mu0"],
                                Sigma0=data["Sigma0"], T=data["T"])
    for key, val in (("d", model.d), ("m", model.m)):
        if key in data and int(data[key]) != val:
            raise ModelError(f"declared {key}={data[key]} but the matrices imply {val}")
    if "tau" in data and not 1 <= int(data["tau"]) <= model.A.shape[-3]:
        raise ModelError(f"tau={data['tau']} inconsistent with {model.A.shape[-3]} lag matrices")
    return model


def linear_model_to_dict(model):
    return {"d": model.d, "m": model.m, "T": model.T, "tau": model.tau, "A": model.A.tolist(),
            "C": model.C.tolist(), "Q": model.Q.tolist(), "R": model.R.tolist(), "mu0": model.mu0.tolist(),
            "Sigma0": model.Sigma0.tolist()}


def hmm_from_dict(data):
    try:
        return Hmm.from_dict(data)
    except KeyError as exc:
        raise ConfigError(f"HMM config is missing {exc}") from exc


def save_hmm(hmm, path):
    Path(path).write_text(json.dumps(hmm.to_dict(), indent=1) + "\n", encoding="utf-8")


def load_hmm(path):
    return hmm_from_dict(load_json(path))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows):
    """Write rows with a header; floats use the shortest round-trip repr."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return Path(path)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True, default=_jsonable) + "\n", encoding="utf-8")
    return Path(path)


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def write_paths_csv(path, z_paths):
    """Observation paths, one per row: path, t, z."""
    rows = [(i, t + 1, int(v)) for i, p in enumerate(z_paths) for t, v in enumerate(p)]
    return write_csv(path, ["path", "t", "z"], rows)


def read_paths_csv(path):
    paths = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            paths.setdefault(int(row["path"]), []).append((int(row["t"]), int(row["z"])))
    return [np.array([z for _, z in sorted(v)], dtype=np.int64) for _, v in sorted(paths.items())]


def heatmap_rows(H):
    """Tidy (query_step, time_index, magnitude) rows of a lower-triangular heatmap, 1-based."""
    T = H.shape[0]
    return [(s + 1, t + 1, float(H[s, t])) for s in range(T) for t in range(s + 1)]
