"""Experiment configuration files.

A configuration is a YAML mapping::

    model: {Q: [[1, 0], [0, 1]], B: [[-1, 1], [0, -1]]}   # or a path to such a file
    command: weaktype
    seed: 0
    workers: 1
    out: weaktype.tsv
    params: {alpha_grid: [100, 1000, 10000]}

Command-line flags override the file. Parameters are validated against the
command's schema before any computation starts.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .core import build_model
from .errors import ConfigParse
from .kernel import Polynomial, dirac_approx, gaussian_bump, indicator_ball

WORKERS_ENV = "OULAB_WORKERS"


@dataclass
class ExperimentConfig:
    model: dict
    command: str
    params: dict = field(default_factory=dict)
    seed: int = 0
    workers: int = 1
    out: str = None

    def resolved(self):
        """Plain-data view embedded in every output artifact."""
        return {"model": self.model, "command": self.command, "params": self.params,
                "seed": self.seed, "workers": self.workers}


def load_yaml(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigParse(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigParse(f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigParse(f"{path} must contain a mapping")
    return data


def _matrix(obj, name):
    try:
        M = np.array(obj, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigParse(f"{name} is not a numeric matrix") from exc
    if M.ndim != 2 or M.shape[0] != M.shape[1] or M.size == 0:
        raise ConfigParse(f"{name} must be a nonempty square matrix")
    return M


def read_model_spec(obj, base_dir="."):
    """Return ``{"Q": ..., "B": ...}`` as nested lists from inline data or a path."""
    if isinstance(obj, str):
        path = Path(obj)
        if not path.is_absolute():
            path = Path(base_dir) / path
        obj = load_yaml(path)
        obj = obj.get("model", obj)
    if not isinstance(obj, dict) or "Q" not in obj or "B" not in obj:
        raise ConfigParse("model needs matrices Q and B")
    Q = _matrix(obj["Q"], "Q")
    B = _matrix(obj["B"], "B")
    if Q.shape != B.shape:
        raise ConfigParse("Q and B must have the same shape")
    return {"Q": Q.tolist(), "B": B.tolist()}


def model_from_spec(spec):
    return build_model(np.array(spec["Q"]), np.array(spec["B"]))


def _int(value, name, lo=None):
    if isinstance(value, bool):
        raise ConfigParse(f"{name} must be an integer")
    try:
        out = int(value)
    except (TypeError, ValueError) as exc:
        raise ConfigParse(f"{name} must be an integer") from exc
    if out != value and not (isinstance(value, str) and str(out) == value.strip()):
        raise ConfigParse(f"{name} must be an integer")
    if lo is not None and out < lo:
        raise ConfigParse(f"{name} must be >= {lo}")
    return out


def default_workers():
    raw = os.environ.get(WORKERS_ENV)
    return 1 if raw is None else _int(raw, WORKERS_ENV, 1)


def resolve_config(path=None, command=None, seed=None, workers=None, out=None):
    """Merge a configuration file with command-line overrides."""
    data = load_yaml(path) if path else {}
    base = Path(path).parent if path else Path(".")
    unknown = set(data) - {"model", "command", "seed", "workers", "out", "params"}
    if unknown:
        raise ConfigParse(f"unknown configuration keys: {sorted(unknown)}")
    cmd = command or data.get("command")
    if not cmd:
        raise ConfigParse("no command given")
    if "model" not in data:
        raise ConfigParse("configuration has no model")
    params = data.get("params") or {}
    if not isinstance(params, dict):
        raise ConfigParse("params must be a mapping")
    seed = data.get("seed", 0) if seed is None else seed
    seed = _int(seed, "seed", 0)
    if seed >= 2 ** 64:
        raise ConfigParse("seed must fit in 64 bits")
    if workers is None:
        workers = data.get("workers", default_workers())
    return ExperimentConfig(model=read_model_spec(data["model"], base), command=cmd,
                            params=params, seed=seed,
                            workers=_int(workers, "workers", 1),
                            out=out if out is not None else data.get("out"))


# -- parameter schemas -------------------------------------------------------------

def as_float(name, lo=None, hi=None, strict_lo=False):
    def cast(v):
        if isinstance(v, bool):
            raise ConfigParse(f"{name} must be a number")
        try:
            x = float(v)
        except (TypeError, ValueError) as exc:
            raise ConfigParse(f"{name} must be a number") from exc
        if math.isnan(x):
            raise ConfigParse(f"{name} is NaN")
        if lo is not None and (x <= lo if strict_lo else x < lo):
            raise ConfigParse(f"{name} must be {'>' if strict_lo else '>='} {lo}")
        if hi is not None and x > hi:
            raise ConfigParse(f"{name} must be <= {hi}")
        return x
    return cast


def as_int(name, lo=None):
    return lambda v: _int(v, name, lo)


def as_list(item, name, min_len=1):
    def cast(v):
        if not isinstance(v, (list, tuple)):
            v = [v]
        if len(v) < min_len:
            raise ConfigParse(f"{name} needs at least {min_len} entries")
        return [item(x) for x in v]
    return cast


def as_choice(name, choices):
    def cast(v):
        if v not in choices:
            raise ConfigParse(f"{name} must be one of {list(choices)}")
        return v
    return cast


def as_bool(name):
    def cast(v):
        if not isinstance(v, bool):
            raise ConfigParse(f"{name} must be true or false")
        return v
    return cast


def as_points(name, n):
    def cast(v):
        try:
            P = np.array(v, dtype=float)
        except (TypeError, ValueError) as exc:
            raise ConfigParse(f"{name} must be a list of points") from exc
        if P.ndim == 1 and P.size == n:
            P = P[None]
        if P.ndim != 2 or P.shape[1] != n or P.shape[0] == 0 or not np.all(np.isfinite(P)):
            raise ConfigParse(f"{name} must be a nonempty list of {n}-vectors")
        return P.tolist()
    return cast


def as_optional(cast):
    return lambda v: None if v is None else cast(v)


def validate_params(params, schema, command):
    """Apply ``schema = {name: (cast, default)}`` and reject unknown keys."""
    unknown = set(params) - set(schema)
    if unknown:
        raise ConfigParse(f"unknown parameters for {command}: {sorted(unknown)}")
    out = {}
    for name, (cast, default) in schema.items():
        out[name] = cast(params[name]) if name in params else default
    return out


FUNCTION_KINDS = ("gaussian_bump", "dirac_approx", "indicator_ball", "polynomial",
                  "constant")


def as_function(name, n):
    """Validate a test-function description (built later by :func:`build_function`)."""
    def cast(v):
        if not isinstance(v, dict) or v.get("kind") not in FUNCTION_KINDS:
            raise ConfigParse(f"{name}.kind must be one of {list(FUNCTION_KINDS)}")
        kind = v["kind"]
        allowed = {"gaussian_bump": {"center", "width", "scale"},
                   "dirac_approx": {"center", "width"},
                   "indicator_ball": {"center", "radius"},
                   "polynomial": {"terms"},
                   "constant": {"value"}}[kind] | {"kind"}
        extra = set(v) - allowed
        if extra:
            raise ConfigParse(f"{name}: unexpected keys {sorted(extra)}")
        out = {"kind": kind}
        if "center" in allowed:
            out["center"] = as_points(f"{name}.center", n)(v.get("center", [0.0] * n))[0]
        if "width" in allowed:
            out["width"] = as_float(f"{name}.width", 0, strict_lo=True)(v.get("width", 1.0))
        if kind == "gaussian_bump":
            out["scale"] = as_float(f"{name}.scale", 0, strict_lo=True)(v.get("scale", 1.0))
        if kind == "indicator_ball":
            out["radius"] = as_float(f"{name}.radius", 0, strict_lo=True)(
                v.get("radius", 1.0))
        if kind == "constant":
            out["value"] = as_float(f"{name}.value")(v.get("value", 1.0))
        if kind == "polynomial":
            terms = v.get("terms")
            if not isinstance(terms, dict) or not terms:
                raise ConfigParse(f"{name}.terms must map 'a1,...,an' to coefficients")
            parsed = {}
            for key, c in terms.items():
                idx = tuple(_int(k, f"{name}.terms", 0) for k in str(key).split(","))
                if len(idx) != n:
                    raise ConfigParse(f"{name}.terms key {key!r} needs {n} exponents")
                parsed[",".join(map(str, idx))] = as_float(f"{name}.terms")(c)
            try:
                Polynomial({tuple(map(int, k.split(","))): c for k, c in parsed.items()})
            except ValueError as exc:
                raise ConfigParse(f"{name}: {exc}") from exc
            out["terms"] = parsed
        return out
    return cast


def build_function(model, spec):
    kind = spec["kind"]
    if kind == "gaussian_bump":
        return gaussian_bump(spec["center"], spec["width"], spec["scale"])
    if kind == "dirac_approx":
        return dirac_approx(model, spec["center"], spec["width"])
    if kind == "indicator_ball":
        return indicator_ball(spec["center"], spec["radius"])
    if kind == "constant":
        return Polynomial.constant(spec["value"], model.n)
    return Polynomial({tuple(map(int, k.split(","))): c for k, c in spec["terms"].items()})
