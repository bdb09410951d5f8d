"""Checkpoint, config and report files.

Everything is JSON with sorted keys. Non-finite floats are written as the
strings ``"inf"``, ``"-inf"`` and ``"nan"`` so the files stay strict JSON;
finite floats use the shortest round-tripping repr, which makes
save -> load -> save byte-identical.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, fields
from pathlib import Path

import jsonschema
import numpy as np

from ..attack import PgdConfig
from ..cegis import TrainConfig
from ..losses import LossWeights
from ..verifier import Budget
from .scenarios import Bundle, Scenario, build, example1_bundle, get_scenario

CHECKPOINT_FORMAT = "neurolyap-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Malformed config; ``key`` names the offending entry."""

    def __init__(self, key: str, msg: str):
        super().__init__(f"config key {key!r}: {msg}")
        self.key = key


# -- JSON encoding ----------------------------------------------------------------


def to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def dumps(obj) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps(obj))


def read_json(path):
    return json.loads(Path(path).read_text())


def as_float(x) -> float:
    return float(x)  # float("inf") / float("nan") accept the string forms


def as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


# -- CSV ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def write_csv(path, header, rows):
    Path(path).write_text(csv_text(header, rows))


def read_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]])


# -- config -------------------------------------------------------------------------


def _props_from(dc, skip=()):
    types = {int: "integer", float: "number", str: "string", bool: "boolean"}
    out = {}
    for f in fields(dc):
        if f.name in skip:
            continue
        default = getattr(dc(), f.name)
        t = types.get(type(default), None)
        spec = {"default": to_jsonable(default)}
        if t == "number":
            spec["type"] = ["number", "string"] if not math.isfinite(default) else "number"
        elif t:
            spec["type"] = t
        elif default is None:
            spec["type"] = ["number", "null"]
        out[f.name] = spec
    return out


def _section(props):
    return {"type": "object", "properties": props, "additionalProperties": False, "default": {}}


_int_list = {"type": "array", "items": {"type": "integer", "minimum": 1}}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "neurolyap run configuration",
    "type": "object",
    "required": ["seed"],
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "scenario": _section({
            "box": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
            "kappa": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "torque": {"type": ["string", "number"]},
            "lyapunov": {"enum": ["nn", "quadratic"]},
            "lyapunov_hidden": _int_list,
            "controller_hidden": _int_list,
            "observer_hidden": _int_list,
            "plant_params": {"type": "object", "additionalProperties": {"type": "number"}},
        }),
        "lyapunov_scale": {"type": "number", "exclusiveMinimum": 0, "default": 0.1},
        "weights": _section({k: {"type": "number", "minimum": 0, "default": v}
                             for k, v in (("c0", 1.0), ("c1", 1.0), ("c2", 1e-4), ("c3", 1.0))}),
        "train": _section(_props_from(TrainConfig, skip=("pgd", "seed"))),
        "pgd": _section(_props_from(PgdConfig)),
        "verify": _section({
            **_props_from(Budget),
            "lam": {"type": "number", "exclusiveMinimum": 1, "default": 1.5},
            "tol_frac": {"type": "number", "exclusiveMinimum": 0, "default": 1e-3},
            "mc_samples": {"type": "integer", "minimum": 1000, "default": 100000},
        }),
    },
}


def _fill_defaults(schema, value):
    if schema.get("type") != "object" or not isinstance(value, dict):
        return value
    out = dict(value)
    for k, sub in schema.get("properties", {}).items():
        if k not in out and "default" in sub:
            out[k] = json.loads(json.dumps(sub["default"]))
        if k in out:
            out[k] = _fill_defaults(sub, out[k])
    return out


def _error_key(err) -> str:
    if err.validator == "additionalProperties":
        extra = set(err.instance) - set(err.schema.get("properties", {}))
        path = list(err.absolute_path) + sorted(extra)[:1]
    elif err.validator == "required":
        path = list(err.absolute_path) + [err.message.split("'")[1]]
    else:
        path = list(err.absolute_path)
    return ".".join(str(p) for p in path) or "<root>"


def load_config(src) -> dict:
    """Validate a config (path or dict) and fill in every default."""
    if isinstance(src, (str, Path)):
        try:
            raw = read_json(src)
        except json.JSONDecodeError as e:
            raise ConfigError("<file>", f"not valid JSON ({e})") from None
    else:
        raw = src
    v = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errs = sorted(v.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errs:
        e = errs[0]
        raise ConfigError(_error_key(e), e.message)
    cfg = _fill_defaults(CONFIG_SCHEMA, raw)
    try:
        LossWeights(**cfg["weights"])
        train_config(cfg)
        budget_from(cfg)
    except (TypeError, ValueError) as e:
        raise ConfigError("<values>", str(e)) from None
    return cfg


def default_config(seed: int = 0) -> dict:
    return load_config({"seed": seed})


def recipe_path(scenario: str) -> Path | None:
    """Shipped training config for ``scenario``, if there is one."""
    p = Path(__file__).resolve().parent.parent / "configs" / f"{scenario}.json"
    return p if p.is_file() else None


def recipe(scenario: str, seed: int = 0) -> dict:
    """Shipped config for ``scenario`` (defaults when none ships)."""
    p = recipe_path(scenario)
    return load_config(p) if p is not None else default_config(seed)


def train_config(cfg: dict) -> TrainConfig:
    t = {k: (as_float(v) if isinstance(v, str) and k.startswith("gamma") else v) for k, v in cfg["train"].items()}
    return TrainConfig(**t, seed=cfg["seed"], pgd=PgdConfig(**cfg["pgd"]))


def budget_from(cfg: dict) -> Budget:
    b = {k: v for k, v in cfg["verify"].items() if k in {f.name for f in fields(Budget)}}
    b["time_limit"] = as_float(b["time_limit"])
    return Budget(**b)


def scenario_from(name: str, cfg: dict) -> Scenario:
    return get_scenario(name).with_overrides(**cfg.get("scenario", {}))


# -- checkpoints ------------------------------------------------------------------------


def bundle_to_dict(bundle: Bundle, seed: int, lyapunov_scale: float = 0.1, history=None) -> dict:
    sc = bundle.scenario
    params = {**bundle.system.params(), **bundle.V.params()}
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "builder": "example1" if sc.name == "example1" else "scenario",
        "scenario": asdict(sc),
        "seed": int(seed),
        "lyapunov_scale": float(lyapunov_scale),
        "box": {"lo": bundle.lo, "up": bundle.up},
        "weights": asdict(bundle.weights),
        "rho": float(bundle.rho),
        "params": {k: np.asarray(v, float) for k, v in params.items()},
        "meta": bundle.meta,
        "history": history or [],
    }


def bundle_from_dict(d: dict) -> Bundle:
    if d.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a checkpoint file")
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
    if d["builder"] == "example1":
        b = example1_bundle()
    else:
        sc = Scenario(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d["scenario"].items()})
        b = build(sc, d["seed"], LossWeights(**d["weights"]), d["lyapunov_scale"])
    params = {k: as_array(v) for k, v in d["params"].items()}
    expected = {**b.system.params(), **b.V.params()}
    for k, v in expected.items():
        if k not in params:
            raise ValueError(f"checkpoint lacks parameter {k!r}")
        if np.shape(params[k]) != np.shape(v):
            raise ValueError(f"parameter {k!r} has shape {np.shape(params[k])}, expected {np.shape(v)}")
    b.system = b.system.with_params(params)
    b.V = b.V.with_params(params)
    b.lo, b.up = as_array(d["box"]["lo"]), as_array(d["box"]["up"])
    b.weights = LossWeights(**d["weights"])
    b.rho = as_float(d["rho"])
    b.meta = dict(d.get("meta", {}))
    b.meta["history"] = d.get("history", [])
    b.meta["seed"] = d["seed"]
    b.meta["lyapunov_scale"] = d["lyapunov_scale"]
    return b


def save_checkpoint(path, bundle: Bundle, seed: int | None = None, lyapunov_scale: float | None = None,
                    history=None):
    meta = dict(bundle.meta)
    seed = meta.pop("seed", 0) if seed is None else seed
    ls = meta.pop("lyapunov_scale", 0.1) if lyapunov_scale is None else lyapunov_scale
    hist = meta.pop("history", None) if history is None else history
    meta.pop("seed", None), meta.pop("lyapunov_scale", None), meta.pop("history", None)
    b = Bundle(bundle.scenario, bundle.system, bundle.V, bundle.lo, bundle.up, bundle.weights,
               bundle.rho, meta)
    write_json(path, bundle_to_dict(b, seed, ls, hist))


def load_checkpoint(path) -> Bundle:
    return bundle_from_dict(read_json(path))
