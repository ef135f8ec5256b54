"""Command-line entry point: ``smkl {simulate,fit,oracle,sandwich,experiment}``.

Every command reads one JSON config (schema below, unknown keys
rejected). Results go to stdout, or to files in ``--out``. Failures are
written to stderr as a JSON object and mapped to exit codes
2 (config), 3 (numerical) and 4 (convergence).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import estimators
from .asymptotics import sandwich_oracle, sandwich_plugin
from .empirical import build
from .errors import ConfigInvalid, SMKLError
from .experiments import Scenario, run_mc
from .kernels import (
    ChainKernel,
    ExponentialRFamily,
    ExponentialStateRFamily,
    GammaRFamily,
    SaturatedQFamily,
    SModel,
    SojournKernel,
    TiltQFamily,
)
from .oracle import PopulationLaw, kl_projection
from .simulator import RenewalPath, SimConfig, simulate

SCHEMA_VERSION = 1
EXIT_CODES = {"config": 2, "numerical": 3, "convergence": 4}

_number = {"type": "number"}
_vector = {"type": "array", "items": _number, "minItems": 1}
_matrix = {"type": "array", "items": _vector, "minItems": 2}
_param = {"oneOf": [_number, _vector, _matrix]}

_sojourn = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["exponential", "gamma", "point"]},
        "rate": _param,
        "shape": _param,
    },
}

_box = {"lower": {"oneOf": [_number, _vector]}, "upper": {"oneOf": [_number, _vector]}}

_qfamily = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["tilt", "saturated"]},
        "base": _matrix,
        "stat": {"oneOf": [_matrix, {"type": "array", "items": _matrix}]},
        **_box,
    },
}

_rfamily = {
    "type": "object",
    "additionalProperties": False,
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["exponential", "exponential_state", "gamma"]},
        "free": {"type": "array", "items": {"enum": ["shape", "rate"]},
                 "minItems": 1, "uniqueItems": True},
        "shape": _number,
        "rate": _number,
        **_box,
    },
}

_family = {
    "oneOf": [
        _qfamily,
        _rfamily,
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "q", "r"],
            "properties": {
                "kind": {"const": "s"},
                "q": _qfamily,
                "r": _rfamily,
                "q_index": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "r_index": {"type": "array", "items": {"type": "integer", "minimum": 0}},
            },
        },
    ]
}

CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "required": ["schema_version"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "description": {"type": "string"},
        "kernels": {
            "type": "object",
            "additionalProperties": False,
            "required": ["Q", "sojourn"],
            "properties": {"Q": _matrix, "sojourn": _sojourn},
        },
        "family": _family,
        "scenario": {
            "type": "object",
            "additionalProperties": False,
            "required": ["regime", "n"],
            "properties": {
                "regime": {"enum": ["horizon", "count"]},
                "n": {"type": "number", "exclusiveMinimum": 0},
                "replications": {"type": "integer", "minimum": 2},
                "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
                "initial": {"oneOf": [{"const": "stationary"}, {"type": "integer", "minimum": 0}]},
            },
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "required": ["path", "regime", "n"],
            "properties": {
                "path": {"type": "string"},
                "regime": {"enum": ["horizon", "count"]},
                "n": {"type": "number", "exclusiveMinimum": 0},
                "size": {"type": "integer", "minimum": 2},
            },
        },
        "theta": _vector,
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "directory": {"type": "string"},
                "formats": {"type": "array", "items": {"enum": ["json", "csv"]}},
            },
        },
    },
}


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def _fmt_float(v):
    if not math.isfinite(v):
        return "null"
    return "%.17g" % v


def dumps(obj, indent=2, _level=0):
    """Deterministic JSON with floats at 17 significant digits."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}"
                 for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(dumps(v, indent, _level + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + dumps(v, indent, _level + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, np.ndarray):
        return dumps(obj.tolist(), indent, _level)
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if obj is None:
        return "null"
    return json.dumps(str(obj))


def _flat_rows(obj, prefix=""):
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield from _flat_rows(v, f"{prefix}.{k}" if prefix else str(k))
    elif isinstance(obj, (list, tuple, np.ndarray)):
        arr = np.asarray(obj, dtype=object)
        if arr.ndim and all(isinstance(v, (int, float, np.number)) for v in arr.ravel()):
            for idx in np.ndindex(arr.shape):
                yield f"{prefix}[{','.join(map(str, idx))}]", arr[idx]
        else:
            for i, v in enumerate(obj):
                yield from _flat_rows(v, f"{prefix}[{i}]")
    else:
        yield prefix, obj


def to_key_value_csv(obj):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["key", "value"])
    for k, v in _flat_rows(obj):
        if isinstance(v, (float, np.floating)):
            v = _fmt_float(float(v))
        w.writerow([k, v])
    return buf.getvalue()


# --------------------------------------------------------------------------
# Config handling
# --------------------------------------------------------------------------


def load_config(path):
    """Read and validate a config file; raise :class:`ConfigInvalid`."""
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as e:
        raise ConfigInvalid("cannot read config", path=str(path), reason=str(e)) from e
    except json.JSONDecodeError as e:
        raise ConfigInvalid("config is not valid JSON", path=str(path), line=e.lineno) from e
    validate_config(cfg)
    cfg["_base_dir"] = str(Path(path).resolve().parent)
    return cfg


def validate_config(cfg):
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        field = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigInvalid(f"config invalid at {field}: {e.message}", field=field) from e
    return cfg


def _need(cfg, key, command):
    if key not in cfg:
        raise ConfigInvalid(f"'{command}' needs a '{key}' section", field=key)
    return cfg[key]


def make_kernels(spec):
    try:
        chain = ChainKernel(np.array(spec["Q"], float))
        soj = spec["sojourn"]
        S = chain.size
        if soj["kind"] == "point":
            sojourn = SojournKernel.point_mass(S)
        elif soj["kind"] == "exponential":
            sojourn = SojournKernel.exponential(soj.get("rate", 1.0), S)
        else:
            sojourn = SojournKernel.gamma(soj.get("shape", 1.0), soj.get("rate", 1.0), S)
    except (ValueError, TypeError) as e:
        raise ConfigInvalid(f"kernels: {e}", field="kernels") from e
    return chain, sojourn


def _box_kw(spec):
    return {k: spec[k] for k in ("lower", "upper") if k in spec}


def make_family(spec, size):
    kind = spec["kind"]
    try:
        if kind == "tilt":
            if "base" not in spec or "stat" not in spec:
                raise ConfigInvalid("tilt family needs 'base' and 'stat'", field="family")
            return TiltQFamily(np.array(spec["base"], float), np.array(spec["stat"], float),
                               **_box_kw(spec))
        if kind == "saturated":
            return SaturatedQFamily(size, **_box_kw(spec))
        if kind == "exponential":
            return ExponentialRFamily(size, **_box_kw(spec))
        if kind == "exponential_state":
            return ExponentialStateRFamily(size, **_box_kw(spec))
        if kind == "gamma":
            kw = {k: spec[k] for k in ("shape", "rate") if k in spec}
            return GammaRFamily(size, free=tuple(spec.get("free", ("shape", "rate"))),
                                **kw, **_box_kw(spec))
        q = make_family(spec["q"], size)
        r = make_family(spec["r"], size)
        return SModel(q, r, spec.get("q_index"), spec.get("r_index"))
    except (ValueError, TypeError) as e:
        raise ConfigInvalid(f"family: {e}", field="family") from e


def _load_path(cfg):
    data = cfg["data"]
    p = Path(data["path"])
    if not p.is_absolute():
        p = Path(cfg["_base_dir"]) / p
    try:
        with open(p, newline="") as fh:
            path = RenewalPath.from_csv(fh, data["regime"], data["n"])
    except OSError as e:
        raise ConfigInvalid("cannot read path CSV", field="data/path", reason=str(e)) from e
    return path, data.get("size")


def _scenario_cfg(cfg, args, command):
    sc = dict(_need(cfg, "scenario", command))
    if args.seed is not None:
        sc["seed"] = args.seed
    if args.reps is not None:
        sc["replications"] = args.reps
    sc.setdefault("seed", 0)
    return sc


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_simulate(cfg, args):
    chain, sojourn = make_kernels(_need(cfg, "kernels", "simulate"))
    sc = _scenario_cfg(cfg, args, "simulate")
    path = simulate(chain, sojourn, SimConfig(sc["regime"], sc["n"], sc["seed"],
                                              sc.get("initial", "stationary")))
    return {"path.csv": path.to_csv()}


def cmd_fit(cfg, args):
    if "data" in cfg:
        path, size = _load_path(cfg)
        size = size or int(path.states.max()) + 1
    else:
        chain, sojourn = make_kernels(_need(cfg, "kernels", "fit"))
        sc = _scenario_cfg(cfg, args, "fit")
        path = simulate(chain, sojourn, SimConfig(sc["regime"], sc["n"], sc["seed"]))
        size = chain.size
    target = make_family(_need(cfg, "family", "fit"), size)
    emp = build(path, size)
    est = estimators.fit(emp, target, cfg.get("theta"))
    out = est.to_dict()
    out["N"] = emp.N
    out["mean_sojourn"] = emp.mhat
    return {"fit.json": out}


def cmd_oracle(cfg, args):
    chain, sojourn = make_kernels(_need(cfg, "kernels", "oracle"))
    target = make_family(_need(cfg, "family", "oracle"), chain.size)
    res = kl_projection(PopulationLaw(chain, sojourn), target, cfg.get("theta"))
    return {"oracle.json": res.to_dict()}


def cmd_sandwich(cfg, args):
    spec = _need(cfg, "family", "sandwich")
    if "data" in cfg:
        path, size = _load_path(cfg)
        size = size or int(path.states.max()) + 1
        target = make_family(spec, size)
        emp = build(path, size)
        theta = cfg.get("theta")
        if theta is None:
            theta = estimators.fit(emp, target).theta_hat
        rep = sandwich_plugin(emp, target, theta)
    else:
        chain, sojourn = make_kernels(_need(cfg, "kernels", "sandwich"))
        target = make_family(spec, chain.size)
        law = PopulationLaw(chain, sojourn)
        theta = cfg.get("theta")
        if theta is None:
            theta = kl_projection(law, target).k_star
        regime = cfg.get("scenario", {}).get("regime", "horizon")
        rep = sandwich_oracle(law, target, theta, regime)
    return {"sandwich.json": rep.to_dict()}


def cmd_experiment(cfg, args):
    chain, sojourn = make_kernels(_need(cfg, "kernels", "experiment"))
    target = make_family(_need(cfg, "family", "experiment"), chain.size)
    sc = _scenario_cfg(cfg, args, "experiment")
    try:
        s = Scenario(chain, sojourn, target, sc["regime"], sc["n"],
                     int(sc.get("replications", 100)), int(sc["seed"]))
    except ValueError as e:
        raise ConfigInvalid(f"scenario: {e}", field="scenario") from e
    rep = run_mc(s)
    return {"experiment.json": rep.to_dict(), "replications.csv": rep.to_csv()}


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "oracle": cmd_oracle,
    "sandwich": cmd_sandwich,
    "experiment": cmd_experiment,
}


def _render(name, payload, fmt):
    if isinstance(payload, str):
        return payload
    if fmt == "csv":
        return to_key_value_csv(payload)
    return dumps(payload) + "\n"


def _emit(outputs, args, cfg):
    formats = [args.format] if args.format else cfg.get("output", {}).get("formats", ["json"])
    out_dir = args.out or cfg.get("output", {}).get("directory")
    if out_dir is not None:
        d = Path(out_dir)
        if not d.is_absolute() and args.out is None:
            d = Path(cfg["_base_dir"]) / d
        d.mkdir(parents=True, exist_ok=True)
        for name, payload in outputs.items():
            stem, ext = name.rsplit(".", 1)
            if ext == "json":
                for fmt in formats:
                    (d / f"{stem}.{fmt}").write_text(_render(name, payload, fmt))
            else:
                (d / name).write_text(payload)
        return
    # stdout gets one artifact: a native CSV if csv was asked for, else the first
    fmt = formats[0]
    native_csv = [k for k in outputs if k.endswith(".csv")]
    name = native_csv[0] if fmt == "csv" and native_csv else next(iter(outputs))
    sys.stdout.write(_render(name, outputs[name], fmt))


def build_parser():
    p = argparse.ArgumentParser(prog="smkl", description="Semi-Markov misspecified ML toolkit.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON config file")
        sp.add_argument("--seed", type=int, help="override scenario seed")
        sp.add_argument("--out", help="output directory (default: stdout)")
        sp.add_argument("--reps", type=int, help="override number of replications")
        sp.add_argument("--format", choices=["json", "csv"], help="output format")
    return p


def _fail(err):
    sys.stderr.write(json.dumps(err.to_dict(), default=str) + "\n")
    return EXIT_CODES.get(err.category, 3)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigInvalid("--seed must be an unsigned 64-bit integer", field="seed")
        if args.reps is not None and args.reps < 2:
            raise ConfigInvalid("--reps must be at least 2", field="reps")
        cfg = load_config(args.config)
        outputs = COMMANDS[args.command](cfg, args)
        _emit(outputs, args, cfg)
    except SMKLError as e:
        return _fail(e)
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as e:
        return _fail(SMKLError(str(e), kind=type(e).__name__))
    return 0


if __name__ == "__main__":
    sys.exit(main())
