"""Experiment runner.

    python -m perturbed_dsf EXPERIMENT [--config FILE] [--seed N] [--out DIR]
                                       [--workers N] [--set key=value ...]

Configuration is a flat set of dotted keys (``field.d``, ``coalesce.trials``).
A config file holds ``key = value`` lines; ``[section]`` headers prefix the
keys below them with ``section.``.  Values are Python literals (numbers,
lists, quoted strings) or bare words.  Precedence: command-line flags, then
the config file, then built-in defaults.

Exit status: 0 when every verdict passes, 2 when one fails, 1 on error.
"""

import argparse
import ast
import configparser
import csv
import json
import os
import sys

import numpy as np

from . import stats as S
from .dsf import trace_path, write_paths_ndjson
from .field import FieldConfig

EXPERIMENTS = ("forest", "coalesce", "renewals", "increments", "donsker", "treeness",
               "foster", "coupling", "dual", "eta", "dump-paths")

# keys that steer execution only; left out of the echoed config so that
# artifacts do not depend on them
RUNTIME_KEYS = ("out", "workers")

DEFAULTS = {
    "seed": 0,
    "out": "out",
    "workers": 1,
    "field.d": 2,
    "field.rho": 1.0,
    "field.delta": None,
    "field.m_d": None,

    "forest.lo": [-10.0, -10.0],
    "forest.hi": [10.0, 10.0],

    "coalesce.dx": [2, 8],
    "coalesce.t_min": 100.0,
    "coalesce.t_max": 10000.0,
    "coalesce.t_points": 9,
    "coalesce.trials": 2000,
    "coalesce.slope": -0.5,
    "coalesce.slope_tol": 0.1,
    "coalesce.const_tol": 0.2,

    "renewals.trials": 20,
    "renewals.steps": 1000000,
    "renewals.delta": 0.05,
    "renewals.min_r2": 0.98,
    "renewals.floor": 0.001,
    "renewals.min_gaps": 10000,

    "increments.trials": 20,
    "increments.steps": 1000000,
    "increments.min_samples": 1000,
    "increments.alpha": 0.01,

    "donsker.n": [50],
    "donsker.trials": 2000,
    "donsker.normalization": "renewal",
    "donsker.norm_trials": 30,
    "donsker.norm_budget": 1000000,
    "donsker.ks_max": 0.05,
    "donsker.r2_min": 0.99,
    "donsker.var_tol": 0.1,

    "treeness.k": 5,
    "treeness.spread": [20.0],
    "treeness.budgets": [100000.0],
    "treeness.trials": 200,
    "treeness.min_fraction": 0.99,
    "treeness.require_increasing": True,

    "foster.shells": [[20.0, 40.0], [40.0, 80.0]],
    "foster.trials": 20,
    "foster.steps": 200000,
    "foster.min_transitions": 10000,
    "foster.n_se": 2.0,

    "coupling.r": [5.0, 10.0, 20.0, 40.0],
    "coupling.trials": 100,
    "coupling.separation": None,
    "coupling.height": 50.0,
    "coupling.steps": 2000,

    "dual.width": 200.0,
    "dual.height": 200.0,
    "dual.seeds": 20,
    "dual.margin": 20.0,
    "dual.probe_width": 60.0,
    "dual.probe_heights": [100.0, 200.0, 400.0],
    "dual.probe_trials": 50,
    "dual.band": [-10.0, 10.0],

    "eta.n": 50,
    "eta.epsilons": [0.4, 0.2, 0.1, 0.05],
    "eta.t": 1.0,
    "eta.a": 0.0,
    "eta.trials": 500,
    "eta.normalization": "height",
    "eta.norm_trials": 500,
    "eta.norm_budget": 2500.0,

    "paths.starts": [[0.0, 0.0], [2.0, 0.0]],
    "paths.height": 100.0,
}


class ConfigError(ValueError):
    pass


def parse_value(text):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", "auto", ""):
        return None
    try:
        v = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text
    return _listify(v)


def _listify(v):
    if isinstance(v, tuple):
        return [_listify(x) for x in v]
    if isinstance(v, list):
        return [_listify(x) for x in v]
    return v


def _coerce(key, value):
    """Match the default's type where that is unambiguous."""
    default = DEFAULTS[key]
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, list):
            raise ConfigError(f"{key} must be a list, got {value!r}")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key} must be a string, got {value!r}")
    return value


def read_config_file(path):
    cp = configparser.ConfigParser(interpolation=None, default_section="\0")
    cp.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_string("[\0root]\n" + fh.read(), source=path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    out = {}
    for sec in cp.sections():
        for k, v in cp.items(sec):
            key = k if sec == "\0root" else f"{sec}.{k}"
            out[key] = parse_value(v)
    return out


def resolve_config(file_values=None, overrides=None):
    """Defaults, then file values, then overrides; unknown keys are errors."""
    cfg = dict(DEFAULTS)
    for layer in (file_values or {}, overrides or {}):
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, value)
    return cfg


def section(cfg, name):
    p = name + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}


def echo_config(cfg, experiment):
    out = {k: v for k, v in cfg.items() if k not in RUNTIME_KEYS}
    out["experiment"] = experiment
    return dict(sorted(out.items()))


# -- dispatch ---------------------------------------------------------------------

def _need_d(cfg, d):
    if cfg["field.d"] != d:
        raise ConfigError(f"d={d} required for this experiment (got d={cfg['field.d']})")


def run_experiment(name, cfg):
    seed = cfg["seed"]
    d = cfg["field.d"]
    rho = cfg["field.rho"]
    delta = cfg["field.delta"]
    m_d = cfg["field.m_d"]
    w = cfg["workers"]
    s = section(cfg, {"dump-paths": "paths"}.get(name, name))
    if d not in (2, 3):
        raise ConfigError(f"field.d must be 2 or 3, got {d}")
    if name == "forest":
        if len(s["lo"]) != d or len(s["hi"]) != d:
            raise ConfigError(f"forest.lo and forest.hi need {d} coordinates")
        return S.forest_experiment(d, s["lo"], s["hi"], seed, rho)
    if name == "coalesce":
        _need_d(cfg, 2)
        grid = np.geomspace(s["t_min"], s["t_max"], s["t_points"])
        return S.coalescence_experiment(s["dx"], grid, s["trials"], seed, rho, s["slope"],
                                        s["slope_tol"], s["const_tol"], w)
    if name == "renewals":
        return S.renewal_tail_experiment(d, s["trials"], s["steps"], s["delta"], m_d, seed, rho,
                                         s["min_r2"], s["floor"], s["min_gaps"], w)
    if name == "increments":
        return S.increments_experiment(d, s["trials"], s["steps"], delta, m_d, seed, rho,
                                       s["min_samples"], s["alpha"], w)
    if name == "donsker":
        return S.donsker_experiment(d, s["n"], s["trials"], s["normalization"],
                                    s["norm_trials"], s["norm_budget"], seed, rho, delta, m_d,
                                    s["ks_max"], s["r2_min"], s["var_tol"], w)
    if name == "treeness":
        spread = s["spread"] if len(s["spread"]) == d - 1 else s["spread"][:1] * (d - 1)
        return S.treeness_experiment(d, s["k"], spread, s["budgets"], s["trials"], seed, rho,
                                     s["min_fraction"], s["require_increasing"], w)
    if name == "foster":
        _need_d(cfg, 3)
        return S.foster_drift_experiment([tuple(x) for x in s["shells"]], s["trials"],
                                         s["steps"], s["min_transitions"], delta, m_d, seed,
                                         rho, s["n_se"], w)
    if name == "coupling":
        _need_d(cfg, 3)
        return S.coupling_experiment(s["r"], s["trials"], s["separation"], s["height"],
                                     s["steps"], delta, m_d, seed, rho, w)
    if name == "dual":
        _need_d(cfg, 2)
        rep = S.dual_experiment(s["width"], s["height"], s["seeds"], s["probe_width"],
                                s["probe_heights"], s["probe_trials"], s["band"], s["margin"],
                                seed, w)
        rep.records = S.dual_records(seed, s["width"], s["height"], s["margin"])
        return rep
    if name == "eta":
        _need_d(cfg, 2)
        return S.eta_experiment(s["n"], s["epsilons"], s["t"], s["a"], s["trials"],
                                s["normalization"], s["norm_trials"], s["norm_budget"], seed,
                                rho, delta, m_d, w)
    if name == "dump-paths":
        return dump_paths(cfg)
    raise ConfigError(f"unknown experiment {name!r}")


def dump_paths(cfg):
    d = cfg["field.d"]
    field = FieldConfig(dimension=d, seed=cfg["seed"], half_width=cfg["field.rho"])
    starts = cfg["paths.starts"]
    if any(len(x) != d for x in starts):
        raise ConfigError(f"paths.starts need {d} coordinates each")
    paths = [trace_path(field, np.asarray(x, float), height=cfg["paths.height"]) for x in starts]
    rep = S.ExperimentReport("dump-paths", {"d": d, "starts": starts,
                                            "height": cfg["paths.height"], "seed": cfg["seed"]})
    rep.add_table("paths", ["path", "vertices", "end_height"],
                  [[i, len(p), p.end_time] for i, p in enumerate(paths)])
    rep.records = paths
    return rep


# -- output -----------------------------------------------------------------------

def stem(experiment, d, seed):
    return f"{experiment}_d{d}_s{seed}"


def emit_report(report, config, out_dir, name):
    """Write JSON (always), one CSV per table and NDJSON when the report has
    records.  Returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    base = os.path.join(out_dir, name)
    doc = report.to_dict()
    doc["config"] = S._clean(config)
    written = [base + ".json"]
    with open(written[0], "w", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n")
    for tname, t in report.tables.items():
        path = f"{base}_{tname}.csv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(t["columns"])
            wr.writerows(S._clean(t["rows"]))
        written.append(path)
    if report.records is not None:
        path = base + ".ndjson"
        with open(path, "w", encoding="utf-8") as fh:
            if report.experiment == "dump-paths":
                write_paths_ndjson(report.records, fh)
            else:
                for rec in report.records:
                    fh.write(json.dumps(S._clean(rec), sort_keys=True) + "\n")
        written.append(path)
    return written


def _key_value(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), parse_value(v)


def build_parser():
    p = argparse.ArgumentParser(prog="perturbed_dsf",
                                description="Directed spanning forest experiments.")
    p.add_argument("experiment", help="one of: " + ", ".join(EXPERIMENTS))
    p.add_argument("--config", metavar="PATH", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="run seed (overrides config)")
    p.add_argument("--out", metavar="DIR", help="output directory (overrides config)")
    p.add_argument("--workers", type=int, help="worker processes (overrides config)")
    p.add_argument("--set", dest="sets", action="append", default=[], type=_key_value,
                   metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--quiet", action="store_true", help="do not print the text summary")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {args.experiment!r}; choose from "
                              + ", ".join(EXPERIMENTS))
        file_values = read_config_file(args.config) if args.config else {}
        flags = dict(args.sets)
        for key in ("seed", "out", "workers"):
            if getattr(args, key) is not None:
                flags[key] = getattr(args, key)
        cfg = resolve_config(file_values, flags)
        if cfg["workers"] < 1:
            raise ConfigError("workers must be at least 1")
        report = run_experiment(args.experiment, cfg)
        written = emit_report(report, echo_config(cfg, args.experiment), cfg["out"],
                              stem(args.experiment, cfg["field.d"], cfg["seed"]))
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: cannot write output: {exc}", file=sys.stderr)
        return 1
    if not args.quiet:
        sys.stdout.write(report.to_text())
        for path in written:
            print(f"wrote {path}")
    return 0 if report.passed else 2


if __name__ == "__main__":
    sys.exit(main())
