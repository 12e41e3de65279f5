"""Command-line interface.

Subcommands: ``run``, ``check``, ``decompose``, ``moments``, ``bel``,
``semigroup``, ``invariant``, ``oracle``, ``list``. Exit status is 0 when
every verdict passes, 2 when a verdict fails and 1 on configuration or
runtime errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig
from .estimators import flow_difference_moments, flow_moments
from .experiments import (EXPERIMENTS, ExperimentError, _clean, model_from_spec, pair_from_spec,
                          run_experiment)
from .interpolation import convergence_study, simulate_decomposition
from .model import CATALOG
from .oracle import LinearOracle, oracle_difference_moment, oracle_moment
from .regularity import condition_report

EXIT_OK, EXIT_ERROR, EXIT_FAIL = 0, 1, 2

SUBCOMMANDS = ("run", "check", "decompose", "moments", "bel", "semigroup", "invariant", "oracle", "list")


def list_catalog() -> str:
    """Table of catalog models and experiments with their parameters, in a fixed order."""
    lines = ["MODELS", f"{'name':<16}{'parameters (defaults)':<44}description"]
    for name, (_, defaults, desc) in CATALOG.items():
        params = ", ".join(f"{k}={v}" for k, v in defaults.items())
        lines.append(f"{name:<16}{params:<44}{desc}")
    lines += ["", "EXPERIMENTS"]
    for name, fn in EXPERIMENTS.items():
        lines.append(f"{name:<28}{(fn.__doc__ or '').strip().splitlines()[0]}")
    return "\n".join(lines)


def _write_json(path, obj):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)


def _write_csv(path, columns, rows):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


def _load(args, require_experiment=False) -> RunConfig:
    if args.config is None:
        raise ConfigError([("--config", "a configuration file is required")])
    cfg = RunConfig.load(args.config).with_overrides(args.seed, args.out, args.threads)
    return cfg.validate(require_experiment=require_experiment)


def _experiment(cfg: RunConfig, name: str, out_dir: str) -> int:
    res = run_experiment(name, cfg.experiment_args())
    jpath, cpath = res.write(out_dir, name)
    for key, ok in res.verdicts.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}.{key}")
    print(f"wrote {jpath} and {cpath}")
    return EXIT_OK if res.passed else EXIT_FAIL


def cmd_run(args) -> int:
    cfg = _load(args, require_experiment=True)
    return _experiment(cfg, cfg.experiment, cfg.output_dir)


def _estimator(name):
    def cmd(args) -> int:
        cfg = _load(args)
        return _experiment(cfg, name, cfg.output_dir)

    return cmd


def cmd_check(args) -> int:
    cfg = _load(args)
    a = cfg.experiment_args()
    n = a.get("n", 2)
    sample = {"seed": a["seed"]}
    if "box" in a:
        sample["box"] = a["box"]
    models = {}
    if cfg.model is not None:
        models["model"] = model_from_spec(cfg.model)
    if cfg.pair is not None:
        pair = pair_from_spec(cfg.pair)
        models.update(base=pair.base, perturbed=pair.perturbed)
    if not models:
        raise ConfigError([("model", "a model or pair is required")])
    out = {k: condition_report(m, n, sample, float(a.get("c", 1.0))).to_dict() for k, m in models.items()}
    path = os.path.join(cfg.output_dir, "check.json")
    _write_json(path, out)
    print(json.dumps(_clean(out), sort_keys=True))
    return EXIT_OK


def cmd_decompose(args) -> int:
    cfg = _load(args)
    if cfg.pair is None:
        raise ConfigError([("pair", "a model pair is required")])
    a = cfg.experiment_args()
    pair = pair_from_spec(cfg.pair)
    x = np.broadcast_to(np.atleast_1d(np.asarray(a.get("x", 1.0), dtype=float)), (pair.d,))
    s, t = float(a.get("s", 0.0)), float(a.get("t", 1.0))
    M = int(a.get("M", 256))
    if "H_list" in a:
        ff = a.get("fine_factor") or (int(round(max(a["H_list"]) / a["h"])) if "h" in a else 8)
        rows = convergence_study(pair, x, s, t, a["H_list"], M, a["seed"], int(ff), a.get("threads"))
        cols = ["H", "h", "mean_residual_norm", "stderr", "rms_residual", "mean_S", "S_stderr",
                "mean_lhs_norm", "max_abs_S", "diverged"]
        _write_csv(os.path.join(cfg.output_dir, "decompose.csv"), cols, rows)
        _write_json(os.path.join(cfg.output_dir, "decompose.json"), {"rows": rows})
        print(json.dumps(_clean(rows)))
        return EXIT_OK
    if "h" not in a:
        raise ConfigError([("mesh.h", "missing")])
    rep = simulate_decomposition(pair, x, s, t, float(a["h"]), float(a.get("H", a["h"])), M, a["seed"],
                                 a.get("threads"))
    with open(_ensure(cfg.output_dir, "decompose.json"), "w") as fh:
        fh.write(rep.to_json(per_path=bool(a.get("per_path", False))))
    print(json.dumps(rep.summary()))
    return EXIT_OK


def _ensure(out_dir, name):
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, name)


def cmd_moments(args) -> int:
    cfg = _load(args)
    a = cfg.experiment_args()
    n = int(a.get("n", 2))
    s, t = float(a.get("s", 0.0)), a.get("t", 1.0)
    h, M = float(a.get("h", 0.01)), int(a.get("M", 1024))
    if cfg.pair is not None:
        pair = pair_from_spec(cfg.pair)
        x = np.broadcast_to(np.atleast_1d(np.asarray(a.get("x", 1.0), dtype=float)), (pair.d,))
        ests = flow_difference_moments(pair, s, t, x, n, M, h, a["seed"], a.get("threads"))
    elif cfg.model is not None:
        model = model_from_spec(cfg.model)
        x = np.broadcast_to(np.atleast_1d(np.asarray(a.get("x", 1.0), dtype=float)), (model.d,))
        ests = flow_moments(model, s, t, x, n, M, h, a["seed"], a.get("threads"))
    else:
        raise ConfigError([("model", "a model or pair is required")])
    ests = ests if isinstance(ests, list) else [ests]
    times = sorted(float(u) for u in np.atleast_1d(t))
    rows = [{"t": u, **e.to_dict()} for u, e in zip(times, ests)]
    _write_json(os.path.join(cfg.output_dir, "moments.json"), {"rows": rows})
    _write_csv(os.path.join(cfg.output_dir, "moments.csv"),
               ["t", "order", "value", "stderr", "halfwidth", "samples", "diverged"], rows)
    print(json.dumps(_clean(rows)))
    return EXIT_OK


def cmd_oracle(args) -> int:
    cfg = _load(args)
    a = cfg.experiment_args()
    n = int(a.get("n", 2))
    s = float(a.get("s", 0.0))
    times = sorted(float(u) for u in np.atleast_1d(a.get("t", 1.0)))
    rows = []
    if cfg.pair is not None:
        pair = pair_from_spec(cfg.pair)
        A, B = LinearOracle.from_model(pair.base), LinearOracle.from_model(pair.perturbed)
        x = np.broadcast_to(np.atleast_1d(np.asarray(a.get("x", 1.0), dtype=float)), (pair.d,))
        for u in times:
            rows.append({"t": u, "difference_moment": oracle_difference_moment(A, B, n, s, u, x)})
    elif cfg.model is not None:
        model = model_from_spec(cfg.model)
        o = LinearOracle.from_model(model)
        x = np.broadcast_to(np.atleast_1d(np.asarray(a.get("x", 1.0), dtype=float)), (model.d,))
        for u in times:
            rows.append({"t": u, "moment": oracle_moment(o, n, u - s, x)})
    else:
        raise ConfigError([("model", "a model or pair is required")])
    _write_json(os.path.join(cfg.output_dir, "oracle.json"), {"n": n, "rows": rows})
    print(json.dumps(_clean(rows)))
    return EXIT_OK


def cmd_list(args) -> int:
    print(list_catalog())
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "check": cmd_check,
    "decompose": cmd_decompose,
    "moments": cmd_moments,
    "bel": _estimator("bel"),
    "semigroup": _estimator("semigroup"),
    "invariant": _estimator("invariant"),
    "oracle": cmd_oracle,
    "list": cmd_list,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowlab", description="Coupled diffusion flows and their differences.")
    parser.add_argument("--version", action="version", version=f"flowlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        if name != "list":
            p.add_argument("config_path", nargs="?", help="configuration file (same as --config)")
            p.add_argument("--config", dest="config", help="TOML configuration file")
            p.add_argument("--seed", type=int, help="override mc.seed")
            p.add_argument("--out", help="output directory (overrides output.dir)")
            p.add_argument("--threads", type=int,
                           help="worker threads (default: mc.threads, then FLOWLAB_THREADS, then 1)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command != "list" and args.config is None:
        args.config = args.config_path
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        for path, msg in exc.problems:
            print(f"config error: {path}: {msg}", file=sys.stderr)
        return EXIT_ERROR
    except (ExperimentError, KeyError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
