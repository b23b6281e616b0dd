"""
Command line runner for the named experiments.

    ldpflow run --config cfg.json [--seed N] [--out DIR]
    ldpflow describe [NAME]

The config is a JSON object ``{"experiment": name, "parameters": {...},
"seed": N}``.  Results land in ``DIR/<experiment>/``: ``summary.json`` and
the experiment's CSV tables.  Exit status: 0 pass, 1 a numeric criterion
failed, 2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

from .experiments import REGISTRY, ConfigError, describe, resolve_parameters

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


def atomic_write(path: str, text: str):
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_config(path: str, seed: int | None = None) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(cfg) - {"experiment", "parameters", "seed", "format"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    name = cfg.get("experiment")
    if name not in REGISTRY:
        raise ConfigError(f"unknown experiment {name!r}")
    params = cfg.get("parameters", {})
    if not isinstance(params, dict):
        raise ConfigError("parameters must be an object")
    if seed is None:
        seed = cfg.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    fmt = cfg.get("format", "csv")
    if fmt not in ("csv", "json"):
        raise ConfigError("format must be csv or json")
    return {"experiment": name, "parameters": resolve_parameters(name, params), "seed": seed, "format": fmt}


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if hasattr(v, "item"):
        return v.item()
    return v


def _csv_to_json(text: str) -> str:
    lines = text.strip().split("\n")
    header = lines[0].split(",")
    rows = [dict(zip(header, ln.split(","))) for ln in lines[1:]]
    return json.dumps(rows, indent=2) + "\n"


def run_experiment(cfg: dict, out_dir: str) -> int:
    exp = REGISTRY[cfg["experiment"]]
    outcome = exp.run(cfg["parameters"], cfg["seed"])
    target = os.path.join(out_dir, exp.name)
    os.makedirs(target, exist_ok=True)
    for name, text in sorted(outcome.tables.items()):
        if text.lstrip().startswith("{"):
            atomic_write(os.path.join(target, f"{name}.json"), text if text.endswith("\n") else text + "\n")
        elif cfg["format"] == "json":
            atomic_write(os.path.join(target, f"{name}.json"), _csv_to_json(text))
        else:
            atomic_write(os.path.join(target, f"{name}.csv"), text)
    summary = {
        "experiment": exp.name,
        "parameters": cfg["parameters"],
        "seed": cfg["seed"],
        "metrics": outcome.metrics,
        "thresholds": outcome.thresholds,
        "pass": bool(outcome.passed),
    }
    atomic_write(os.path.join(target, "summary.json"), json.dumps(_jsonable(summary), indent=2, sort_keys=True) + "\n")
    status = "PASS" if outcome.passed else "FAIL"
    print(f"{exp.name}: {status}")
    for k, v in sorted(outcome.metrics.items()):
        print(f"  {k} = {v}")
    return EXIT_PASS if outcome.passed else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ldpflow", description="Run gradient-flow and large-deviation experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    r.add_argument("--out", default="results", help="output directory (default: results)")
    d = sub.add_parser("describe", help="print parameters, defaults and outputs")
    d.add_argument("name", nargs="?")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_PASS
    try:
        if args.command == "describe":
            sys.stdout.write(describe(args.name))
            return EXIT_PASS
        cfg = load_config(args.config, args.seed)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run_experiment(cfg, args.out)


if __name__ == "__main__":
    sys.exit(main())
