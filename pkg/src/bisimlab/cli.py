"""Command-line driver: ``bisimlab {gen,collect,solve,train,verify,report}``.

Every subcommand reads an optional ``key = value`` config file, writes its
outputs into ``--out`` and finishes by writing ``manifest-<command>.json``
there.

Exit codes: 0 success, 2 configuration or input error, 3 solver
non-convergence, 4 a verification assertion failed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bisim import (
    ConvergenceError,
    Measurement,
    ScalingConfig,
    g_star_fixed_point,
    pi_bisim_fixed_point,
    save_measurement,
    scaled_fixed_point,
)
from .dataset import (
    DropFraction,
    DropRandomNextStates,
    collect,
    load_dataset,
    minmax_normalize,
    remove_transitions,
    save_dataset,
)
from .expectile import ExpectileConfig, expectile_fixed_point
from .mdp import Policy, load_mdp, make_chain, make_garnet, make_gridworld, save_mdp
from .repr_learning import DistanceKind, TrainConfig, save_encoder, save_log, train
from .suites import DEFAULT_SUITES, SUITES, rows_to_csv, run_suites

EXIT_OK, EXIT_CONFIG, EXIT_CONVERGENCE, EXIT_ASSERTION = 0, 2, 3, 4
CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


# -- config schema -------------------------------------------------------------

def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _names(text: str) -> tuple:
    return tuple(x.strip() for x in text.split(",") if x.strip())


SCALING_KEYS = {"c_r": (float, 1.0), "c_k": (float, None)}

SCHEMA = {
    "gen": {
        "kind": (str, "garnet"),
        "n_states": (int, 10),
        "n_actions": (int, 2),
        "branching": (int, 3),
        "reward_sparsity": (float, 0.0),
        "discount": (float, 0.9),
        "slip": (float, 0.0),
        "rows": (int, 4),
        "cols": (int, 4),
        "output": (str, "mdp.txt"),
    },
    "collect": {
        "mdp": (str, None),
        "policy": (str, "uniform"),
        "min_prob": (float, 0.0),
        "n_transitions": (int, 1000),
        "horizon": (int, 50),
        "drop_fraction": (float, 0.0),
        "drop_next_state_fraction": (float, 0.0),
        "normalize": (_bool, False),
        "output": (str, "dataset.txt"),
    },
    "solve": {
        "mdp": (str, ""),
        "dataset": (str, ""),
        "solver": (str, "scaled"),
        "policy": (str, "uniform"),
        "min_prob": (float, 0.0),
        **SCALING_KEYS,
        "tau": (float, 0.5),
        "alpha": (float, 0.3),
        "reward_mode": (str, "policy"),
        "method": (str, "backup"),
        "tol": (float, 1e-10),
        "max_iter": (int, 1_000_000),
        "output": (str, "measurement.csv"),
    },
    "train": {
        "dataset": (str, None),
        "tau": (float, 0.5),
        "learning_rate": (float, 1e-2),
        "batch_size": (int, 64),
        "steps": (int, 2000),
        "ema_coefficient": (float, 0.01),
        "c_r": (float, 1.0),
        "c_k": (float, 0.9),
        "distance": (str, "cosine"),
        "beta": (float, 0.1),
        "embedding_dim": (int, 8),
        "log_every": (int, 50),
        "normalize": (_bool, False),
        "output": (str, "encoder.txt"),
        "log": (str, "train_log.csv"),
    },
    "verify": {
        "suites": (_names, DEFAULT_SUITES),
        "output": (str, "report.csv"),
        # per-suite overrides
        "lemma2.n_mdps": (int, None),
        "contraction.n_configs": (int, None),
        "contraction.pairs_per_config": (int, None),
        "monotonicity.n_mdps": (int, None),
        "monotonicity.taus": (_floats, None),
        "tau-limit.n_mdps": (int, None),
        "tau-limit.taus": (_floats, None),
        "tau-limit.threshold": (float, None),
        "fixed-point-bound.n_mdps": (int, None),
        "residual-identity.n_draws": (int, None),
        "prop4.n_cases": (int, None),
        "prop4.C": (float, None),
        "prop4.max_draws": (int, None),
        "appendix-i.n_seeds": (int, None),
        "appendix-i.sizes": (_ints, None),
        "appendix-i.drop_fraction": (float, None),
        "appendix-i.threshold": (float, None),
        "value-bound.n_seeds": (int, None),
        "value-bound.omegas": (_floats, None),
        "value-bound.train_steps": (int, None),
        "rs-ablation.n_seeds": (int, None),
        "rs-ablation.steps": (int, None),
        "rs-ablation.dim_required": (int, None),
        "gradient.n_points": (int, None),
    },
    "report": {
        "input": (str, ""),
    },
}

COMMON_KEYS = {"version": (int, CONFIG_VERSION), "seed": (int, 0)}


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; later keys override earlier ones."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        raw[key] = value
    return raw


def validate_config(command: str, raw: dict) -> dict:
    """Typed config with defaults filled in; unknown keys and bad values raise ConfigError."""
    schema = {**COMMON_KEYS, **SCHEMA[command]}
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys for '{command}': {', '.join(unknown)}")
    cfg = {}
    for key, (conv, default) in schema.items():
        if key in raw:
            try:
                cfg[key] = conv(raw[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from None
        else:
            cfg[key] = default
    if cfg["version"] != CONFIG_VERSION:
        raise ConfigError(f"config version {cfg['version']} is not supported (expected {CONFIG_VERSION})")
    for key, (_, default) in SCHEMA[command].items():
        if default is None and cfg[key] is None and "." not in key and key not in SCALING_KEYS:
            raise ConfigError(f"missing required key {key!r}")
    return cfg


def config_hash(command: str, cfg: dict) -> str:
    canon = json.dumps({"command": command, **{k: _jsonable(v) for k, v in cfg.items()}},
                       sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_atomic(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def write_manifest(out: Path, command: str, cfg: dict, outputs: list, timings: dict) -> Path:
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config_hash": config_hash(command, cfg),
        "seed": cfg["seed"],
        "config": {k: _jsonable(v) for k, v in cfg.items()},
        "outputs": {Path(p).name: sha256_file(p) for p in outputs},
        "timings_seconds": timings,
    }
    path = out / f"manifest-{command}.json"
    write_atomic(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# -- helpers -------------------------------------------------------------------

def _input_path(value: str, out: Path, config_dir: Path | None) -> Path:
    """Resolve an input file relative to the config file, then the output dir."""
    p = Path(value)
    candidates = [p] if p.is_absolute() else \
        [c for c in ((config_dir / p) if config_dir else None, out / p, p) if c is not None]
    for c in candidates:
        if c.exists():
            return c
    raise ConfigError(f"input file not found: {value}")


def _policy(cfg: dict, n_states: int, n_actions: int, rng) -> Policy:
    kind = cfg["policy"]
    if kind == "uniform":
        return Policy.uniform(n_states, n_actions)
    if kind == "random":
        return Policy.random(n_states, n_actions, rng, cfg["min_prob"])
    raise ConfigError(f"unknown policy {kind!r} (expected uniform or random)")


def _scaling(cfg: dict, discount: float | None) -> ScalingConfig:
    c_k = cfg["c_k"] if cfg["c_k"] is not None else discount
    if c_k is None:
        raise ConfigError("c_k is required when the source has no discount")
    try:
        return ScalingConfig(cfg["c_r"], c_k).validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# -- commands ------------------------------------------------------------------

def cmd_gen(cfg: dict, out: Path, ctx: dict) -> list:
    kind = cfg["kind"]
    if kind == "garnet":
        mdp = make_garnet(cfg["n_states"], cfg["n_actions"], cfg["branching"],
                          cfg["reward_sparsity"], cfg["seed"], cfg["discount"])
    elif kind == "chain":
        n = cfg["n_states"]
        mdp = make_chain(n, {n - 1: 1.0}, cfg["slip"], cfg["discount"])
    elif kind == "gridworld":
        rows, cols = cfg["rows"], cfg["cols"]
        goal = (rows - 1, cols - 1)
        mdp = make_gridworld((rows, cols), {goal: 1.0}, cfg["slip"], cfg["discount"], [goal])
    else:
        raise ConfigError(f"unknown mdp kind {kind!r}")
    path = out / cfg["output"]
    save_mdp(mdp, path)
    return [path]


def cmd_collect(cfg: dict, out: Path, ctx: dict) -> list:
    mdp = load_mdp(_input_path(cfg["mdp"], out, ctx["config_dir"]))
    ss = np.random.SeedSequence(cfg["seed"])
    pol_seed, collect_seed, drop_seed = ss.spawn(3)
    pol = _policy(cfg, mdp.n_states, mdp.n_actions, np.random.default_rng(pol_seed))
    ds = collect(mdp, pol, cfg["n_transitions"], cfg["horizon"], collect_seed,
                 source_mdp_id=Path(cfg["mdp"]).name)
    if cfg["drop_fraction"] > 0:
        ds = remove_transitions(ds, DropFraction(cfg["drop_fraction"]), drop_seed)
    if cfg["drop_next_state_fraction"] > 0:
        ds = remove_transitions(ds, DropRandomNextStates(cfg["drop_next_state_fraction"]), drop_seed)
    if cfg["normalize"]:
        ds = minmax_normalize(ds)
    path = out / cfg["output"]
    save_dataset(ds, path)
    return [path]


def cmd_solve(cfg: dict, out: Path, ctx: dict) -> list:
    if bool(cfg["mdp"]) == bool(cfg["dataset"]):
        raise ConfigError("give exactly one of 'mdp' or 'dataset'")
    solver = cfg["solver"]
    if cfg["mdp"]:
        source = load_mdp(_input_path(cfg["mdp"], out, ctx["config_dir"]))
        pol = _policy(cfg, source.n_states, source.n_actions, np.random.default_rng(cfg["seed"]))
        discount = source.discount
    else:
        source = load_dataset(_input_path(cfg["dataset"], out, ctx["config_dir"]))
        pol = None
        discount = None
    sc = _scaling(cfg, discount)
    if solver in ("pi_bisim", "scaled") and pol is None:
        raise ConfigError(f"solver {solver!r} needs an MDP source")
    if solver == "pi_bisim":
        m = pi_bisim_fixed_point(source, pol, cfg["tol"], sc, cfg["max_iter"])
    elif solver == "scaled":
        m = scaled_fixed_point(source, pol, sc, cfg["tol"], cfg["max_iter"])
    elif solver == "expectile":
        try:
            ecfg = ExpectileConfig(cfg["tau"], cfg["alpha"], sc, cfg["tol"], cfg["max_iter"],
                                   cfg["reward_mode"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        m = expectile_fixed_point(source, ecfg, pol, cfg["method"])
    elif solver == "g_star":
        gs = g_star_fixed_point(source, sc, cfg["tol"], pol, cfg["max_iter"])
        m = Measurement(gs.state_max(), "g_star", sc, gs.iterations)
    else:
        raise ConfigError(f"unknown solver {solver!r}")
    path = out / cfg["output"]
    save_measurement(m, path)
    return [path, Path(f"{path}.meta")]


def cmd_train(cfg: dict, out: Path, ctx: dict) -> list:
    ds = load_dataset(_input_path(cfg["dataset"], out, ctx["config_dir"]))
    if cfg["normalize"]:
        ds = minmax_normalize(ds)
    try:
        tcfg = TrainConfig(cfg["tau"], cfg["learning_rate"], cfg["batch_size"], cfg["steps"],
                           cfg["ema_coefficient"], ScalingConfig(cfg["c_r"], cfg["c_k"]),
                           DistanceKind(cfg["distance"], cfg["beta"]), cfg["seed"],
                           cfg["embedding_dim"], None, cfg["log_every"])
        res = train(ds, tcfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    enc_path, log_path = out / cfg["output"], out / cfg["log"]
    save_encoder(res.encoder, enc_path)
    save_log(res.log, log_path)
    return [enc_path, log_path]


def cmd_verify(cfg: dict, out: Path, ctx: dict) -> list:
    names = cfg["suites"]
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ConfigError(f"unknown suites: {', '.join(unknown)}")
    overrides: dict = {}
    for key, value in cfg.items():
        if "." in key and value is not None:
            suite, param = key.split(".", 1)
            overrides.setdefault(suite, {})[param] = value
    results = run_suites(names, cfg["seed"], overrides, ctx["jobs"])
    path = out / cfg["output"]
    write_atomic(path, rows_to_csv(results))
    rows = [r for group in results for r in group]
    ctx["convergence_failure"] = any(r.details.get("convergence") for r in rows)
    ctx["assertion_failure"] = any(not r.passed for r in rows)
    for name, group in zip(names, results):
        failed = sum(not r.passed for r in group)
        print(f"{name:18s} {'PASS' if not failed else 'FAIL'}  ({len(group) - failed}/{len(group)} rows)")
    return [path]


def summarize_report(path: Path) -> str:
    with open(path) as f:
        rows = list(csv.DictReader(f))
    stats: dict = {}
    for row in rows:
        s = stats.setdefault(row["probe"], [0, 0, 0.0])
        s[0] += 1
        s[1] += row["result"] == "pass"
        v = float(row["max_violation"])
        s[2] = max(s[2], v) if v == v else float("nan")
    lines = [f"{'probe':24s} {'rows':>5s} {'passed':>7s} {'max_violation':>14s}"]
    for probe, (n, ok, worst) in stats.items():
        lines.append(f"{probe:24s} {n:5d} {ok:7d} {worst:14.3g}")
    total_ok = sum(s[1] for s in stats.values())
    lines.append(f"overall: {'PASS' if total_ok == len(rows) else 'FAIL'} ({total_ok}/{len(rows)} rows)")
    return "\n".join(lines) + "\n"


def cmd_report(cfg: dict, out: Path, ctx: dict) -> list:
    src = Path(cfg["input"]) if cfg["input"] else out / "report.csv"
    if not src.exists():
        raise ConfigError(f"report input not found: {src}")
    text = summarize_report(src)
    sys.stdout.write(text)
    path = out / "summary.txt"
    write_atomic(path, text)
    return [path]


COMMANDS = {
    "gen": cmd_gen,
    "collect": cmd_collect,
    "solve": cmd_solve,
    "train": cmd_train,
    "verify": cmd_verify,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bisimlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"bisimlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="key = value config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker threads")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    started = time.perf_counter()
    try:
        raw = {}
        if args.config is not None:
            if not args.config.exists():
                raise ConfigError(f"config file not found: {args.config}")
            raw = parse_config_text(args.config.read_text())
        if args.seed is not None:
            raw["seed"] = str(args.seed)
        cfg = validate_config(args.command, raw)
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        args.out.mkdir(parents=True, exist_ok=True)
        ctx = {"jobs": args.jobs, "config_dir": args.config.parent if args.config else None}
        outputs = COMMANDS[args.command](cfg, args.out, ctx)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, KeyError, ValueError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    elapsed = time.perf_counter() - started
    write_manifest(args.out, args.command, cfg, outputs, {"total": round(elapsed, 3)})
    if ctx.get("convergence_failure"):
        return EXIT_CONVERGENCE
    if ctx.get("assertion_failure"):
        return EXIT_ASSERTION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
