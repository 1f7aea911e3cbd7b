"""Command-line entry point: ``hipda {synth,train,select,ablate,drift}``.

Every command takes an optional ``--config`` JSON file whose keys mirror the
long option names (dashes or underscores).  Explicit flags override the file,
which overrides the built-in defaults.  Data artifacts are deterministic in
the inputs and ``--seed``; wall-clock facts go to ``metadata.json`` only.

Exit codes: 0 success, 1 usage error, 2 data or schema error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import platform
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import losses as L
from .cohort import (CategoryError, CohortTable, LeakageError, ParseError, SchemaError,
                     complete_case_filter, load_cohort, load_schema, stratified_half_split, write_cohort)
from .evaluation import render_table, run_ablation, write_csv, write_json
from .network import save_checkpoint
from .selection import GridSpec, select
from .stats import RNG_ALGORITHM
from .synth import (SpecError, ShiftSpec, apply_shift, builtin_specs, default_outcome_model, generate,
                    get_spec, load_spec_file)
from .trainer import TrainConfig, train

log = logging.getLogger("hipda")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class NumericalError(Exception):
    pass


DEFAULTS = {
    "synth": {"spec": None, "n": None, "seed": 0, "out": None, "shift": None,
              "prevalence": 0.04, "no_outcome": False},
    "train": {"source": None, "target": None, "schema": None, "out": "run", "seed": 0,
              "flags": "", "profile": "female", "lr": 1e-3, "weight_decay": 1e-5, "batch_size": 64,
              "hidden": 256, "max_epochs": 200, "patience": 20, "clip": 1.0, "dropout": 0.1,
              "grl_lambda_max": 1.0},
    "select": {"source": None, "target": None, "schema": None, "out": "select", "seed": 0,
               "flags": "mmd,coral,dann", "profile": "female", "grid": [], "max_epochs": 200,
               "patience": 20, "jobs": 1},
    "ablate": {"source": None, "target": None, "schema": None, "out": "ablate", "seed": 0,
               "seeds": "0,1,2,3,4", "profile": "female", "lr": 1e-3, "weight_decay": 1e-5,
               "batch_size": 64, "hidden": 256, "max_epochs": 200, "patience": 20,
               "threshold": 0.5, "jobs": 1},
    "drift": {"source": None, "target": None, "schema": None, "out": None},
}

GRID_AXES = {"lr": "lrs", "wd": "weight_decays", "weight_decay": "weight_decays",
             "batch": "batch_sizes", "batch_size": "batch_sizes", "size": "sizes", "hidden": "sizes"}


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--config", help="JSON file with option values (flags override it)")
    if seed:
        p.add_argument("--seed", type=int, help="root seed for every random stream (default 0)")
    p.add_argument("-v", "--verbose", action="store_true")


def _data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--source", help="labeled source cohort CSV")
    p.add_argument("--target", help="target cohort CSV")
    p.add_argument("--schema", help="schema file (default: built-in 12-feature schema)")
    p.add_argument("--out", help="output directory")


def _train_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", choices=("female", "male", "custom"))
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--hidden", type=int, help="hidden = embedding width")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hipda", description=__doc__.split("\n\n")[0],
                                     argument_default=argparse.SUPPRESS)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort CSV", argument_default=argparse.SUPPRESS)
    p.add_argument("--spec", help=f"built-in spec ({', '.join(builtin_specs())}) or a spec JSON file")
    p.add_argument("--n", type=int, help="number of rows")
    p.add_argument("--out", help="output CSV path")
    p.add_argument("--shift", help="JSON file with a ShiftSpec (mean_offsets, sd_scales, ...)")
    p.add_argument("--prevalence", type=float, help="target outcome prevalence (default 0.04)")
    p.add_argument("--no-outcome", action="store_true", help="omit the outcome column")
    _common(p)

    p = sub.add_parser("train", help="train one model", argument_default=argparse.SUPPRESS)
    _data_args(p)
    _train_args(p)
    p.add_argument("--flags", help="alignment modules, e.g. mmd,coral,dann (empty = baseline)")
    p.add_argument("--clip", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--grl-lambda-max", type=float)
    _common(p)

    p = sub.add_parser("select", help="outcome-free grid search", argument_default=argparse.SUPPRESS)
    _data_args(p)
    p.add_argument("--profile", choices=("female", "male", "custom"))
    p.add_argument("--flags", help="alignment modules used by every grid point")
    p.add_argument("--grid", action="append",
                   help="restrict an axis, e.g. lr=1e-3,5e-4 (axes: lr, wd, batch, size); repeatable")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--jobs", type=int, help="worker processes")
    _common(p)

    p = sub.add_parser("ablate", help="8-combination x multi-seed ablation", argument_default=argparse.SUPPRESS)
    _data_args(p)
    _train_args(p)
    p.add_argument("--seeds", help="comma-separated training seeds (default 0,1,2,3,4)")
    p.add_argument("--threshold", type=float)
    p.add_argument("--jobs", type=int, help="worker processes")
    _common(p)

    p = sub.add_parser("drift", help="raw-feature shift report between two cohorts",
                       argument_default=argparse.SUPPRESS)
    _data_args(p)
    _common(p, seed=False)
    return parser


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """Merge built-in defaults < config file < explicit flags."""
    opts = dict(DEFAULTS[command])
    given = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "verbose")}
    cfg_path = getattr(ns, "config", None)
    if cfg_path:
        try:
            raw = json.loads(Path(cfg_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {cfg_path}: {exc}") from None
        if not isinstance(raw, dict):
            raise UsageError("config file must hold a JSON object")
        for k, v in raw.items():
            key = k.replace("-", "_")
            if key not in opts:
                raise UsageError(f"unknown config key {k!r} for {command}")
            opts[key] = v
    opts.update(given)
    if "seed" in opts and not isinstance(opts["seed"], int):
        raise UsageError("seed must be an integer")
    return opts


def _need(opts: dict, *keys: str) -> None:
    missing = [k for k in keys if opts.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


# ---------------------------------------------------------------------------
# helpers


def _schema(opts):
    return load_schema(opts["schema"]) if opts.get("schema") else None


def _load(path, schema, with_outcome: bool, what: str) -> CohortTable:
    table = load_cohort(path, schema, with_outcome=with_outcome)
    table, removed = complete_case_filter(table)
    if removed:
        log.info("%s: dropped %d incomplete rows", what, removed)
    return table


def _load_target(path, schema) -> CohortTable:
    """Load a pseudo-training target; a file that carries outcomes is refused."""
    table = _load(path, schema, True, "target")
    if table.y is not None:
        raise LeakageError(f"{path}: target file has an outcome column; "
                           "remove it before training or selection")
    return table


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_metadata(out: Path, command: str, opts: dict, started: float, extra: dict | None = None) -> None:
    meta = {
        "command": command, "options": opts, "version": __version__, "rng": RNG_ALGORITHM,
        "finished_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "runtime_s": round(time.perf_counter() - started, 3),
        "python": platform.python_version(), "numpy": np.__version__,
    }
    meta.update(extra or {})
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n",
                                       encoding="utf-8")


def _train_config(opts: dict, flags, seed: int) -> TrainConfig:
    return TrainConfig(lr=float(opts["lr"]), weight_decay=float(opts["weight_decay"]),
                       batch_size=int(opts["batch_size"]), hidden=int(opts["hidden"]),
                       max_epochs=int(opts["max_epochs"]), patience=int(opts["patience"]),
                       clip=float(opts.get("clip", 1.0)), dropout=float(opts.get("dropout", 0.1)),
                       flags=flags, profile=opts["profile"], seed=seed,
                       grl_lambda_max=float(opts.get("grl_lambda_max", 1.0)))


def parse_grid(items) -> dict:
    axes = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"grid entry {item!r} is not axis=v1,v2,...")
        key, _, values = item.partition("=")
        key = key.strip()
        if key not in GRID_AXES:
            raise UsageError(f"unknown grid axis {key!r}")
        conv = int if GRID_AXES[key] in ("batch_sizes", "sizes") else float
        try:
            axes[GRID_AXES[key]] = [conv(v) for v in values.split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"bad value in grid entry {item!r}") from None
        if not axes[GRID_AXES[key]]:
            raise UsageError(f"grid axis {key!r} is empty")
    return axes


def _parse_seeds(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(s) for s in text]
    try:
        return [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"seeds must be comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_synth(opts: dict) -> int:
    _need(opts, "spec", "n", "out")
    name = opts["spec"]
    spec = get_spec(name) if name in builtin_specs() else load_spec_file(name)
    if opts.get("shift"):
        shift = ShiftSpec.from_dict(json.loads(Path(opts["shift"]).read_text(encoding="utf-8")))
        spec = apply_shift(spec, shift)
    outcome = None if opts["no_outcome"] else default_outcome_model(float(opts["prevalence"]))
    table = generate(spec, outcome, int(opts["n"]), int(opts["seed"]))
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_cohort(table, out)
    msg = f"{out}: {table.n} rows"
    if table.y is not None:
        msg += f", {table.n_pos} cases, prevalence {table.n_pos / table.n:.4f}"
    print(msg)
    return EXIT_OK


def cmd_train(opts: dict) -> int:
    _need(opts, "source", "target")
    started = time.perf_counter()
    schema = _schema(opts)
    source = _load(opts["source"], schema, True, "source")
    target = _load_target(opts["target"], schema)
    cfg = _train_config(opts, opts["flags"], int(opts["seed"]))
    out = _outdir(opts["out"])
    with (out / "run_log.jsonl").open("w", encoding="utf-8") as fh:
        model = train(source, target, cfg, on_epoch=lambda rec: fh.write(rec.to_json() + "\n"))
    if not math.isfinite(model.best_val_loss):
        raise NumericalError("training produced a non-finite validation loss")
    digest = save_checkpoint(out / "model.ckpt", model.params, {"config": cfg.to_dict()})
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_metadata(out, "train", opts, started, {"checkpoint_sha256": digest})
    print(f"best epoch {model.best_epoch}, best validation loss {model.best_val_loss:.6f}")
    print(f"checkpoint {out / 'model.ckpt'} sha256 {digest}")
    return EXIT_OK


def cmd_select(opts: dict) -> int:
    _need(opts, "source", "target")
    started = time.perf_counter()
    schema = _schema(opts)
    source = _load(opts["source"], schema, True, "source")
    target = _load_target(opts["target"], schema)
    base = TrainConfig(max_epochs=int(opts["max_epochs"]), patience=int(opts["patience"]),
                       profile=opts["profile"])
    grid = GridSpec(profile=opts["profile"], flags=L.Flags.parse(opts["flags"]), base=base,
                    **parse_grid(opts["grid"]))
    report = select(source, target, grid, int(opts["seed"]), n_jobs=int(opts["jobs"]))
    out = _outdir(opts["out"])
    report.write_csv(out / "selection.csv")
    report.write_json(out / "selection.json")
    _write_metadata(out, "select", opts, started,
                    {"runtimes_s": [round(r.runtime_s, 3) for r in report.records]})
    b = report.best
    print(f"{len(report.records)} configurations; winner #{b.index}: lr={b.lr:g} wd={b.weight_decay:g} "
          f"batch={b.batch_size} size={b.hidden} delta={b.delta:.6g} ({report.tie_break})")
    return EXIT_OK


def cmd_ablate(opts: dict) -> int:
    """``--target`` is the full labeled target cohort; it is split 50/50 here and
    only the evaluation half's outcomes are ever read."""
    _need(opts, "source", "target")
    started = time.perf_counter()
    schema = _schema(opts)
    source = _load(opts["source"], schema, True, "source")
    target = _load(opts["target"], schema, True, "target")
    if target.y is None:
        raise SchemaError("ablate needs target outcomes for the evaluation half")
    split = stratified_half_split(target, int(opts["seed"]))
    seeds = _parse_seeds(opts["seeds"])
    if not seeds:
        raise UsageError("no seeds given")
    base = _train_config(opts, "", seeds[0])
    rows = run_ablation(source, split.pseudo.without_outcome(), split.evaluation, base, seeds,
                        threshold=float(opts["threshold"]), n_jobs=int(opts["jobs"]))
    out = _outdir(opts["out"])
    table = render_table(rows, f"Ablation: {source.label} -> {target.label} ({opts['profile']})")
    (out / "ablation.txt").write_text(table, encoding="utf-8")
    write_csv(rows, out / "ablation.csv")
    write_json(rows, out / "ablation.json")
    _write_metadata(out, "ablate", opts, started,
                    {"split": {"pseudo": int(split.pseudo.n), "evaluation": int(split.evaluation.n)}})
    print(table, end="")
    return EXIT_OK


def drift_report(source: CohortTable, target: CohortTable) -> dict:
    if source.schema.names != target.schema.names:
        raise SchemaError("source and target schemas differ")
    Xs, Xt = source.X, target.X
    feats = {}
    for j, name in enumerate(source.schema.names):
        feats[name] = {
            "source_mean": float(Xs[:, j].mean()), "target_mean": float(Xt[:, j].mean()),
            "mean_delta": float(Xt[:, j].mean() - Xs[:, j].mean()),
            "source_sd": float(Xs[:, j].std(ddof=1)), "target_sd": float(Xt[:, j].std(ddof=1)),
            "sd_delta": float(Xt[:, j].std(ddof=1) - Xs[:, j].std(ddof=1)),
        }
    return {"n_source": source.n, "n_target": target.n,
            "mmd2": L.mmd2_multiscale(Xs, Xt), "coral": L.coral(Xs, Xt), "features": feats}


def cmd_drift(opts: dict) -> int:
    _need(opts, "source", "target")
    schema = _schema(opts)
    source = _load(opts["source"], schema, False, "source")
    target = _load(opts["target"], schema, False, "target")
    report = drift_report(source, target)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if opts.get("out"):
        out = Path(opts["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
    print(f"MMD^2 {report['mmd2']:.6g}  CORAL {report['coral']:.6g}")
    for name, f in report["features"].items():
        print(f"  {name:18s} mean {f['mean_delta']:+10.4f}  sd {f['sd_delta']:+9.4f}")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "select": cmd_select,
            "ablate": cmd_ablate, "drift": cmd_drift}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors; remap to 1
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if getattr(ns, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve(ns.command, ns)
        return COMMANDS[ns.command](opts)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaError, ParseError, CategoryError, SpecError, LeakageError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, RuntimeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
