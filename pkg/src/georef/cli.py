"""Command-line entry points and run artifacts.

Every subcommand reads a JSON run configuration (``--config``) with
``--set section.key=value`` overrides, writes its outputs under ``--out`` and
leaves a copy of the resolved configuration there. Exit codes: 0 success,
1 usage or configuration error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np
import torch

from . import evalmetrics as em
from .geometry import PoseState, SymmetrySpec
from .model import TABLE2_ROWS, ModelConfig, table2_config
from .netblocks import ConfigurationError
from .synthdata import DataConfig, generate_dataset, read_dataset, read_meta, write_dataset
from .train import TrainConfig, load_checkpoint, refine_batch, save_checkpoint, train

RESULTS_FORMAT = "georef-results/1"
SEED_ENV = "GEOREF_SEED"

COMMANDS = ("gen-data", "train", "refine", "eval", "ablate", "cct-stats", "plot")

# keys each command accepts at the top level of its run configuration
COMMAND_KEYS = {
    "gen-data": {"seed", "data"},
    "train": {"seed", "dataset", "model_preset", "model", "train", "val_records"},
    "refine": {"ckpt", "dataset", "split", "iters", "use_best"},
    "eval": {"dataset", "split", "source", "results", "categories"},
    "ablate": {"seed", "dataset", "model_preset", "model", "train", "rows", "iters"},
    "cct-stats": {"ckpt", "dataset", "split", "limit", "use_best"},
    "plot": {"metrics", "cct_stats"},
}

DEFAULTS = {
    "gen-data": {"seed": 0, "data": {}},
    "train": {"seed": 0, "model_preset": "desk", "model": {}, "train": {}, "val_records": 100},
    "refine": {"split": "test", "iters": 4, "use_best": False},
    "eval": {"split": "test", "source": "results", "results": None, "categories": None},
    "ablate": {"seed": 0, "model_preset": "desk", "model": {}, "train": {"epochs": 1},
               "rows": sorted(TABLE2_ROWS), "iters": 4},
    "cct-stats": {"split": "test", "limit": None, "use_best": False},
    "plot": {"metrics": None, "cct_stats": None},
}


class UsageError(Exception):
    pass


class IncompatibleFormatError(ValueError):
    pass


# --- run configuration -----------------------------------------------------------

def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg, assignment):
    if "=" not in assignment:
        raise UsageError(f"--set expects key=value, got {assignment!r}")
    key, value = assignment.split("=", 1)
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise UsageError(f"cannot set {key!r}: {p!r} is not a section")
    node[parts[-1]] = _parse_value(value)


def _strict_fields(cls, d, what):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigurationError(f"unknown {what} keys: {unknown}")


def resolve_config(command, file_cfg=None, overrides=(), env=None):
    """Merge defaults, the config file, ``GEOREF_SEED`` and ``--set`` overrides; reject unknown keys."""
    env = os.environ if env is None else env
    cfg = copy.deepcopy(DEFAULTS[command])
    for k, v in (file_cfg or {}).items():
        cfg[k] = v
    if SEED_ENV in env and "seed" in COMMAND_KEYS[command]:
        try:
            cfg["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigurationError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
    for o in overrides:
        apply_override(cfg, o)
    unknown = sorted(set(cfg) - COMMAND_KEYS[command])
    if unknown:
        raise ConfigurationError(f"unknown keys for {command}: {unknown}")
    # validate nested sections now so misspellings fail before any work starts
    if "data" in cfg:
        _strict_fields(DataConfig, cfg["data"], "data")
    if "train" in cfg:
        if "seed" in cfg["train"]:
            raise ConfigurationError("set the run seed at the top level, not inside 'train'")
        TrainConfig.from_dict(cfg["train"])
    if "model" in cfg:
        build_model_config(cfg)
    return cfg


def build_model_config(cfg):
    preset = cfg.get("model_preset", "desk")
    if preset not in ("desk", "reference"):
        raise ConfigurationError(f"model_preset must be 'desk' or 'reference', got {preset!r}")
    overrides = dict(cfg.get("model", {}))
    base = ModelConfig.desk() if preset == "desk" else ModelConfig()
    ModelConfig.from_dict({**base.to_dict(), **overrides})
    return base.replace(**overrides)


def build_train_config(cfg, deterministic=False):
    d = dict(cfg.get("train", {}))
    d["seed"] = int(cfg["seed"])
    if deterministic:
        d["deterministic"] = True
    return TrainConfig.desk(**d)


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise ConfigurationError(f"missing required config keys: {missing}")


# --- results files ---------------------------------------------------------------

@dataclasses.dataclass
class ResultEntry:
    index: int
    instance_id: str
    category: str
    symmetry: SymmetrySpec
    gt: PoseState
    trajectory: list

    def __eq__(self, other):
        return (self.index == other.index and self.instance_id == other.instance_id
                and self.category == other.category and self.symmetry == other.symmetry and self.gt == other.gt
                and len(self.trajectory) == len(other.trajectory)
                and all(a == b for a, b in zip(self.trajectory, other.trajectory)))


@dataclasses.dataclass
class ResultSet:
    entries: list
    iters: int
    fingerprint: str = ""
    meta: dict = dataclasses.field(default_factory=dict)


def save_results(results: ResultSet, path):
    doc = {
        "format": RESULTS_FORMAT,
        "fingerprint": results.fingerprint,
        "iters": results.iters,
        "meta": results.meta,
        "items": [{"index": e.index, "instance_id": e.instance_id, "category": e.category,
                   "symmetry": e.symmetry.to_dict(), "gt": e.gt.to_dict(),
                   "trajectory": [p.to_dict() for p in e.trajectory]} for e in results.entries],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # repr-based float output round-trips float64 exactly
    path.write_text(json.dumps(doc, sort_keys=True))


def load_results(path) -> ResultSet:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != RESULTS_FORMAT:
        raise IncompatibleFormatError(f"{path}: format {doc.get('format')!r} is not {RESULTS_FORMAT!r}")
    entries = [ResultEntry(it["index"], it["instance_id"], it["category"], SymmetrySpec.from_dict(it["symmetry"]),
                           PoseState.from_dict(it["gt"]), [PoseState.from_dict(p) for p in it["trajectory"]])
               for it in doc["items"]]
    return ResultSet(entries, doc["iters"], doc.get("fingerprint", ""), doc.get("meta", {}))


def result_set_from_trajectories(records, trajectories, iters, fingerprint="", meta=None):
    entries = [ResultEntry(i, r.instance_id, r.category, r.symmetry, r.gt, list(tr))
               for i, (r, tr) in enumerate(zip(records, trajectories))]
    return ResultSet(entries, iters, fingerprint, meta or {})


# --- commands --------------------------------------------------------------------

def _write_json(obj, path):
    em.write_json(obj, path)


def cmd_gen_data(cfg, out, args):
    """Generate a synthetic train/test dataset."""
    data_cfg = DataConfig(**cfg["data"])
    splits = generate_dataset(data_cfg, int(cfg["seed"]))
    meta = {"seed": int(cfg["seed"]), "data_config": dataclasses.asdict(data_cfg)}
    for split, recs in splits.items():
        write_dataset(recs, out, split, meta=meta)
    print(f"wrote {len(splits['train'])} train / {len(splits['test'])} test records to {out}")


def _fingerprint(model_cfg, train_cfg, dataset):
    meta = read_meta(dataset) if dataset else None
    return em.config_fingerprint(model_cfg, train_cfg, meta)


def cmd_train(cfg, out, args):
    """Train a refiner and write its checkpoint."""
    _require(cfg, "dataset")
    model_cfg = build_model_config(cfg)
    train_cfg = build_train_config(cfg, args.deterministic)
    records = read_dataset(cfg["dataset"], "train")
    val = None
    if cfg["val_records"]:
        test = read_dataset(cfg["dataset"], "test")
        val = test[: int(cfg["val_records"])]

    def log(entry):
        print(json.dumps(entry), flush=True)

    ckpt = train(records, model_cfg, train_cfg, val_records=val, checkpoint_path=out / "checkpoint.ckpt", log=log)
    save_checkpoint(ckpt, out / "checkpoint.ckpt")
    _write_json({"fingerprint": _fingerprint(model_cfg, train_cfg, cfg["dataset"]), "history": ckpt.history,
                 "best_epoch": ckpt.best_epoch}, out / "history.json")


def _load_model(cfg):
    ckpt = load_checkpoint(cfg["ckpt"])
    return ckpt, ckpt.build_model(best=bool(cfg.get("use_best")))


def cmd_refine(cfg, out, args):
    """Run iterative refinement and write per-instance trajectories."""
    _require(cfg, "ckpt", "dataset")
    ckpt, model = _load_model(cfg)
    iters = int(cfg["iters"])
    records = read_dataset(cfg["dataset"], cfg["split"])
    trajs = refine_batch(model, records, iters)
    fp = _fingerprint(ckpt.model_cfg, ckpt.train_cfg, cfg["dataset"])
    save_results(result_set_from_trajectories(records, trajs, iters, fp, {"split": cfg["split"]}),
                 out / "results.json")
    print(f"refined {len(records)} records for {iters} iterations")


def cmd_eval(cfg, out, args):
    """Score results (or gt/init poses) with the pose metric suite."""
    source = cfg["source"]
    if source == "results":
        _require(cfg, "results")
        rs = load_results(cfg["results"])
        fp = rs.fingerprint
        n_steps = rs.iters + 1
        items_at = [[em.ResultItem(e.trajectory[i], e.gt, e.category, e.symmetry) for e in rs.entries]
                    for i in range(n_steps)]
    elif source in ("gt", "init"):
        _require(cfg, "dataset")
        records = read_dataset(cfg["dataset"], cfg["split"])
        fp = em.config_fingerprint(None, None, read_meta(cfg["dataset"]))
        items_at = [[em.ResultItem(r.gt if source == "gt" else r.init, r.gt, r.category, r.symmetry)
                     for r in records]]
    else:
        raise ConfigurationError(f"source must be 'results', 'gt' or 'init', got {source!r}")
    reports = [em.compute_metrics(items, cfg["categories"], fp) for items in items_at]
    _write_json({"fingerprint": fp, "final": reports[-1], "curve": reports}, out / "metrics.json")
    em.write_curve_csv(reports, out / "curve.csv")
    print(json.dumps(reports[-1].mean))


def cmd_ablate(cfg, out, args):
    """Train and evaluate a set of ablation rows."""
    _require(cfg, "dataset")
    base = build_model_config(cfg)
    train_cfg = build_train_config(cfg, args.deterministic)
    unknown = [r for r in cfg["rows"] if r not in TABLE2_ROWS]
    if unknown:
        raise ConfigurationError(f"unknown ablation rows: {unknown}")
    rows = {r: table2_config(r, base) for r in cfg["rows"]}
    train_recs = read_dataset(cfg["dataset"], "train")
    test_recs = read_dataset(cfg["dataset"], "test")
    meta = read_meta(cfg["dataset"])

    def log(row):
        status = row.error or json.dumps(row.report.mean)
        print(f"{row.name} ({row.seconds:.0f}s): {status}", flush=True)

    table = em.ablation_suite(train_recs, test_recs, rows, train_cfg, int(cfg["iters"]), data_meta=meta, log=log)
    _write_json({"rows": table}, out / "ablation.json")
    em.write_table_csv(table, out / "ablation.csv")
    if any(r.error for r in table):
        raise RuntimeError("some ablation rows failed: " + ", ".join(r.name for r in table if r.error))


def cmd_cct_stats(cfg, out, args):
    """Feature distances before and after cross-cloud mixing."""
    _require(cfg, "ckpt", "dataset")
    ckpt, model = _load_model(cfg)
    records = read_dataset(cfg["dataset"], cfg["split"])
    if cfg["limit"]:
        records = records[: int(cfg["limit"])]
    stats = em.cct_feature_stats(model, records)
    _write_json({"fingerprint": _fingerprint(ckpt.model_cfg, ckpt.train_cfg, cfg["dataset"]), **stats},
                out / "cct_stats.json")
    print(json.dumps(stats["summary"]))


def cmd_plot(cfg, out, args):
    """Plot an iteration curve and/or CCT statistics."""
    if not cfg["metrics"] and not cfg["cct_stats"]:
        raise ConfigurationError("plot needs 'metrics' and/or 'cct_stats' input files")
    if cfg["metrics"]:
        doc = json.loads(Path(cfg["metrics"]).read_text())
        reports = [em.MetricReport.from_dict(r) for r in doc["curve"]]
        em.plot_iteration_curve(reports, out / "iteration_curve.png")
    if cfg["cct_stats"]:
        doc = json.loads(Path(cfg["cct_stats"]).read_text())
        em.plot_cct_box({"before": np.array(doc["before"]), "after": np.array(doc["after"])}, out / "cct_box.png")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "cct-stats": cmd_cct_stats,
    "plot": cmd_plot,
}


# --- dispatch --------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser():
    parser = _Parser(prog="georef", description="Category-level pose refinement toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HANDLERS[name].__doc__ or name)
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. train.epochs=3")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--deterministic", action="store_true", help="bit-reproducible training")
    return parser


def cli_dispatch(argv=None, env=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        file_cfg = {}
        if args.config is not None:
            try:
                file_cfg = json.loads(args.config.read_text())
            except OSError as exc:
                raise UsageError(f"cannot read config: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise UsageError(f"config {args.config} is not valid JSON: {exc}") from exc
            if not isinstance(file_cfg, dict):
                raise UsageError("config file must hold a JSON object")
        cfg = resolve_config(args.command, file_cfg, args.overrides, env)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ConfigurationError, TypeError) as exc:
        print(str(exc), file=sys.stderr)
        return 1

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    resolved = {"command": args.command, "deterministic": args.deterministic, **cfg}
    (out / "resolved_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))
    prev = torch.are_deterministic_algorithms_enabled()
    if args.deterministic:
        torch.use_deterministic_algorithms(True)
    try:
        HANDLERS[args.command](cfg, out, args)
    except (ConfigurationError, TypeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if os.environ.get("GEOREF_DEBUG"):
            traceback.print_exc()
        return 2
    finally:
        torch.use_deterministic_algorithms(prev)
    return 0


def main(argv=None):
    sys.exit(cli_dispatch(argv))
