"""Command-line entry point: ``gfkd <command> --config run.yaml [--set section.key=value ...]``.

Output layout under ``output_dir``::

    teacher/  model.ckpt  metrics.csv  meta.json  config.frozen
    fake/     graphs.jsonl  generation_log.csv  config.frozen
    student/  student_seed<k>.ckpt  metrics_seed<k>.csv  results.json  config.frozen
    verify/   report.json  config.frozen
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .data import (DataError, DatasetMeta, default_data_root, load_tu_dataset, read_jsonl,
                   split_dataset, write_jsonl)
from .distill import DistillConfig, evaluate, train_student
from .generator import GenerationConfig, node_range_for, randg_baseline, run_generation
from .gnn import (CheckpointError, OptimizerConfig, load_checkpoint, model_from_tag, parse_arch,
                  save_checkpoint, train_teacher)
from .oracle import run_verification, sign_flipped

logger = logging.getLogger("gfkd")

DEFAULTS = {
    "output_dir": "runs/default",
    "dataset": {"path": "MUTAG", "feature_mode": None, "train_ratio": 0.7, "seed": 0},
    "teacher": {"arch": "GCN-5-64", "epochs": 400, "lr": 0.01, "batch_size": 32, "weight_decay": 0.0,
                "schedule": "constant", "recalibrate_bn": True, "readout": "sum", "seed": 0},
    "generation": {"method": "gfkd", "ratio": 1.0, "seed": 0},
    "distill": {"student_arch": "GCN-3-32", "tau": 2.0, "epochs": 400, "batch_size": 32, "base_lr": 0.01,
                "seeds": [0, 1, 2], "source": "fake", "readout": "sum"},
    "verify": {"n_draws": 200_000, "instances": 10, "seed": 0, "inject_fault": False},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the YAML file, then ``section.key=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        with open(path) as fh:
            cfg = _merge(cfg, yaml.safe_load(fh) or {})
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = cfg
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    for section in ("teacher", "distill"):
        arch_key = "arch" if section == "teacher" else "student_arch"
        try:
            parse_arch(str(cfg[section][arch_key]))
        except ValueError as e:
            raise ConfigError(str(e)) from None
    return cfg


def _freeze(cfg: dict, d: Path) -> None:
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.frozen").write_text(yaml.safe_dump(cfg, sort_keys=True))


def _write_csv(path: Path, rows: list, fields: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _dataset_dir(cfg: dict) -> Path:
    p = Path(cfg["dataset"]["path"])
    if not p.exists() and not p.is_absolute():
        p = default_data_root() / p
    if not p.exists():
        raise DataError(f"dataset directory not found: {cfg['dataset']['path']}")
    return p


def load_split(cfg: dict):
    ds = cfg["dataset"]
    overrides = {"feature_mode": ds["feature_mode"]} if ds.get("feature_mode") else None
    graphs, meta = load_tu_dataset(_dataset_dir(cfg), overrides)
    return split_dataset(graphs, ds["train_ratio"], ds["seed"]), meta


def _out(cfg: dict, sub: str) -> Path:
    return Path(cfg["output_dir"]) / sub


def _load_teacher(cfg: dict):
    path = _out(cfg, "teacher") / "model.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"teacher checkpoint not found: {path}")
    return load_checkpoint(path.read_bytes())


def _load_meta(cfg: dict) -> tuple[DatasetMeta, int]:
    path = _out(cfg, "teacher") / "meta.json"
    if not path.exists():
        raise FileNotFoundError(f"teacher metadata not found: {path}")
    d = json.loads(path.read_text())
    return DatasetMeta.from_dict(d["dataset"]), int(d["train_size"])


def cmd_train_teacher(cfg: dict) -> dict:
    t = cfg["teacher"]
    split, meta = load_split(cfg)
    model = model_from_tag(t["arch"], meta.feature_dim, meta.num_classes, np.random.default_rng(t["seed"]),
                           readout=t["readout"])
    opt = OptimizerConfig(lr=t["lr"], batch_size=t["batch_size"], weight_decay=t["weight_decay"],
                          schedule=t["schedule"], recalibrate_bn=t["recalibrate_bn"], seed=t["seed"])
    model, metrics = train_teacher(model, split, t["epochs"], opt)
    out = _out(cfg, "teacher")
    _freeze(cfg, out)
    (out / "model.ckpt").write_bytes(save_checkpoint(model))
    _write_csv(out / "metrics.csv", metrics, ["epoch", "train_loss", "test_acc"])
    (out / "meta.json").write_text(json.dumps({"dataset": meta.to_dict(), "train_size": len(split.train),
                                               "test_size": len(split.test)}, indent=2, sort_keys=True))
    final = metrics[-1]["test_acc"] if metrics else None
    logger.info("teacher %s: final test_acc %s", t["arch"], final)
    return {"test_acc": final, "checkpoint": str(out / "model.ckpt")}


def _generation_config(cfg: dict) -> GenerationConfig:
    g = {k: v for k, v in cfg["generation"].items() if k not in ("method", "ratio")}
    if g.get("node_range") is not None:
        g["node_range"] = tuple(g["node_range"])
    try:
        return GenerationConfig(learn_structure=cfg["generation"]["method"] != "deepinvg", **g)
    except TypeError as e:
        raise ConfigError(f"generation section: {e}") from None


def cmd_generate(cfg: dict) -> dict:
    gen = cfg["generation"]
    method = gen["method"]
    if method not in ("gfkd", "deepinvg", "randg"):
        raise ConfigError(f"unknown generation method {method!r}")
    meta, train_size = _load_meta(cfg)
    count = int(round(gen["ratio"] * train_size))
    gcfg = _generation_config(cfg)
    rng = np.random.default_rng(gcfg.seed)
    if method == "randg":
        fake = randg_baseline(meta, count, node_range_for(meta, gcfg), rng, gcfg.learn_diagonal)
    else:
        fake = run_generation(_load_teacher(cfg), gcfg, meta, count, rng)
    out = _out(cfg, "fake")
    _freeze(cfg, out)
    write_jsonl(fake.graphs, out / "graphs.jsonl", fake.extras())
    _write_csv(out / "generation_log.csv", fake.log,
               ["batch", "iteration", "objective", "ce_term", "bn_term", "entropy_term"])
    return {"count": len(fake), "path": str(out / "graphs.jsonl")}


def cmd_distill(cfg: dict) -> dict:
    d = cfg["distill"]
    teacher = _load_teacher(cfg)
    split, meta = load_split(cfg)
    if d["source"] == "real":
        data = split.train
    elif d["source"] == "fake":
        path = _out(cfg, "fake") / "graphs.jsonl"
        if not path.exists():
            raise FileNotFoundError(f"fake graph file not found: {path}")
        data, _ = read_jsonl(path)
    else:
        raise ConfigError(f"unknown distill source {d['source']!r}")
    if data and data[0].feature_dim != teacher.input_dim:
        raise ConfigError(f"graph feature dim {data[0].feature_dim} != teacher input_dim {teacher.input_dim}")
    out = _out(cfg, "student")
    _freeze(cfg, out)
    accs = []
    for seed in d["seeds"]:
        student = model_from_tag(d["student_arch"], teacher.input_dim, teacher.num_classes,
                                 np.random.default_rng(seed), readout=d["readout"])
        dc = DistillConfig(tau=d["tau"], epochs=d["epochs"], batch_size=d["batch_size"], base_lr=d["base_lr"], seed=seed)
        student, metrics = train_student(student, teacher, data, dc, split.test)
        (out / f"student_seed{seed}.ckpt").write_bytes(save_checkpoint(student))
        _write_csv(out / f"metrics_seed{seed}.csv", metrics, ["epoch", "kd_loss", "test_acc"])
        accs.append(evaluate(student, split.test))
    results = {"seeds": list(d["seeds"]), "accuracies": accs, "mean": float(np.mean(accs)),
               "std": float(np.std(accs)), "source": d["source"], "student_arch": d["student_arch"]}
    (out / "results.json").write_text(json.dumps(results, indent=2, sort_keys=True))
    return results


def cmd_eval(cfg: dict, checkpoint=None) -> dict:
    path = Path(checkpoint) if checkpoint else _out(cfg, "teacher") / "model.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model = load_checkpoint(path.read_bytes())
    split, _ = load_split(cfg)
    return {"checkpoint": str(path), "test_acc": evaluate(model, split.test), "n_test": len(split.test)}


def cmd_verify(cfg: dict) -> dict:
    v = cfg["verify"]
    estimator = sign_flipped() if v.get("inject_fault") else None
    kwargs = {"estimator": estimator} if estimator else {}
    result = run_verification(n_draws=v["n_draws"], seed=v["seed"], instances=v["instances"], **kwargs)
    out = _out(cfg, "verify")
    _freeze(cfg, out)
    (out / "report.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    if not result["passed"]:
        failing = {k: r for k, r in result["bias_tests"].items() if not r["passed"]}
        failing.update({k: r for k, r in result["gradient_checks"].items() if not r["passed"]})
        print(json.dumps({"failing": failing}, indent=2), file=sys.stderr)
    return result


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gfkd", description="Graph-free knowledge distillation runs.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("train-teacher", "generate", "distill", "eval", "verify"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "eval":
            sp.add_argument("--checkpoint", help="model to evaluate (default: the teacher)")
    return p


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "generate": cmd_generate,
    "distill": cmd_distill,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        if args.command == "eval":
            result = cmd_eval(cfg, args.checkpoint)
        else:
            result = COMMANDS[args.command](cfg)
    except (ConfigError, DataError, CheckpointError, FileNotFoundError, ValueError, RuntimeError) as e:
        print(f"gfkd {args.command}: error: {e}", file=sys.stderr)
        return 2
    if args.command == "verify":
        print(json.dumps({"passed": result["passed"],
                          "max_z_scores": {k: r["max_z_score"] for k, r in result["bias_tests"].items()}}, indent=2))
        return 0 if result["passed"] else 1
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
