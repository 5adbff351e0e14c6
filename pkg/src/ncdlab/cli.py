"""Command-line experiment runner.

Subcommands cover the full workflow: generate a dataset, pretrain on known
classes, run joint discovery, evaluate, sweep a hyperparameter grid, and
inspect relation profiles. Every run writes its resolved config, delimited
outputs, and (unless suppressed) rendered figures into a fresh directory
named by config hash and timestamp.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import data as data_mod
from . import metrics as metrics_mod
from . import model as model_mod
from . import report
from . import trainer as trainer_mod
from .config import RunConfig, apply_overrides, load_config
from .data import SplitFlag
from .losses import parse_weight_mode

SWEEP_CSV_COLUMNS = ("value", "seed", "status", "train_novel_acc",
                     "known_acc", "novel_acc", "all_acc")


def _output_root(args) -> Path:
    if getattr(args, "out_root", None):
        return Path(args.out_root)
    return Path(os.environ.get("NCD_LAB_OUT", "runs"))


def _make_run_dir(root: Path, command: str, cfg_hash: str) -> Path:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    base = root / f"{command}-{cfg_hash}-{stamp}"
    run_dir = base
    suffix = 1
    while run_dir.exists():
        run_dir = Path(f"{base}-{suffix}")
        suffix += 1
    run_dir.mkdir(parents=True)
    return run_dir


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return apply_overrides(cfg, getattr(args, "set", None) or [])


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_eval(path: Path, rep: metrics_mod.EvalReport, cfg: RunConfig) -> None:
    _write_json(path, rep.to_json_dict(cfg.seed, cfg.beta,
                                       cfg.weight_mode.value))


def _oracle_path_for(data_path: Path) -> Path:
    return data_path.with_name(data_path.stem + ".oracle.json")


def cmd_generate(args) -> int:
    if args.spec:
        with open(args.spec) as fh:
            spec = data_mod.spec_from_text(fh.read().splitlines())
    else:
        spec = data_mod.SyntheticSpec()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset, oracle = data_mod.generate(spec)
    data_mod.save(dataset, out)
    oracle_path = _oracle_path_for(out)
    oracle.save(oracle_path)
    spec_path = out.with_name(out.stem + ".spec.txt")
    with open(spec_path, "w") as fh:
        fh.write(data_mod.spec_to_text(spec))
    print(f"dataset={out}")
    print(f"oracle={oracle_path}")
    return 0


def run_pretrain(dataset, cfg: RunConfig, run_dir: Path) -> model_mod.ModelParams:
    """Supervised stage plus its standard artifacts in run_dir."""
    cfg.save(run_dir / "config.txt")
    log = trainer_mod.TrainLog()
    started = time.perf_counter()
    params = trainer_mod.pretrain(dataset, cfg, log)
    elapsed = time.perf_counter() - started
    model_mod.save_checkpoint(params, run_dir / "teacher.ckpt")
    log.write_jsonl(run_dir / "pretrain_log.jsonl")
    with open(run_dir / "timings.txt", "w") as fh:
        fh.write(f"pretrain_seconds={elapsed:.3f}\n")
    return params


def cmd_pretrain(args) -> int:
    dataset = data_mod.load(args.data)
    cfg = _resolve_config(args)
    run_dir = _make_run_dir(_output_root(args), "pretrain", cfg.config_hash())
    run_pretrain(dataset, cfg, run_dir)
    print(f"run_dir={run_dir}")
    return 0


def run_discovery(dataset, cfg: RunConfig, run_dir: Path,
                  pretrained: model_mod.ModelParams | None = None,
                  figures: bool = True) -> metrics_mod.EvalReport:
    """Full discovery pipeline with its artifacts; pretrains if not given one.

    Writes config.txt, teacher/student checkpoints, trainlog.jsonl,
    eval.json, and a timing sidecar. The sidecar keeps wall-clock out of
    the log records, which stay byte-reproducible across invocations.
    """
    cfg.save(run_dir / "config.txt")
    timings = {}
    if pretrained is None:
        started = time.perf_counter()
        pretrain_log = trainer_mod.TrainLog()
        pretrained = trainer_mod.pretrain(dataset, cfg, pretrain_log)
        timings["pretrain_seconds"] = time.perf_counter() - started
        pretrain_log.write_jsonl(run_dir / "pretrain_log.jsonl")
    model_mod.save_checkpoint(pretrained, run_dir / "teacher.ckpt")
    started = time.perf_counter()
    student, log = trainer_mod.discover(dataset, pretrained, cfg,
                                        checkpoint_dir=run_dir)
    timings["discover_seconds"] = time.perf_counter() - started
    model_mod.save_checkpoint(student, run_dir / "student.ckpt")
    log.write_jsonl(run_dir / "trainlog.jsonl")
    rep = metrics_mod.task_agnostic_eval(student, dataset, cfg.tau)
    _write_eval(run_dir / "eval.json", rep, cfg)
    with open(run_dir / "timings.txt", "w") as fh:
        for key in sorted(timings):
            fh.write(f"{key}={timings[key]:.3f}\n")
    if figures:
        report.plot_training_curves(log.records, run_dir / "training_curves.png")
        report.plot_confusion(rep.confusion, run_dir / "confusion.png")
    return rep


def cmd_discover(args) -> int:
    dataset = data_mod.load(args.data)
    cfg = _resolve_config(args)
    pretrained = model_mod.load_checkpoint(args.teacher) if args.teacher else None
    run_dir = _make_run_dir(_output_root(args), "discover", cfg.config_hash())
    rep = run_discovery(dataset, cfg, run_dir, pretrained,
                        figures=not args.no_figures)
    print(f"run_dir={run_dir}")
    print(f"known_acc={rep.known_acc:.4f} novel_cluster_acc="
          f"{rep.novel_cluster_acc:.4f} all_acc={rep.all_acc:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    dataset = data_mod.load(args.data)
    cfg = _resolve_config(args)
    params = model_mod.load_checkpoint(args.model)
    run_dir = _make_run_dir(_output_root(args), "evaluate", cfg.config_hash())
    cfg.save(run_dir / "config.txt")
    rep = metrics_mod.task_agnostic_eval(params, dataset, cfg.tau)
    _write_eval(run_dir / "eval.json", rep, cfg)
    if args.dump_embeddings:
        test = np.flatnonzero((dataset.split == SplitFlag.TEST_KNOWN)
                              | (dataset.split == SplitFlag.TEST_NOVEL))
        emb = model_mod.forward(params, dataset.features[test],
                                cfg.tau).embedding.values
        labels = dataset.ground_truth_labels(test)
        with open(run_dir / "embeddings.csv", "w") as fh:
            dims = ",".join(f"e{i}" for i in range(emb.shape[1]))
            fh.write(f"index,split,label,{dims}\n")
            for row, idx in enumerate(test):
                flag = SplitFlag(dataset.split[idx]).name.lower()
                coords = ",".join(repr(float(v)) for v in emb[row])
                fh.write(f"{idx},{flag},{labels[row]},{coords}\n")
    if not args.no_figures:
        report.plot_confusion(rep.confusion, run_dir / "confusion.png")
    print(f"run_dir={run_dir}")
    print(f"known_acc={rep.known_acc:.4f} novel_cluster_acc="
          f"{rep.novel_cluster_acc:.4f} all_acc={rep.all_acc:.4f}")
    return 0


def averaged_relations(params: model_mod.ModelParams, dataset,
                       t: float) -> np.ndarray:
    """Mean known-class distribution per true novel class, rows ordered by id."""
    idx = np.flatnonzero(dataset.split == SplitFlag.UNLABELED_NOVEL)
    rel = model_mod.teacher_relation(params, dataset.features[idx], t)
    labels = dataset.ground_truth_labels(idx)
    rows = []
    for class_id in range(dataset.n_known, dataset.n_known + dataset.n_novel):
        rows.append(rel[labels == class_id].mean(axis=0))
    return np.array(rows)


def cmd_relation(args) -> int:
    dataset = data_mod.load(args.data)
    cfg = _resolve_config(args)
    student = model_mod.load_checkpoint(args.model)
    teacher = model_mod.load_checkpoint(args.teacher)
    oracle_path = Path(args.oracle) if args.oracle else _oracle_path_for(
        Path(args.data))
    oracle = data_mod.RelationOracle.load(oracle_path)

    teacher_rows = averaged_relations(teacher, dataset, cfg.t)
    student_rows = averaged_relations(student, dataset, cfg.t)
    truth = oracle.ground_truth_affinity
    if truth.shape != teacher_rows.shape:
        raise ValueError(f"oracle shape {truth.shape} does not match "
                         f"dataset relations {teacher_rows.shape}")

    def correlations(rows: np.ndarray) -> list[float]:
        return [float(spearmanr(truth[i], rows[i]).statistic)
                for i in range(truth.shape[0])]

    teacher_rho = correlations(teacher_rows)
    student_rho = correlations(student_rows)
    run_dir = _make_run_dir(_output_root(args), "relation", cfg.config_hash())
    cfg.save(run_dir / "config.txt")
    _write_json(run_dir / "relation.json", {
        "oracle": truth.tolist(),
        "teacher": teacher_rows.tolist(),
        "student": student_rows.tolist(),
        "teacher_spearman": teacher_rho,
        "student_spearman": student_rho,
        "teacher_spearman_mean": float(np.mean(teacher_rho)),
        "student_spearman_mean": float(np.mean(student_rho)),
    })
    if not args.no_figures:
        report.plot_relation_profiles(truth, teacher_rows, student_rows,
                                      run_dir / "relation.png")
    print(f"run_dir={run_dir}")
    print(f"teacher_spearman_mean={np.mean(teacher_rho):.4f} "
          f"student_spearman_mean={np.mean(student_rho):.4f}")
    return 0


def sweep_config(base: RunConfig, param: str, value: str, seed: int,
                 n_novel_true: int) -> RunConfig:
    """Specialize the base config for one sweep cell."""
    cfg = apply_overrides(base, [f"seed={seed}"])
    if param == "beta":
        return apply_overrides(cfg, [f"beta={float(value)!r}"])
    if param == "weight_mode":
        mode = parse_weight_mode(value)
        return apply_overrides(cfg, [f"weight_mode={mode.value}"])
    if param == "novel_count_error":
        percent = float(value.replace("%", "").replace("+", ""))
        count = round(n_novel_true * (1.0 + percent / 100.0))
        if count < 1:
            raise ValueError(f"novel count error {value} leaves no clusters")
        return apply_overrides(cfg, [f"novel_count_override={count}"])
    raise ValueError(f"unknown sweep parameter {param!r}")


def _sweep_cell(payload: tuple) -> dict:
    """One (value, seed) run; returns its CSV row. Safe in a worker process."""
    data_path, cfg_text, pretrain_path, param, value, seed = payload
    row = {"value": value, "seed": seed, "status": "ok",
           "train_novel_acc": "", "known_acc": "", "novel_acc": "",
           "all_acc": ""}
    try:
        dataset = data_mod.load(data_path)
        base = RunConfig()
        base = apply_overrides(base, cfg_text.splitlines())
        cfg = sweep_config(base, param, value, seed, dataset.n_novel)
        pretrained = model_mod.load_checkpoint(pretrain_path)
        student, _ = trainer_mod.discover(dataset, pretrained, cfg)
        rep = metrics_mod.task_agnostic_eval(student, dataset, cfg.tau)
        row["train_novel_acc"] = repr(
            metrics_mod.train_novel_cluster_acc(student, dataset, cfg.tau))
        row["known_acc"] = repr(rep.known_acc)
        row["novel_acc"] = repr(rep.novel_cluster_acc)
        row["all_acc"] = repr(rep.all_acc)
    except Exception as exc:
        row["status"] = f"error: {type(exc).__name__}: {exc}"
    return row


def cmd_sweep(args) -> int:
    dataset = data_mod.load(args.data)
    base = _resolve_config(args)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ValueError("sweep needs at least one value")
    seeds = list(range(args.seeds))
    run_dir = _make_run_dir(_output_root(args), "sweep", base.config_hash())
    base.save(run_dir / "config.txt")

    # one pretrain per seed, shared by every value on that seed
    pretrain_paths = {}
    for seed in seeds:
        cfg = apply_overrides(base, [f"seed={seed}"])
        path = run_dir / f"pretrain_seed{seed}.ckpt"
        model_mod.save_checkpoint(trainer_mod.pretrain(dataset, cfg), path)
        pretrain_paths[seed] = path

    jobs = [(str(args.data), base.to_text(), str(pretrain_paths[seed]),
             args.param, value, seed)
            for value in values for seed in seeds]
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            rows = list(pool.map(_sweep_cell, jobs))
    else:
        rows = [_sweep_cell(job) for job in jobs]

    csv_path = run_dir / "sweep.csv"
    with open(csv_path, "w") as fh:
        fh.write(",".join(SWEEP_CSV_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(str(row[c]) for c in SWEEP_CSV_COLUMNS) + "\n")

    failures = [row for row in rows if row["status"] != "ok"]
    summary = {}
    for value in values:
        accs = [float(r["train_novel_acc"]) for r in rows
                if r["value"] == value and r["status"] == "ok"]
        summary[value] = {
            "n_ok": len(accs),
            "train_novel_acc_mean": float(np.mean(accs)) if accs else None,
            "train_novel_acc_std": float(np.std(accs)) if accs else None,
        }
    _write_json(run_dir / "summary.json", {"param": args.param,
                                           "values": summary})
    if failures:
        _write_json(run_dir / "failures.json", {"failures": failures})
    if not args.no_figures:
        ok_rows = [r for r in rows if r["status"] == "ok"]
        if ok_rows:
            report.plot_sweep(ok_rows, "train_novel_acc",
                              run_dir / "sweep.png")
    print(f"run_dir={run_dir}")
    print(f"csv={csv_path}")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ncdlab",
        description="Novel class discovery experiments on synthetic data")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, data=True):
        if data:
            p.add_argument("--data", required=True, help=".ncdcsv dataset path")
        p.add_argument("--config", help="key=value run config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--out-root",
                       help="output root (default $NCD_LAB_OUT or ./runs)")
        p.add_argument("--no-figures", action="store_true",
                       help="skip figure rendering")

    p = sub.add_parser("generate", help="write a synthetic dataset + oracle")
    p.add_argument("--spec", help="key=value synthetic spec file")
    p.add_argument("--out", required=True, help="output .ncdcsv path")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="supervised stage on known classes")
    add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("discover", help="joint discovery stage")
    add_common(p)
    p.add_argument("--teacher", help="pretrained checkpoint "
                                     "(omit to pretrain first)")
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    add_common(p)
    p.add_argument("--model", required=True, help="checkpoint to score")
    p.add_argument("--dump-embeddings", action="store_true",
                   help="also write test-set embeddings as CSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="grid over beta, weight_mode, or "
                                     "novel_count_error")
    add_common(p)
    p.add_argument("--param", required=True,
                   choices=["beta", "weight_mode", "novel_count_error"])
    p.add_argument("--values", required=True,
                   help="comma-separated grid values")
    p.add_argument("--seeds", type=int, default=5,
                   help="number of seeds (0..N-1)")
    p.add_argument("--parallel", type=int, default=1,
                   help="worker processes for sweep cells")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("relation", help="averaged relation profiles vs oracle")
    add_common(p)
    p.add_argument("--model", required=True, help="student checkpoint")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--oracle", help="oracle JSON "
                                    "(default: alongside the dataset)")
    p.set_defaults(func=cmd_relation)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
