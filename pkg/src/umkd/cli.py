"""Experiment runner CLI.

`umkd run <config.yaml>` executes the configured workflow (expert
training, distillation or a baseline, evaluation) for every seed and
writes records, metric reports, figures, and a summary table into a run
directory. `umkd compare <dirs...>` aligns completed runs into one
comparison table.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from pathlib import Path

import torch

from .backbones import build_backbone, save_checkpoint
from .config import ExperimentConfig, load_config, resolved_yaml
from .datasets import (GradingDataset, ImbalanceProfile, SplitConfig,
                       channel_stats, load_image_folder, normalize, split,
                       subsample_to_profile, synth_grading_dataset,
                       write_manifest)
from .errors import SchemaError
from . import reports
from .trainer import (DistillConfig, distill, distill_logits_baseline,
                      train_expert, train_supervised)

OUTPUT_ROOT_ENV = "UMKD_OUTPUT_ROOT"


def _derive(*parts: int) -> int:
    """Deterministic seed mixing."""
    h = 0
    for part in parts:
        h = (h * 1000003 + part + 0x9E3779B9) % (2**31)
    return h


def _build_datasets(cfg: ExperimentConfig, dcfg: DistillConfig, seed: int):
    """Materialize the source/target pipelines for one protocol and seed."""
    ds = cfg.dataset
    num_classes = int(ds.get("num_classes", 4))
    if ds.get("kind", "synthetic") == "synthetic":
        imb = tuple(int(c) for c in ds["imbalanced_counts"])
        bal = tuple(int(c) for c in ds["balanced_counts"])
        pool_counts = tuple(max(a, b) for a, b in zip(imb, bal))
        pool = synth_grading_dataset(
            num_classes, pool_counts,
            resolution=tuple(ds.get("resolution", (32, 32))),
            noise_level=float(ds.get("noise_level", 0.3)),
            seed=_derive(int(ds.get("seed", 0)), seed),
            name=f"synthetic-seed{seed}",
        )
    else:
        pool = load_image_folder(ds["root"])
        imb = tuple(int(c) for c in ds["imbalanced_counts"])
        bal = tuple(int(c) for c in ds["balanced_counts"])

    if dcfg.protocol == "sources-imbalanced":
        source_counts, target_counts = imb, bal
    else:
        source_counts, target_counts = bal, imb

    source = subsample_to_profile(
        pool, ImbalanceProfile(source_counts, seed=_derive(seed, 1)))
    target = subsample_to_profile(
        pool, ImbalanceProfile(target_counts, seed=_derive(seed, 2)))

    def pipeline(dataset: GradingDataset, tag: int):
        cfg_split = SplitConfig(ratios=cfg.split.ratios,
                                seed=_derive(cfg.split.seed, seed, tag),
                                stratified=cfg.split.stratified)
        train, val, test = split(dataset, cfg_split)
        mean, std = channel_stats(train)
        return (normalize(train, mean, std), normalize(val, mean, std),
                normalize(test, mean, std))

    return pipeline(source, 1), pipeline(target, 2)


def run_seed(cfg: ExperimentConfig, seed: int, seed_dir: Path) -> dict:
    """Execute one seed of the configured workflow; returns test metrics."""
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(seed)

    dcfg = cfg.distill_config(seed)
    (src_train, src_val, _), (tgt_train, tgt_val, tgt_test) = \
        _build_datasets(cfg, dcfg, seed)

    reports.ensure_dir(seed_dir / "checkpoints")
    reports.ensure_dir(seed_dir / "figures")
    write_manifest(src_train, seed_dir / "manifest_source_train.json", seed=seed)
    write_manifest(tgt_train, seed_dir / "manifest_target_train.json", seed=seed)

    experts = []
    expert_records = []
    if cfg.method != "supervised":
        for i, spec in enumerate(cfg.expert_specs):
            bundle, record = train_expert(spec, src_train, dcfg,
                                          seed=_derive(seed, 10 + i),
                                          val_ds=src_val)
            save_checkpoint(bundle.backbone, seed_dir / "checkpoints" / f"expert_{i}.pt")
            experts.append(bundle)
            expert_records.append(record.to_dict())

    student = build_backbone(cfg.student_spec, seed=_derive(seed, 99))
    if cfg.method == "umkd":
        student, record = distill(experts, student, tgt_train, dcfg,
                                  val_ds=tgt_val, test_ds=tgt_test)
    elif cfg.method in ("kd", "dkd"):
        student, record = distill_logits_baseline(
            cfg.method, experts, student, tgt_train, dcfg,
            val_ds=tgt_val, test_ds=tgt_test)
    else:
        student, record = train_supervised(student, tgt_train, dcfg,
                                           val_ds=tgt_val, test_ds=tgt_test)
    record.method = cfg.method

    save_checkpoint(student, seed_dir / "checkpoints" / "student.pt")
    (seed_dir / "record.json").write_text(
        json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n")
    (seed_dir / "experts.json").write_text(
        json.dumps(expert_records, indent=2, sort_keys=True) + "\n")
    report = record.test_report
    (seed_dir / "metrics.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    (seed_dir / "metrics.txt").write_text(report.to_text())
    reports.plot_training_curves(record.epoch_losses,
                                 seed_dir / "figures" / "loss_curves.png")
    return report.to_dict()


def run_experiment(cfg: ExperimentConfig, root: Path) -> Path:
    run_dir = reports.ensure_dir(root / cfg.name)
    (run_dir / "config_echo.yaml").write_text(resolved_yaml(cfg))
    (run_dir / "status.json").write_text(json.dumps({"status": "running"}) + "\n")
    try:
        per_seed = {}
        for seed in cfg.seeds:
            seed_dir = reports.ensure_dir(run_dir / f"seed_{seed}")
            per_seed[seed] = run_seed(cfg, seed, seed_dir)
        summary = {
            "name": cfg.name,
            "method": cfg.method,
            "per_seed": {str(s): m for s, m in per_seed.items()},
            "median": reports.median_metrics(list(per_seed.values())),
        }
        (run_dir / "summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n")
        (run_dir / "summary.md").write_text(
            f"# {cfg.name} ({cfg.method})\n\n"
            + reports.summary_table(cfg.method, per_seed))
        reports.write_summary_csv(run_dir / "summary.csv", cfg.method, per_seed)
        reports.ensure_dir(run_dir / "figures")
        reports.plot_seed_metrics(per_seed, run_dir / "figures" / "seed_metrics.png")
    except Exception:
        (run_dir / "status.json").write_text(
            json.dumps({"status": "incomplete"}) + "\n")
        raise
    (run_dir / "status.json").write_text(json.dumps({"status": "complete"}) + "\n")
    return run_dir


def _load_summary(run_dir: Path) -> dict | None:
    status_path = run_dir / "status.json"
    summary_path = run_dir / "summary.json"
    if not summary_path.exists():
        return None
    if status_path.exists():
        status = json.loads(status_path.read_text()).get("status")
        if status != "complete":
            return None
    return json.loads(summary_path.read_text())


def compare(run_dirs: list[Path], out_dir: Path) -> str:
    """Aligned comparison of completed runs; returns the markdown table."""
    medians: dict[str, dict] = {}
    loaded = 0
    for run_dir in run_dirs:
        summary = _load_summary(Path(run_dir))
        if summary is None:
            print(f"warning: skipping incomplete run {run_dir}", file=sys.stderr)
            continue
        loaded += 1
        key = summary["method"]
        if key in medians:
            key = f"{summary['method']}@{summary['name']}"
        medians[key] = summary["median"]
    if loaded < 2:
        raise SchemaError("compare needs at least two completed runs")
    table = reports.comparison_table(medians)
    out = reports.ensure_dir(out_dir)
    (out / "comparison.md").write_text(table)
    reports.write_comparison_csv(out / "comparison.csv", medians)
    reports.plot_method_comparison(medians, out / "comparison.png")
    return table


def _stage_plan(cfg: ExperimentConfig) -> str:
    stages = []
    for seed in cfg.seeds:
        if cfg.method != "supervised":
            stages.append(
                f"seed {seed}: train {len(cfg.expert_specs)} expert(s) "
                f"on the {cfg.distill_config(seed).protocol} source split")
        stages.append(f"seed {seed}: {cfg.method} student training + evaluation")
    stages.append("aggregate: summary table, CSV, figures")
    return "\n".join(f"  - {s}" for s in stages)


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except (SchemaError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.seed_override:
        cfg.seeds = tuple(args.seed_override)
    if args.deterministic:
        cfg.deterministic = True
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, cfg.output_dir))
    if args.dry_run:
        print(resolved_yaml(cfg))
        print("planned stages:")
        print(_stage_plan(cfg))
        return 0
    try:
        run_dir = run_experiment(cfg, root)
    except Exception as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        traceback.print_exc()
        return 1
    print(f"run complete: {run_dir}")
    return 0


def cmd_compare(args) -> int:
    try:
        table = compare([Path(d) for d in args.run_dirs], Path(args.out))
    except SchemaError as exc:
        print(f"compare error: {exc}", file=sys.stderr)
        return 2
    print(table)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="umkd",
        description="Multi-expert distillation experiment runner",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a configured experiment")
    run_p.add_argument("config", help="path to the YAML experiment config")
    run_p.add_argument("--dry-run", action="store_true",
                       help="print the resolved config and planned stages")
    run_p.add_argument("--seed-override", type=int, nargs="+", default=None,
                       help="replace the config's seed list")
    run_p.add_argument("--deterministic", action="store_true",
                       help="force deterministic algorithms")
    run_p.set_defaults(func=cmd_run)

    cmp_p = sub.add_parser("compare", help="align completed runs into one table")
    cmp_p.add_argument("run_dirs", nargs="+", help="run directories to compare")
    cmp_p.add_argument("--out", default="comparison",
                       help="directory for comparison artifacts")
    cmp_p.set_defaults(func=cmd_compare)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
