"""Report emission: metric tables (markdown + CSV) and matplotlib figures
rendered to files alongside the delimited output.
"""

from __future__ import annotations

import csv
import statistics
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

METRIC_COLUMNS = ("oa", "macc", "weighted_f1", "mae")
HIGHER_IS_BETTER = {"oa": True, "macc": True, "weighted_f1": True, "mae": False}


def median_metrics(reports: list[dict]) -> dict:
    return {
        key: statistics.median(r[key] for r in reports) for key in METRIC_COLUMNS
    }


def _fmt(key: str, value: float) -> str:
    if key == "mae":
        return f"{value:.4f}"
    return f"{100 * value:.2f}"


def summary_table(method: str, per_seed: dict[int, dict]) -> str:
    """Markdown table of per-seed metrics plus the median row."""
    lines = [
        "| seed | OA↑ | mAcc↑ | F1↑ | MAE↓ |",
        "| --- | --- | --- | --- | --- |",
    ]
    for seed in sorted(per_seed):
        row = per_seed[seed]
        cells = " | ".join(_fmt(k, row[k]) for k in METRIC_COLUMNS)
        lines.append(f"| {seed} | {cells} |")
    med = median_metrics(list(per_seed.values()))
    cells = " | ".join(_fmt(k, med[k]) for k in METRIC_COLUMNS)
    lines.append(f"| median ({method}) | {cells} |")
    return "\n".join(lines) + "\n"


def write_summary_csv(path, method: str, per_seed: dict[int, dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "seed", *METRIC_COLUMNS])
        for seed in sorted(per_seed):
            row = per_seed[seed]
            writer.writerow([method, seed, *(row[k] for k in METRIC_COLUMNS)])
        med = median_metrics(list(per_seed.values()))
        writer.writerow([method, "median", *(med[k] for k in METRIC_COLUMNS)])


def _strongest_baseline(medians: dict[str, dict], reference: str) -> str | None:
    others = [m for m in medians if m != reference]
    if not others:
        return None
    return max(others, key=lambda m: medians[m]["oa"])


def comparison_table(medians: dict[str, dict], reference: str | None = None) -> str:
    """Markdown comparison across methods with best-bolding and a delta row.

    The delta row compares the reference method (umkd when present,
    otherwise the best-OA method) against the strongest baseline; positive
    deltas mean the reference is better, for MAE included.
    """
    if reference is None:
        reference = "umkd" if "umkd" in medians else \
            max(medians, key=lambda m: medians[m]["oa"])
    best = {}
    for key in METRIC_COLUMNS:
        chooser = max if HIGHER_IS_BETTER[key] else min
        best[key] = chooser(medians[m][key] for m in medians)

    lines = [
        "| method | OA↑ | mAcc↑ | F1↑ | MAE↓ |",
        "| --- | --- | --- | --- | --- |",
    ]
    for method in sorted(medians):
        cells = []
        for key in METRIC_COLUMNS:
            text = _fmt(key, medians[method][key])
            if medians[method][key] == best[key]:
                text = f"**{text}**"
            cells.append(text)
        lines.append(f"| {method} | " + " | ".join(cells) + " |")

    baseline = _strongest_baseline(medians, reference)
    if baseline is not None:
        cells = []
        for key in METRIC_COLUMNS:
            ref, base = medians[reference][key], medians[baseline][key]
            delta = (ref - base) if HIGHER_IS_BETTER[key] else (base - ref)
            scaled = delta * (1.0 if key == "mae" else 100.0)
            sign = "+" if scaled >= 0 else ""
            cells.append(f"{sign}{scaled:.4f}" if key == "mae"
                         else f"{sign}{scaled:.2f}")
        lines.append(
            f"| Δ ({reference} vs {baseline}) | " + " | ".join(cells) + " |"
        )
    return "\n".join(lines) + "\n"


def write_comparison_csv(path, medians: dict[str, dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", *METRIC_COLUMNS])
        for method in sorted(medians):
            writer.writerow([method, *(medians[method][k] for k in METRIC_COLUMNS)])


def plot_training_curves(epoch_losses: list[dict], path) -> None:
    """Loss components per epoch for one training run."""
    if not epoch_losses:
        return
    keys = [k for k in epoch_losses[0] if k != "epoch"]
    epochs = [row["epoch"] for row in epoch_losses]
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in keys:
        ax.plot(epochs, [row[key] for row in epoch_losses], label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_method_comparison(medians: dict[str, dict], path) -> None:
    """Grouped bars for the accuracy metrics plus a MAE panel."""
    methods = sorted(medians)
    fig, (ax_acc, ax_mae) = plt.subplots(
        1, 2, figsize=(9, 4), gridspec_kw={"width_ratios": [3, 1]}
    )
    width = 0.8 / 3
    for i, key in enumerate(("oa", "macc", "weighted_f1")):
        xs = [j + (i - 1) * width for j in range(len(methods))]
        ax_acc.bar(xs, [100 * medians[m][key] for m in methods], width, label=key)
    ax_acc.set_xticks(range(len(methods)))
    ax_acc.set_xticklabels(methods)
    ax_acc.set_ylabel("percent")
    ax_acc.legend(fontsize=8)
    ax_mae.bar(range(len(methods)), [medians[m]["mae"] for m in methods], 0.6,
               color="tab:red")
    ax_mae.set_xticks(range(len(methods)))
    ax_mae.set_xticklabels(methods)
    ax_mae.set_ylabel("MAE")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_seed_metrics(per_seed: dict[int, dict], path) -> None:
    """Per-seed metric bars for one method's run directory."""
    seeds = sorted(per_seed)
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.8 / 3
    for i, key in enumerate(("oa", "macc", "weighted_f1")):
        xs = [j + (i - 1) * width for j in range(len(seeds))]
        ax.bar(xs, [100 * per_seed[s][key] for s in seeds], width, label=key)
    ax.set_xticks(range(len(seeds)))
    ax.set_xticklabels([str(s) for s in seeds])
    ax.set_xlabel("seed")
    ax.set_ylabel("percent")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
