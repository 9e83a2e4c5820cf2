"""Figures rendered from emitted CSV files only."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def sniff_kind(path) -> str:
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    if "loss_cls" in header:
        return "history"
    if "setting" in header:
        return "contrast"
    if "final_acc" in header:
        return "results"
    raise ValueError(f"cannot tell what {path} contains from its header {header}")


def plot_history(csv_path, out_path):
    rows = _read(csv_path)
    epochs = [int(r["epoch"]) for r in rows]
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(10, 4))
    for key in ("train_acc", "test_acc"):
        vals = np.array([float(r[key]) for r in rows])
        if np.isfinite(vals).any():
            ax_acc.plot(epochs, vals, label=key)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.legend()
    for key in ("loss_cls", "loss_cal", "loss_pdl"):
        ax_loss.plot(epochs, [float(r[key]) for r in rows], label=key)
    ax_loss.set_xlabel("epoch")
    ax_loss.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return Path(out_path)


def plot_contrast(csv_path, out_path):
    curves = defaultdict(list)
    for r in _read(csv_path):
        curves[(r["setting"], r["seed"])].append(float(r["test_acc"]))
    fig, ax = plt.subplots(figsize=(6, 4))
    colors = {"instance_dependent": "tab:red", "uniform": "tab:blue"}
    seen = set()
    for (setting, _seed), accs in sorted(curves.items()):
        label = setting if setting not in seen else None
        seen.add(setting)
        ax.plot(range(1, len(accs) + 1), accs, color=colors.get(setting), alpha=0.6, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("test accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return Path(out_path)


def plot_results(csv_path, out_path, param=None):
    """Bar chart of mean accuracy per method, or a line per swept parameter."""
    rows = _read(csv_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    if param is None:
        groups = defaultdict(list)
        for r in rows:
            groups[r["method"]].append(float(r["final_acc"]))
        names = list(groups)
        means = [np.mean(groups[n]) for n in names]
        stds = [np.std(groups[n]) for n in names]
        ax.bar(names, means, yerr=stds, capsize=4)
        ax.set_ylabel("test accuracy")
        lo = min(m - s for m, s in zip(means, stds))
        ax.set_ylim(max(0.0, lo - 0.05), min(1.0, max(means) + 0.05))
    else:
        groups = defaultdict(list)
        for r in rows:
            if r.get(param):
                groups[float(r[param])].append(float(r["final_acc"]))
        xs = sorted(groups)
        ax.errorbar(xs, [np.mean(groups[x]) for x in xs], yerr=[np.std(groups[x]) for x in xs],
                    marker="o", capsize=4)
        ax.set_xlabel(param)
        ax.set_ylabel("test accuracy")
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
    return Path(out_path)


def plot_csv(csv_path, out_path, param=None):
    kind = sniff_kind(csv_path)
    if kind == "history":
        return plot_history(csv_path, out_path)
    if kind == "contrast":
        return plot_contrast(csv_path, out_path)
    return plot_results(csv_path, out_path, param)
