"""Figure rendering for run outputs.

Every command that writes delimited output can also render a small figure next
to it.  The CSV files are the contract; these plots are a convenience for
eyeballing a run without further tooling.  The headless backend is forced so
rendering works in terminals and CI alike.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


def save_loss_curves(steps: list[int], l_tlc: list[float], l_sdc: list[float],
                     total: list[float], path: str | Path, title: str) -> Path:
    """Per-step loss decomposition for one training run."""
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, total, label="total", color="tab:blue")
    ax.plot(steps, l_tlc, label="label loss", color="tab:orange", alpha=0.8)
    if any(v != 0.0 for v in l_sdc):
        ax.plot(steps, l_sdc, label="corruption loss", color="tab:green",
                alpha=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def save_sweep_curve(values: list[float], seeds: list[int], macros: list[float],
                     path: str | Path, axis_label: str) -> Path:
    """Macro accuracy against a swept setting: per-seed points plus the mean."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(values, macros, s=18, color="tab:gray", alpha=0.7,
               label="per seed")
    means = {}
    for value, macro in zip(values, macros):
        means.setdefault(value, []).append(macro)
    xs = sorted(means)
    ys = [sum(means[x]) / len(means[x]) for x in xs]
    ax.plot(xs, ys, marker="o", color="tab:blue", label="mean")
    ax.set_xlabel(axis_label)
    ax.set_ylabel("macro accuracy")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def save_typicality_histogram(clamped: list[float], path: str | Path,
                              title: str) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(clamped, bins=40, range=(0.0, 1.0), color="tab:blue", alpha=0.85)
    ax.set_xlabel("typicality")
    ax.set_ylabel("instances")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)
