"""Report figures written as PNG files next to the CSV/JSON outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _size(scale=1.0, ratio=0.62):
    w = 5.0 * scale
    return w, w * ratio


def cfps_bars(ax, cfps, title=""):
    k = len(cfps)
    ax.bar(np.arange(k), cfps, color="#4c72b0")
    ax.axhline(1.0 / k, color="0.4", lw=0.8, ls="--")
    ax.set_xticks(np.arange(k))
    ax.set_xlabel("class")
    ax.set_ylabel("false-positive score")
    ax.set_title(title)


def recall_bars(ax, clean, robust, robust_name):
    k = len(clean)
    x = np.arange(k)
    ax.bar(x - 0.2, [np.nan if v is None else v for v in clean], 0.4, label="clean")
    ax.bar(x + 0.2, [np.nan if v is None else v for v in robust], 0.4, label=robust_name)
    ax.set_xticks(x)
    ax.set_ylim(0, 1)
    ax.set_xlabel("class")
    ax.set_ylabel("recall")
    ax.legend(frameon=False)


def eps_trajectories(ax, history):
    eps = np.array([h["eps_k"] for h in history])
    for c in range(eps.shape[1]):
        ax.plot(np.arange(len(history)), eps[:, c], label=f"class {c}")
    ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    ax.set_xlabel("epoch")
    ax.set_ylabel("per-class margin")
    if eps.shape[1] <= 10:
        ax.legend(frameon=False, ncol=2)


def corruption_curves(ax, corruptions):
    kinds = []
    for e in corruptions:
        if e["kind"] not in kinds:
            kinds.append(e["kind"])
    for kind in kinds:
        pts = sorted((e["severity"], e["min_class_acc"]) for e in corruptions if e["kind"] == kind)
        ax.plot(*zip(*pts), marker="o", label=kind)
    ax.set_xlabel("severity")
    ax.set_ylabel("minimum class accuracy")
    ax.legend(frameon=False)


def render_figures(report: dict, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    with plt.rc_context(STYLE):
        for run in report["runs"]:
            seed = run["seed"]
            for name, tables in run["models"].items():
                fig, ax = plt.subplots(figsize=_size())
                cfps_bars(ax, tables["clean"]["cfps"], f"seed {seed}, {name} model, clean")
                written.append(_save(fig, out / f"cfps_seed{seed}_{name}.png"))
                if tables["attacks"]:
                    atk = tables["attacks"][0]
                    fig, ax = plt.subplots(figsize=_size())
                    recall_bars(ax, tables["clean"]["recall"], atk["recall"], atk["condition"])
                    written.append(_save(fig, out / f"recall_seed{seed}_{name}.png"))
                if tables["corruptions"]:
                    fig, ax = plt.subplots(figsize=_size())
                    corruption_curves(ax, tables["corruptions"])
                    written.append(_save(fig, out / f"corruption_seed{seed}_{name}.png"))
            if run["history"]:
                fig, ax = plt.subplots(figsize=_size())
                eps_trajectories(ax, run["history"])
                written.append(_save(fig, out / f"eps_seed{seed}.png"))
    return written


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path
