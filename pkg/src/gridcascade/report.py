"""Optional PNG figures rendered next to the CSV output (Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .cascade import CascadeResult
from .scenario import EnsembleSummary


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_timeseries(result: CascadeResult, path: Path, title: str = "") -> Path:
    plt = _pyplot()
    s = result.series
    t = np.asarray(s.t)
    fig, axes = plt.subplots(3, 1, figsize=(7, 8), sharex=True)
    axes[0].plot(t, s.load_mw, label="load")
    axes[0].plot(t, s.gen_mw, label="generation", linestyle="--")
    axes[0].set_ylabel("MW")
    axes[0].legend(loc="best")
    if s.delta_deg:
        axes[1].plot(t, np.vstack(s.delta_deg))
    axes[1].set_ylabel("rotor angle (deg)")
    if s.vm:
        axes[2].plot(t, np.vstack(s.vm), linewidth=0.8)
    axes[2].set_ylabel("|V| (pu)")
    axes[2].set_xlabel("t (s)")
    for e in result.events:
        if e.cause.value == "attack":
            for ax in axes:
                ax.axvline(e.t, color="k", linewidth=0.6, alpha=0.4)
            break
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_sweep(curve: Sequence[EnsembleSummary], path: Path, title: str = "") -> Path:
    plt = _pyplot()
    rows = sorted(curve, key=lambda s: s.probability)
    p = [s.probability for s in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(p, [s.mean_delta_n for s in rows], marker="o", label="mean")
    ax.fill_between(p, [s.min_delta_n for s in rows], [s.max_delta_n for s in rows],
                    alpha=0.2, label="min to max")
    ax.set_xlabel("hidden-failure probability")
    ax.set_ylabel("node outages")
    ax.legend(loc="best")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path
