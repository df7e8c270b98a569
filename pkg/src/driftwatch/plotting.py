"""Matplotlib renderings of the figure-shaped outputs.

Everything here is a view over data that is also written as CSV; nothing
downstream reads the images.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {
    "figure.dpi": 110,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "legend.fontsize": 8,
}


@contextmanager
def _figure(path, width=6.4, height=None, **subplot_kw):
    if height is None:
        height = width * (math.sqrt(5) - 1) / 2
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(width, height), **subplot_kw)
        try:
            yield fig, ax
            fig.tight_layout()
            fig.savefig(path)
        finally:
            plt.close(fig)


def plot_thresholds(tables, path: str | Path) -> None:
    """Critical values against time, one line per table."""
    with _figure(path) as (fig, ax):
        for table in tables:
            ax.step(table.times, table.values, where="post",
                    label=f"{table.statistic_kind.value}, alpha={table.alpha:g} ({table.alpha_mode.value})")
        ax.set_xlabel("t")
        ax.set_ylabel("critical value $h_t$")
        ax.legend()


def plot_loss_curves(curves: Mapping[str, tuple[Sequence[int], Sequence[float]]], path: str | Path,
                     change_batch: int | None = None) -> None:
    with _figure(path) as (fig, ax):
        for name, (batches, values) in curves.items():
            ax.plot(batches, values, label=name, lw=1.2)
        if change_batch is not None:
            ax.axvline(change_batch + 0.5, color="0.6", ls=":", lw=0.8)
        ax.set_xlabel("detection batch b(d)")
        ax.set_ylabel("loss")
        ax.legend(ncol=2)


def plot_rates(rows: Sequence[dict], metric: str, path: str | Path, reference: float | None = None) -> None:
    """Grouped bars of a per-(scenario, detector) rate."""
    scenarios = list(dict.fromkeys(r["scenario"] for r in rows))
    detectors = list(dict.fromkeys(r["detector"] for r in rows))
    lookup = {(r["scenario"], r["detector"]): r[metric] for r in rows}
    width = 0.8 / max(len(detectors), 1)
    x = np.arange(len(scenarios))
    with _figure(path, width=max(6.4, 0.9 * len(scenarios) + 2)) as (fig, ax):
        for i, det in enumerate(detectors):
            ax.bar(x + (i - (len(detectors) - 1) / 2) * width,
                   [lookup.get((s, det), np.nan) for s in scenarios], width, label=det)
        if reference is not None:
            ax.axhline(reference, color="k", ls="--", lw=0.8)
        ax.set_xticks(x, scenarios, rotation=30, ha="right")
        ax.set_ylabel(metric.replace("_", " "))
        ax.set_ylim(0, 1)
        ax.legend(ncol=3)


def plot_boxes(groups: Mapping[tuple[str, str], Sequence[float]], path: str | Path, ylabel: str) -> None:
    """Box plots keyed by (scenario, detector); empty groups are left blank."""
    scenarios = list(dict.fromkeys(k[0] for k in groups))
    detectors = list(dict.fromkeys(k[1] for k in groups))
    width = 0.8 / max(len(detectors), 1)
    with _figure(path, width=max(6.4, 0.9 * len(scenarios) + 2)) as (fig, ax):
        for i, det in enumerate(detectors):
            pos, data = [], []
            for s_idx, s in enumerate(scenarios):
                values = groups.get((s, det), [])
                if len(values):
                    pos.append(s_idx + (i - (len(detectors) - 1) / 2) * width)
                    data.append(values)
            if data:
                box = ax.boxplot(data, positions=pos, widths=width * 0.9, patch_artist=True,
                                 showfliers=False, manage_ticks=False)
                colour = f"C{i}"
                for patch in box["boxes"]:
                    patch.set_facecolor(colour)
                    patch.set_alpha(0.6)
                ax.plot([], [], color=colour, lw=6, alpha=0.6, label=det)
        ax.set_xticks(np.arange(len(scenarios)), scenarios, rotation=30, ha="right")
        ax.set_ylabel(ylabel)
        ax.legend(ncol=3)


def plot_peeking(rows: Sequence[dict], path: str | Path) -> None:
    with _figure(path, width=5.0) as (fig, ax):
        alphas = [r["alpha"] for r in rows]
        ax.plot(alphas, [r["pr_v_ge_1"] for r in rows], "o-", label="Pr(V >= 1)")
        ax.plot(alphas, alphas, "k--", lw=0.8, label="nominal alpha")
        ax.set_xscale("log")
        ax.set_xlabel("alpha")
        ax.set_ylabel("false alarm probability")
        ax.legend()


def plot_local_test(result, regions, path: str | Path, model0=None, model1=None) -> None:
    """Both density estimates with the significant f1 > f0 regions shaded."""
    with _figure(path) as (fig, ax):
        if model0 is not None and model1 is not None:
            ax.plot(result.grid, model0.density(result.grid), label="pre-change $\\hat f_0$")
            ax.plot(result.grid, model1.density(result.grid), label="post-change $\\hat f_1$")
        else:
            ax.plot(result.grid, result.deltas, label="$\\hat f_1 - \\hat f_0$")
        for region in regions:
            ax.axvspan(region.lo, region.hi, color="tab:red", alpha=0.25, lw=0)
        ax.set_xlabel("confidence z")
        ax.set_ylabel("density")
        ax.set_xlim(0, 1)
        ax.legend()
