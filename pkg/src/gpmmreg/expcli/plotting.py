"""Matplotlib figures for the experiment reports (rendered off-screen to files)."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..meshcore import Mesh  # noqa: E402
from .experiments import EnergyReport, GridSearchResult  # noqa: E402


def plot_energy_curves(curves: Dict[str, GridSearchResult], path, title: str = "") -> Path:
    """Summed regression energy against sigma, one line per kernel, log-log axes."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, res in curves.items():
        s = np.array([p.sigma for p in res.curve])
        e = np.array([p.energy for p in res.curve])
        ok = np.isfinite(e)
        (line,) = ax.plot(s[ok], e[ok], marker="o", ms=3, label=name)
        ax.plot([res.best_sigma], [res.best_energy], marker="*", ms=10, color=line.get_color())
        if (~ok).any():
            ax.plot(s[~ok], np.full((~ok).sum(), np.nanmin(e)), "x", color=line.get_color())
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("sigma (mm)")
    ax.set_ylabel("regression energy R")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_energy_table(report: EnergyReport, path) -> Path:
    """Grouped bars of mean R (with std) per category and kernel."""
    cats = report.categories
    kernels = list(dict.fromkeys(r.kernel for r in report.rows))
    width = 0.8 / max(len(kernels), 1)
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(cats), 4))
    x = np.arange(len(cats))
    for k, name in enumerate(kernels):
        mean = [report.row(c, name).mean for c in cats]
        std = [report.row(c, name).std for c in cats]
        ax.bar(x + (k - (len(kernels) - 1) / 2) * width, mean, width, yerr=std, capsize=2, label=name)
    ax.set_xticks(x)
    ax.set_xticklabels(cats)
    ax.set_ylabel("mean regression energy R")
    ax.legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_distance_isolines(mesh: Mesh, distances: np.ndarray, path, source: Optional[int] = None,
                           levels: int = 15, compare: Optional[np.ndarray] = None,
                           labels: Sequence[str] = ("geodesic", "euclidean")) -> Path:
    """Isolines of a distance field, drawn over the x-y projection of the mesh.

    With ``compare``, a second field is drawn side by side using the same levels.
    """
    fields = [distances] if compare is None else [distances, compare]
    fig, axes = plt.subplots(1, len(fields), figsize=(4.2 * len(fields), 4), squeeze=False)
    vmax = max(float(np.nanmax(f[np.isfinite(f)])) for f in fields)
    lv = np.linspace(0.0, vmax, levels)
    xy = mesh.vertices[:, :2]
    for ax, f, lab in zip(axes[0], fields, labels):
        tcf = ax.tricontourf(xy[:, 0], xy[:, 1], mesh.faces, np.nan_to_num(f, posinf=vmax), levels=lv, cmap="viridis")
        ax.tricontour(xy[:, 0], xy[:, 1], mesh.faces, np.nan_to_num(f, posinf=vmax), levels=lv, colors="k", linewidths=0.4)
        if source is not None:
            ax.plot(*xy[source], "r*", ms=9)
        ax.set_aspect("equal")
        ax.set_title(lab)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(tcf, ax=axes[0].tolist(), shrink=0.8, label="distance (mm)")
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_trace(energies: Sequence[float], rhos: Sequence[float], path) -> Path:
    """NICP energy trace per iteration with the ridge value on a twin axis."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    it = np.arange(len(energies))
    ax.plot(it, energies, "o-", label="energy")
    ax.set_xlabel("iteration")
    ax.set_ylabel("energy R")
    ax.set_yscale("log")
    ax2 = ax.twinx()
    ax2.plot(it, rhos, "s--", color="gray", ms=3)
    ax2.set_yscale("log")
    ax2.set_ylabel("rho")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
