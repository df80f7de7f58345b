"""Matplotlib figures written next to the CLI's CSV reports (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    _plt().close(fig)
    return path


def plot_loss(trace, path) -> Path:
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(np.arange(1, len(trace) + 1), trace, marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_sweep(rows, path) -> Path:
    """One mean-CD panel per gamma over the zeta x K grid; the argmin is boxed."""
    plt = _plt()
    gammas = sorted({r["gamma"] for r in rows})
    zetas = sorted({r["zeta"] for r in rows})
    Ks = sorted({r["K"] for r in rows})
    finite = [r for r in rows if np.isfinite(r["mean_cd"])]
    best = min(finite, key=lambda r: r["mean_cd"]) if finite else None
    fig, axes = plt.subplots(1, len(gammas), figsize=(4.2 * len(gammas), 3.6), squeeze=False)
    for ax, gamma in zip(axes[0], gammas):
        grid = np.full((len(Ks), len(zetas)), np.nan)
        for r in rows:
            if r["gamma"] == gamma:
                grid[Ks.index(r["K"]), zetas.index(r["zeta"])] = r["mean_cd"]
        im = ax.imshow(grid, origin="lower", cmap="viridis_r", aspect="auto")
        for (i, j), v in np.ndenumerate(grid):
            ax.text(j, i, f"{v:.2f}", ha="center", va="center", fontsize=8, color="w")
        if best is not None and best["gamma"] == gamma:
            i, j = Ks.index(best["K"]), zetas.index(best["zeta"])
            ax.add_patch(plt.Rectangle((j - 0.5, i - 0.5), 1, 1, fill=False, ec="r", lw=2))
        ax.set_xticks(range(len(zetas)), [f"{z:g}" for z in zetas])
        ax.set_yticks(range(len(Ks)), [str(k) for k in Ks])
        ax.set_xlabel("zeta")
        ax.set_ylabel("K")
        ax.set_title(f"mean CD (m), gamma={gamma:g}")
        fig.colorbar(im, ax=ax)
    return _save(fig, path)


def plot_variance(report, path) -> Path:
    """Posterior CD trace (mean +/- std over seeds) and final CD per method."""
    plt = _plt()
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.6))
    stats = report.step_stats("posterior")
    if stats:
        s = np.array([r["step"] for r in stats])
        m = np.array([r["cd_mean"] for r in stats])
        d = np.array([r["cd_std"] for r in stats])
        a1.plot(s, m, label="posterior")
        a1.fill_between(s, m - d, m + d, alpha=0.3)
        a1.set_xlabel("sampler step")
        a1.set_ylabel("CD (m)")
        a1.set_title("CD during sampling")
        a1.grid(alpha=0.3)
    methods = list(dict.fromkeys(r["method"] for r in report.rows))
    for k, method in enumerate(methods):
        v = [r["final_cd"] for r in report.rows if r["method"] == method]
        a2.scatter(np.full(len(v), k), v, s=18)
    a2.set_xticks(range(len(methods)), methods)
    a2.set_ylabel("final CD (m)")
    a2.set_title("final CD per seed")
    a2.grid(alpha=0.3)
    return _save(fig, path)


def plot_grid_png(values, path, log: bool = False) -> Path:
    plt = _plt()
    v = np.asarray(values, dtype=float)
    if log:
        v = np.log10(1.0 + 100.0 * np.clip(v, 0, None))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.imshow(v, origin="lower", cmap="gray", aspect="auto")
    ax.set_xlabel("range bin")
    ax.set_ylabel("azimuth bin")
    return _save(fig, path)
