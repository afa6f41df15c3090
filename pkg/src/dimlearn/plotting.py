"""PNG figures written next to the CSV outputs (headless Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: Path) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path.name


def dim_profiles(path: Path, times, pred, truth, stderr=None, n_show: int = 4) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    for i in range(min(n_show, len(truth))):
        line, = ax.plot(times, truth[i], lw=1.5, label=f"state {i} MC")
        if stderr is not None:
            ax.fill_between(times, truth[i] - 3 * stderr[i], truth[i] + 3 * stderr[i],
                            color=line.get_color(), alpha=0.2)
        ax.plot(times, pred[i], "--", color=line.get_color(), lw=1.2, label=f"state {i} network")
    ax.set_xlabel("time (years)")
    ax.set_ylabel("DIM")
    ax.legend(fontsize=7, ncol=2)
    return _save(fig, path)


def errors_by_variable(path: Path, names, states, errors, t_label: str) -> str:
    d = len(names)
    fig, axes = plt.subplots(1, d, figsize=(2.6 * d, 2.8), sharey=True)
    for j, ax in enumerate(np.atleast_1d(axes)):
        ax.scatter(states[:, j], errors, s=8)
        ax.axhline(0.0, color="k", lw=0.5)
        ax.set_xlabel(names[j])
    np.atleast_1d(axes)[0].set_ylabel(f"prediction - truth at t={t_label}")
    return _save(fig, path)


def convergence(path: Path, ks, means, half_widths=None) -> str:
    ks, means = np.asarray(ks, float), np.asarray(means, float)
    fig, ax = plt.subplots(figsize=(5, 4))
    yerr = None if half_widths is None else np.asarray(half_widths, float)
    ax.errorbar(ks, means, yerr=yerr, marker="o", capsize=3, label="validation RMSE")
    ref = means[0] * np.sqrt(ks[0] / ks)
    ax.plot(ks, ref, "k:", label="k^-1/2 reference")
    ax.set_xscale("log", base=2)
    ax.set_yscale("log", base=2)
    ax.set_xlabel("training rows")
    ax.set_ylabel("RMSE")
    ax.legend()
    return _save(fig, path)


def report_figures(out: Path, stem: str, names, val_set, metrics: dict, grid) -> list:
    files = [
        dim_profiles(out / f"{stem}_dim_profiles.png", grid.times, metrics["predictions"],
                     val_set.labels, val_set.stderr),
        errors_by_variable(out / f"{stem}_errors_by_variable.png", names, val_set.states,
                           metrics["errors_at_t_gamma"], f"{metrics['t_gamma']:g}"),
    ]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(metrics["mva_rel_error"], bins=20)
    ax.set_xlabel("MVA relative error")
    ax.set_ylabel("states")
    files.append(_save(fig, out / f"{stem}_mva_errors.png"))
    return files
