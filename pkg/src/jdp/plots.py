"""Figure rendering for tuning and validation reports.

Figures are written next to the delimited report output: mean Brier score
against the subpopulation proportion with its confidence band, one marker
per grid value, the winner highlighted.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .tuner import TuningReport

_STYLE = {
    "figure.figsize": (6.4, 4.2),
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def plot_tuning_report(report: TuningReport, path) -> None:
    """Brier score vs subpopulation proportion with CI whiskers."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        feasible = [e for e in report.entries if e.feasible]
        xs = [e.mp for e in feasible]
        ys = [e.mean for e in feasible]
        los = [e.mean - e.ci[0] if e.ci else 0.0 for e in feasible]
        his = [e.ci[1] - e.mean if e.ci else 0.0 for e in feasible]
        ax.errorbar(xs, ys, yerr=[los, his], fmt="o-", capsize=4, color="#2c5f8a")
        for e in report.entries:
            if not e.feasible:
                ax.axvline(e.mp, color="#b0b0b0", linestyle=":", linewidth=1)
            elif e.unreliable:
                ax.plot([e.mp], [e.mean], marker="x", color="#c44e52", markersize=10)
        if report.selected_mp is not None:
            best = next(e for e in feasible if e.mp == report.selected_mp)
            ax.plot([best.mp], [best.mean], marker="*", color="#dd8452",
                    markersize=16, zorder=5)
        ax.set_xlabel("training-data proportion $M_p$")
        ax.set_ylabel(f"Brier score at u={report.u:g} given t={report.t:g}")
        ax.set_title(
            f"{report.n_folds}-fold CV x {report.n_repeats} repeat(s), "
            f"seed {report.master_seed}"
        )
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)


def plot_fold_spread(report: TuningReport, path) -> None:
    """Per-fold Brier values by proportion (spread behind the mean)."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots()
        for e in report.entries:
            if not e.feasible:
                continue
            ax.plot([e.mp] * len(e.fold_values), e.fold_values, "o",
                    alpha=0.35, color="#55a868", markersize=4)
            ax.plot([e.mp], [e.mean], "_", color="#2c5f8a", markersize=18,
                    markeredgewidth=2)
        ax.set_xlabel("training-data proportion $M_p$")
        ax.set_ylabel("per-fold Brier score")
        ax.set_title("fold-level spread")
        fig.tight_layout()
        fig.savefig(path, dpi=150)
        plt.close(fig)
