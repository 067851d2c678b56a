"""Figure rendering for experiment reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

_STYLE = {
    "default_branch": ("tab:gray", "s"),
    "median_impute": ("tab:orange", "^"),
    "expected_prediction": ("tab:blue", "o"),
    "exploss_expected_prediction": ("tab:green", "D"),
}


def render_rmse_figure(aggregates, path, title: str | None = None) -> None:
    """Plot mean test RMSE against the missing rate, one line per method,
    with one-standard-deviation error bars."""
    by_method: dict[str, list] = {}
    for a in aggregates:
        by_method.setdefault(a.method, []).append(a)

    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for method in sorted(by_method):
        recs = sorted(by_method[method], key=lambda a: a.pi)
        pis = [a.pi for a in recs]
        means = [a.mean for a in recs]
        stds = [a.std for a in recs]
        color, marker = _STYLE.get(method, ("tab:red", "x"))
        ax.errorbar(
            pis,
            means,
            yerr=stds,
            label=method,
            color=color,
            marker=marker,
            markersize=4,
            capsize=3,
            linewidth=1.5,
        )
    ax.set_xlabel("missing rate")
    ax.set_ylabel("test RMSE")
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150, metadata={"Software": "exptrees"})
    plt.close(fig)
