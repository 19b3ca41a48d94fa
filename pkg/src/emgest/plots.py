"""Figures for the experiment report.

Rendered with the Agg backend and without the ``Software`` PNG chunk, so
a rerun with the same inputs writes identical bytes.
"""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "image.cmap": "viridis",
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path, meta=None):
    os.makedirs(os.path.dirname(path), exist_ok=True)
    tmp = path + ".tmp"
    info = {"Software": None}
    if meta:
        info["Comment"] = "; ".join(f"{k}: {v}" for k, v in meta.items())
    fig.savefig(tmp, format="png", metadata=info)
    plt.close(fig)
    os.replace(tmp, path)


def indicator_slice(result, truth, title=""):
    """Indicator values on the sampling slice through the located point (x3 fixed)."""
    axes = result.grid.axes()
    k3 = int(np.argmin(np.abs(axes[2] - result.coarse_position[2])))
    data = result.values[:, :, k3].T
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.0))
        h = [a[1] - a[0] if len(a) > 1 else 1.0 for a in axes]
        extent = [axes[0][0] - h[0] / 2, axes[0][-1] + h[0] / 2, axes[1][0] - h[1] / 2, axes[1][-1] + h[1] / 2]
        im = ax.imshow(data, origin="lower", extent=extent, aspect="equal")
        ax.plot(result.position[0], result.position[1], "w+", ms=8, label="located")
        if truth is not None:
            ax.plot(truth[0], truth[1], "rx", ms=6, label="true")
        ax.set_xlabel("$x_1$")
        ax.set_ylabel("$x_2$")
        ax.set_title(title)
        ax.legend(loc="upper right", fontsize=7, frameon=False)
        fig.colorbar(im, ax=ax, shrink=0.85)
        fig.tight_layout()
    return fig


def table_heatmap(table, title=""):
    data = table.normalized
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.0 + 0.7 * len(table.columns), 0.8 + 0.6 * len(table.rows)))
        ax.imshow(data, vmin=min(0.0, data.min()), vmax=1.0, cmap="Greys")
        ax.set_xticks(range(len(table.columns)), table.columns)
        ax.set_yticks(range(len(table.rows)), table.rows)
        for i in range(data.shape[0]):
            for j in range(data.shape[1]):
                ax.text(j, i, f"{data[i, j]:.4f}", ha="center", va="center", fontsize=7,
                        color="white" if data[i, j] > 0.6 else "black")
        ax.set_xlabel("dictionary shape")
        ax.set_ylabel("measured shape")
        ax.set_title(title)
        fig.tight_layout()
    return fig


def noise_sweep(rows):
    delta = np.array([r[0] for r in rows])
    mean_err = np.array([r[1] for r in rows])
    max_err = np.array([r[2] for r in rows])
    acc = np.array([r[3] / r[4] for r in rows])
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(6.4, 2.6))
        a1.plot(100 * delta, mean_err, "o-", label="mean")
        a1.plot(100 * delta, max_err, "s--", label="max")
        a1.set_xlabel(r"noise $\delta$ (%)")
        a1.set_ylabel("location error")
        a1.legend(frameon=False)
        a2.plot(100 * delta, acc, "o-")
        a2.set_ylim(-0.05, 1.05)
        a2.set_xlabel(r"noise $\delta$ (%)")
        a2.set_ylabel("identification accuracy")
        fig.tight_layout()
    return fig


def render_all(out, shapes, locations, tables, sweep_rows, levels, truth=None, meta=None):
    """Write every report figure to ``out/figures``; ``meta`` goes into a PNG text chunk."""
    fig_dir = os.path.join(out, "figures")
    for shape in shapes:
        res = locations[(shape.id, levels[0])]
        _save(indicator_slice(res, truth, f"{shape.id}: location indicator"),
              os.path.join(fig_dir, f"indicator_{shape.id}.png"), meta)
    from .experiment import delta_label

    for delta, table in tables.items():
        _save(table_heatmap(table, f"normalized J, delta = {delta:g}"),
              os.path.join(fig_dir, f"gesture_delta{delta_label(delta)}.png"), meta)
    _save(noise_sweep(sweep_rows), os.path.join(fig_dir, "noise_sweep.png"), meta)
