"""Report figures rendered to PNG next to the delimited-text outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "image.cmap": "jet",
}

# Agg PNGs carry no timestamp; pinning Software keeps files identical across matplotlib patch releases
_PNG_META = {"Software": None}


def _size(scale=1.0, ratio=0.62):
    w = 6.0 * scale
    return (w, w * ratio)


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)
    return path


def density_heatmap(field, path, title="density (veh/m)", vmin=None, vmax=None) -> Path:
    """Space-time heatmap: time on the horizontal axis, position on the vertical."""
    g = field.grid
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=_size())
        im = ax.imshow(field.values.T, origin="lower", aspect="auto", vmin=vmin, vmax=vmax,
                       extent=(0.0, g.horizon_s, 0.0, g.ring_length_m))
        ax.set_xlabel("t (s)")
        ax.set_ylabel("x (m)")
        ax.set_title(title)
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        return _save(fig, path)


def kernel_bars(kernel, path, reference=None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=_size(0.8))
        ax.bar(kernel.offsets_m, kernel.weights, width=kernel.dx_m * 0.9, align="edge",
               color="tab:blue", label="learned")
        if reference is not None:
            ax.step(reference.offsets_m, reference.weights, where="post", color="k", lw=1, label="reference")
            ax.legend()
        ax.set_xlabel("look-ahead offset (m)")
        ax.set_ylabel("cell weight")
        fig.tight_layout()
        return _save(fig, path)


def fd_plot(curve, path, scatter=None) -> Path:
    """Speed-density curve, optionally over a ``(rho_eta, v)`` scatter."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=_size(0.8))
        if scatter is not None:
            ax.scatter(scatter[0], scatter[1], s=1, c="0.6", alpha=0.3, rasterized=True)
        ax.plot(curve[:, 0], curve[:, 1], "r-", lw=1.5)
        ax.set_xlabel("density (veh/m)")
        ax.set_ylabel("speed (m/s)")
        fig.tight_layout()
        return _save(fig, path)


def loss_plot(trace, path) -> Path:
    rows = np.asarray(trace.rows, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=_size(0.8))
        for col, name in zip(range(1, 5), ("total", "data", "phy-d", "phy-s")):
            y = np.where(rows[:, col] > 0, rows[:, col], np.nan)
            ax.semilogy(rows[:, 0], y, lw=1, label=name)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def report_figures(report, out_dir, field_est=None, trace=None, truth=None) -> dict:
    out = Path(out_dir)
    paths = {
        "kernel_png": kernel_bars(report.kernel_snapshot, out / "kernel.png"),
        "fd_curve_png": fd_plot(report.fd_curve, out / "fd_curve.png"),
    }
    if field_est is not None:
        lo = hi = None
        if truth is not None:
            lo, hi = float(truth.values.min()), float(truth.values.max())
            paths["truth_png"] = density_heatmap(truth, out / "field_truth.png", "ground truth", lo, hi)
        paths["field_est_png"] = density_heatmap(field_est, out / "field_est.png", "estimate", lo, hi)
    if trace is not None and trace.rows:
        paths["loss_trace_png"] = loss_plot(trace, out / "loss_trace.png")
    return paths
