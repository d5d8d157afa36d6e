"""SVG figures from a run directory.

Output is deterministic: a fixed hash salt and no date metadata, so the
same CSVs always produce the same bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiment import load_run  # noqa: E402

_RC = {"svg.hashsalt": "uavtse", "svg.fonttype": "none", "path.simplify": False}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_density(run: dict, path):
    truth, est = run["truth_density"], run["density_mean"]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    vmax = max(truth.max(), est.max())
    for ax, data, title in ((axes[0], truth, "truth"), (axes[1], est, "estimate")):
        im = ax.imshow(data.T, aspect="auto", origin="lower", vmin=0.0, vmax=vmax, cmap="viridis")
        ax.set_title(f"density ({title})")
        ax.set_xlabel("step")
    axes[0].set_ylabel("cell")
    fig.colorbar(im, ax=axes, label="veh/km")
    _save(fig, path)


def plot_vmax(run: dict, path):
    steps = np.arange(run["vmax_mean"].shape[0])
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, cell in enumerate(run["incident_cells"]):
        m, s = run["vmax_mean"][:, i], run["vmax_std"][:, i]
        line, = ax.plot(steps, m, label=f"estimate, cell {cell}")
        ax.fill_between(steps, m - s, m + s, color=line.get_color(), alpha=0.2, linewidth=0)
        ax.plot(steps, run["truth_vmax"][:, i], "--", color=line.get_color(), label=f"truth, cell {cell}")
    ax.set_xlabel("step")
    ax.set_ylabel("free-flow speed (km/h)")
    ax.legend(loc="upper right")
    _save(fig, path)


def plot_drone(run: dict, path):
    cells = run["drone_cells"]
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.step(np.arange(cells.size), cells, where="post")
    for c in run["incident_cells"]:
        ax.axhline(c, color="grey", linestyle=":")
    ax.set_xlabel("step")
    ax.set_ylabel("drone cell")
    _save(fig, path)


def plot_run(run_dir, out_dir=None) -> list:
    """Write all figures for a run; returns the paths written."""
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run_dir
    out.mkdir(parents=True, exist_ok=True)
    run = load_run(run_dir)
    written = []
    with plt.rc_context(_RC):
        for name, fn in (("density.svg", plot_density), ("vmax.svg", plot_vmax)):
            fn(run, out / name)
            written.append(out / name)
        if "drone_cells" in run:
            plot_drone(run, out / "drone.svg")
            written.append(out / "drone.svg")
    return written
