"""Matplotlib figures for an episode report; written straight to files."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .bench import cell_centers
from .world import ground_truth_sdf


def _gt_image(world, cell=0.05):
    pts, shape = cell_centers(world.bounds, cell)
    return ground_truth_sdf(world, pts).reshape(shape)


def map_figure(report, path, cell=0.05):
    world, gmap = report.world, report.mapper.gmap
    lo, hi = world.bounds
    ext = (lo[0], hi[0], lo[1], hi[1])
    fig, ax = plt.subplots(figsize=(9, 9 * (hi[1] - lo[1]) / (hi[0] - lo[0]) + 0.8))
    gt = _gt_image(world, cell)
    ax.imshow((gt < 0).T, origin="lower", extent=ext, cmap="Greys", alpha=0.5, vmin=0, vmax=1.5)
    if len(gmap):
        pts, shape = cell_centers(world.bounds, cell)
        s = gmap.query(pts).reshape(shape)
        ax.contour(s.T, levels=[0.0], extent=ext, colors="tab:red", linewidths=1.2)
    for rec in gmap.records:
        if rec.region[0] is not None:
            (x0, y0), (x1, y1) = rec.region[0][:2], rec.region[1][:2]
            ax.add_patch(plt.Rectangle((x0, y0), x1 - x0, y1 - y0, fill=False, lw=0.6, ls="--", ec="tab:green"))
    if report.trajectory:
        xy = np.array([[r["x"], r["y"]] for r in report.trajectory])
        ax.plot(xy[:, 0], xy[:, 1], color="tab:blue", lw=1.0)
    for g in report.goals:
        ax.plot(g["x"], g["y"], "x", color="tab:orange" if g["reached"] else "k", ms=5)
    ax.set_xlim(lo[0], hi[0])
    ax.set_ylim(lo[1], hi[1])
    ax.set_aspect("equal")
    ax.set_title(f"{world.name} / {report.cfg.mode} / seed {report.cfg.seed}: "
                 f"{len(gmap.records)} cached maps")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def curve_figure(report, path):
    rows = report.curve
    if not rows:
        return
    fig, ax = plt.subplots(figsize=(7, 4))
    t = [r["time"] for r in rows]
    names = [k[:-4] for k in rows[0] if k.endswith("_mae") and not k.endswith("_band_mae")]
    for name in names:
        ax.plot(t, [r[f"{name}_mae"] for r in rows], label=name)
    for region, k in sorted(report.departures.items()):
        ax.axvline(k / report.world.lidar.rate_hz, color="0.6", ls=":", lw=0.8)
        ax.text(k / report.world.lidar.rate_hz, ax.get_ylim()[1], f" enter {region}", va="top", fontsize=7)
    ax.set_xlabel("simulated time [s]")
    ax.set_ylabel("near-surface MAE [m]")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def training_figure(report, path):
    rows = report.training_log
    if not rows:
        return
    fig, ax = plt.subplots(figsize=(7, 4))
    step = np.array([r["step"] for r in rows])
    for key in ("total", "L_Hs", "L_Hc", "L_E"):
        ax.semilogy(step, np.maximum([r[key] for r in rows], 1e-12), lw=0.7, label=key)
    ax.set_xlabel("training step")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def episode_figures(report, outdir):
    map_figure(report, outdir / "map.png")
    curve_figure(report, outdir / "forgetting.png")
    training_figure(report, outdir / "training.png")
