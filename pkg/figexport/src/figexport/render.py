"""The three renderers: 3-D overlay, per-coordinate uncertainty band, results bars.

All output is static image files; inputs are read-only and every plotted
number comes straight from the loaded CSV values.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .bundle import PlotBundle, SchemaError, band_arrays, load_results_csv, table_layout


def _select_trajectory(bundle: PlotBundle, sequence: int):
    if not bundle.trajectories:
        raise SchemaError("bundle holds no trajectories")
    if not 0 <= sequence < len(bundle.trajectories):
        raise SchemaError(
            f"sequence {sequence} out of range; bundle holds "
            f"{len(bundle.trajectories)} trajectories")
    return bundle.trajectories[sequence]


def _save(fig, out_path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_trajectory_3d(bundle: PlotBundle, out_path, sequence: int = 0) -> Path:
    """True vs smoothed state as two 3-D curves."""
    traj = _select_trajectory(bundle, sequence)
    if traj.state_dim != 3:
        raise SchemaError(
            f"3-D trajectory plot needs a 3-dimensional state, "
            f"got {traj.state_dim} dimensions in {traj.source.name}")
    fig = plt.figure(figsize=(6.0, 5.0))
    ax = fig.add_subplot(projection="3d")
    ax.plot(*traj.x_true.T, color="tab:blue", linewidth=1.2, label="true")
    ax.plot(*traj.mean.T, color="tab:red", linewidth=1.0, linestyle="--",
            label="smoothed")
    ax.set_xlabel("x1")
    ax.set_ylabel("x2")
    ax.set_zlabel("x3")
    ax.legend(loc="upper left")
    return _save(fig, out_path)


def render_uncertainty_band(bundle: PlotBundle, coordinate: int, out_path,
                            sequence: int = 0) -> Path:
    """One coordinate over time: truth, posterior mean, mean ± 2·std band."""
    traj = _select_trajectory(bundle, sequence)
    lower, upper = band_arrays(traj, coordinate)
    fig, ax = plt.subplots(figsize=(7.0, 3.5))
    ax.fill_between(traj.t, lower, upper, color="tab:red", alpha=0.25,
                    linewidth=0, label="mean ± 2 std")
    ax.plot(traj.t, traj.x_true[:, coordinate], color="tab:blue",
            linewidth=1.2, label="true")
    ax.plot(traj.t, traj.mean[:, coordinate], color="tab:red", linewidth=1.0,
            linestyle="--", label="posterior mean")
    ax.set_xlabel("t")
    ax.set_ylabel(f"x{coordinate + 1}")
    ax.legend(loc="best")
    fig.tight_layout()
    return _save(fig, out_path)


def render_results_table(results, out_path) -> Path:
    """Grouped NMSE bars per method per SMNR, error bars where std exists.

    ``results`` may be a PlotBundle carrying a results table, a sequence of
    rows, or a path to a results CSV.
    """
    if isinstance(results, PlotBundle):
        rows = results.results
        if rows is None:
            raise SchemaError("bundle holds no results table")
    elif isinstance(results, (str, Path)):
        rows = load_results_csv(results)
    else:
        rows = results
    layout = table_layout(rows)

    width = 0.8 / len(layout.methods)
    fig, ax = plt.subplots(figsize=(1.5 + 1.6 * len(layout.group_labels), 3.6))
    for mi, method in enumerate(layout.methods):
        offset = (mi - (len(layout.methods) - 1) / 2) * width
        xs, heights, err_x, err_h, err_e = [], [], [], [], []
        for gi in range(len(layout.group_labels)):
            if (gi, method) not in layout.means:
                continue
            x = gi + offset
            xs.append(x)
            heights.append(layout.means[(gi, method)])
            std = layout.stds[(gi, method)]
            if std is not None:
                err_x.append(x)
                err_h.append(layout.means[(gi, method)])
                err_e.append(std)
        ax.bar(xs, heights, width=0.92 * width, label=method)
        if err_x:
            ax.errorbar(err_x, err_h, yerr=err_e, fmt="none", ecolor="black",
                        capsize=3, linewidth=1.0)
    ax.set_xticks(range(len(layout.group_labels)))
    ax.set_xticklabels(layout.group_labels)
    ax.set_ylabel("NMSE (dB)")
    ax.axhline(0.0, color="black", linewidth=0.6)
    ax.legend(loc="best")
    fig.tight_layout()
    return _save(fig, out_path)
