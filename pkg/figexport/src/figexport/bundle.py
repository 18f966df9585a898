"""Loading and validation for the CSV artifacts the smoothing pipeline emits.

Two file kinds exist: per-sequence trajectory tables (``trajectory_NNN.csv``
with columns ``t, x_true_i, y_i, mean_i, std_i``) and aggregated results
tables (``results.csv``).  Everything is validated here, before any renderer
runs; unknown columns are ignored with a warning so newer producers keep
working with older renderers.
"""

import csv
import re
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class SchemaError(ValueError):
    """An input file does not match the expected artifact schema."""


_TRAJ_FAMILIES = ("x_true", "y", "mean", "std")
_TRAJ_COLUMN = re.compile(r"^(x_true|y|mean|std)_([0-9]+)$")
_RESULTS_COLUMNS = ("method", "system", "smnr_db", "n_realizations",
                    "nmse_mean_db", "nmse_std_db", "alp_mean", "alp_std",
                    "flags", "error")


@dataclass(frozen=True)
class Trajectory:
    """One smoothed sequence: truth, measurements, posterior mean and std."""

    t: np.ndarray       # (T,) 1-based step index
    x_true: np.ndarray  # (T, state_dim)
    y: np.ndarray       # (T, meas_dim)
    mean: np.ndarray    # (T, state_dim)
    std: np.ndarray     # (T, state_dim)
    source: Path

    @property
    def state_dim(self) -> int:
        return self.x_true.shape[1]


@dataclass(frozen=True)
class ResultsRow:
    method: str
    system: str
    smnr_db: float
    n_realizations: int
    nmse_mean_db: float | None
    nmse_std_db: float | None
    alp_mean: float | None
    alp_std: float | None
    flags: tuple
    error: str | None


@dataclass(frozen=True)
class PlotBundle:
    """A directory's worth of artifacts: trajectories plus optional results."""

    trajectories: tuple
    results: tuple | None


def _read_csv(path):
    path = Path(path)
    if not path.is_file():
        raise SchemaError(f"{path}: no such file")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    return path, rows[0], rows[1:]


def _parse_float(path, name, text):
    try:
        return float(text)
    except ValueError:
        raise SchemaError(f"{path}: column {name} holds non-numeric value {text!r}") from None


def load_trajectory_csv(path) -> Trajectory:
    path, header, rows = _read_csv(path)
    columns = {}
    counts = {fam: [] for fam in _TRAJ_FAMILIES}
    unknown = []
    for i, name in enumerate(header):
        match = _TRAJ_COLUMN.match(name)
        if name == "t":
            columns[i] = ("t", 0)
        elif match:
            fam, k = match.group(1), int(match.group(2))
            counts[fam].append(k)
            columns[i] = (fam, k - 1)
        else:
            unknown.append(name)
    if unknown:
        warnings.warn(f"{path}: ignoring unknown columns {unknown}", stacklevel=2)

    missing = [] if "t" in header else ["t"]
    for fam in _TRAJ_FAMILIES:
        ks = sorted(counts[fam])
        if not ks:
            missing.append(f"{fam}_1")
        elif ks != list(range(1, len(ks) + 1)):
            raise SchemaError(f"{path}: {fam} columns are not contiguous from 1: {ks}")
    if missing:
        raise SchemaError(f"{path}: missing required columns {missing}")
    m = len(counts["x_true"])
    if len(counts["mean"]) != m or len(counts["std"]) != m:
        raise SchemaError(
            f"{path}: x_true/mean/std dimension mismatch: "
            f"{m}/{len(counts['mean'])}/{len(counts['std'])}")
    if not rows:
        raise SchemaError(f"{path}: no data rows")

    T = len(rows)
    arrays = {"t": np.zeros(T), "x_true": np.zeros((T, m)), "y": np.zeros((T, len(counts['y']))),
              "mean": np.zeros((T, m)), "std": np.zeros((T, m))}
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise SchemaError(f"{path}: row {r + 2} has {len(row)} cells, header has {len(header)}")
        for i, cell in enumerate(row):
            if i not in columns:
                continue
            fam, k = columns[i]
            value = _parse_float(path, header[i], cell)
            if fam == "t":
                arrays["t"][r] = value
            else:
                arrays[fam][r, k] = value
    if not np.array_equal(arrays["t"], np.arange(1, T + 1)):
        raise SchemaError(f"{path}: t column must run 1..{T}")
    return Trajectory(t=arrays["t"].astype(int), x_true=arrays["x_true"], y=arrays["y"],
                      mean=arrays["mean"], std=arrays["std"], source=path)


def load_results_csv(path) -> tuple:
    path, header, rows = _read_csv(path)
    missing = [c for c in _RESULTS_COLUMNS if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing required columns {missing}")
    unknown = [c for c in header if c not in _RESULTS_COLUMNS]
    if unknown:
        warnings.warn(f"{path}: ignoring unknown columns {unknown}", stacklevel=2)
    index = {name: header.index(name) for name in _RESULTS_COLUMNS}

    def opt_float(row, name):
        text = row[index[name]]
        return None if text == "" else _parse_float(path, name, text)

    out = []
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise SchemaError(f"{path}: row {r + 2} has {len(row)} cells, header has {len(header)}")
        flags = tuple(f for f in row[index["flags"]].split(";") if f)
        out.append(ResultsRow(
            method=row[index["method"]],
            system=row[index["system"]],
            smnr_db=_parse_float(path, "smnr_db", row[index["smnr_db"]]),
            n_realizations=int(_parse_float(path, "n_realizations", row[index["n_realizations"]])),
            nmse_mean_db=opt_float(row, "nmse_mean_db"),
            nmse_std_db=opt_float(row, "nmse_std_db"),
            alp_mean=opt_float(row, "alp_mean"),
            alp_std=opt_float(row, "alp_std"),
            flags=flags,
            error=row[index["error"]] or None,
        ))
    return tuple(out)


def load_bundle(path) -> PlotBundle:
    """Load a directory of trajectory CSVs plus an optional results CSV."""
    path = Path(path)
    if not path.is_dir():
        raise SchemaError(f"{path}: not a directory")
    trajectories = tuple(load_trajectory_csv(p)
                         for p in sorted(path.glob("trajectory_*.csv")))
    results_path = path / "results.csv"
    results = load_results_csv(results_path) if results_path.is_file() else None
    if not trajectories and results is None:
        raise SchemaError(f"{path}: no trajectory_*.csv and no results.csv")
    return PlotBundle(trajectories=trajectories, results=results)


def band_arrays(trajectory: Trajectory, coordinate: int):
    """The uncertainty band edges (lower, upper) = mean ± 2·std for one coordinate."""
    m = trajectory.state_dim
    if not 0 <= coordinate < m:
        raise SchemaError(
            f"coordinate {coordinate} out of range for a {m}-dimensional state; "
            f"valid indices are 0..{m - 1}")
    mean = trajectory.mean[:, coordinate]
    std = trajectory.std[:, coordinate]
    return mean - 2.0 * std, mean + 2.0 * std


@dataclass(frozen=True)
class TableLayout:
    """Bar-chart geometry for a results table, resolved before any drawing."""

    group_labels: tuple      # one label per (system, SMNR) group
    methods: tuple           # bar series, in first-appearance order
    means: dict              # (group index, method) -> NMSE mean in dB
    stds: dict               # (group index, method) -> std in dB, or None


def table_layout(rows) -> TableLayout:
    plottable = [r for r in rows if r.nmse_mean_db is not None]
    if not plottable:
        raise SchemaError("results table has no plottable rows")
    groups, methods = [], []
    for r in plottable:
        key = (r.system, r.smnr_db)
        if key not in groups:
            groups.append(key)
        if r.method not in methods:
            methods.append(r.method)
    multi_system = len({system for system, _ in groups}) > 1
    labels = tuple(f"{system} {smnr:g} dB" if multi_system else f"{smnr:g} dB"
                   for system, smnr in groups)
    means, stds = {}, {}
    for r in plottable:
        gi = groups.index((r.system, r.smnr_db))
        means[(gi, r.method)] = r.nmse_mean_db
        stds[(gi, r.method)] = r.nmse_std_db
    return TableLayout(group_labels=labels, methods=tuple(methods),
                       means=means, stds=stds)
