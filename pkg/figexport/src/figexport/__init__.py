"""Static figures from exported smoothing artifacts.

Reads the trajectory and results CSV files the smoothing pipeline writes and
renders three figure kinds: a 3-D overlay of the true and smoothed state, a
per-coordinate trajectory with its mean ± 2·std uncertainty band, and grouped
NMSE bars comparing methods across SMNR levels.
"""

from .bundle import (PlotBundle, ResultsRow, SchemaError, TableLayout,
                     Trajectory, band_arrays, load_bundle, load_results_csv,
                     load_trajectory_csv, table_layout)
from .render import (render_results_table, render_trajectory_3d,
                     render_uncertainty_band)

__version__ = "0.1.0"

__all__ = [
    "PlotBundle",
    "ResultsRow",
    "SchemaError",
    "TableLayout",
    "Trajectory",
    "band_arrays",
    "load_bundle",
    "load_results_csv",
    "load_trajectory_csv",
    "render_results_table",
    "render_trajectory_3d",
    "render_uncertainty_band",
    "table_layout",
    "__version__",
]
