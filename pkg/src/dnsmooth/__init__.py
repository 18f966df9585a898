"""Unsupervised recurrent Gaussian smoothing for model-free dynamical processes.

A recurrent network learns, from measurement sequences alone, to emit a
diagonal Gaussian prior over the hidden state at every step; conditioning on
the current measurement is closed form, so the full posterior and its
likelihood come out exactly.  The package also ships the simulators, a
model-based reference smoother, metrics, and an experiment harness.
"""

from .errors import (CalibrationError, ContractViolation, InferenceDivergence,
                     NumericalError, OptimizerError, SimulationDivergence,
                     TrainingDivergence)
from .ertss import StateTransitionModel, ekf_forward, ertss_smooth, rts_backward, transition_model
from .experiment import ExperimentManifest, ResultsTable, desk_manifest, full_manifest, run_experiment
from .gaussian import GaussianBelief, LinearMeasurementModel, marginal_loglik, posterior_update
from .metrics import alp, measure_smnr, nmse_db, nmse_detail
from .smoother import (SmoothingResult, TrainConfig, evaluate_posterior_density,
                       load_checkpoint, load_smoothing_results, load_training_state,
                       save_checkpoint, save_smoothing_results, sequence_loglik,
                       smooth, train)
from .systems import (TrajectoryDataset, chen_spec, load_measurements, lorenz_spec,
                      make_dataset, sdsp_spec, simulate, system_by_kind)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
