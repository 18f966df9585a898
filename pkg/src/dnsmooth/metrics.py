"""Evaluation measures: NMSE in dB, average log posterior, and measured SMNR."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, ContractViolation
from .smoother import SmoothingResult, evaluate_posterior_density
from .systems import TrajectoryDataset, sequence_signal_power

# stand-in for -inf when an estimate is numerically exact, keeps means finite
NMSE_FLOOR_DB = -300.0


def _check_pairs(true_states, estimates):
    if len(true_states) != len(estimates):
        raise ContractViolation(
            f"got {len(true_states)} true sequences but {len(estimates)} estimates")
    if not true_states:
        raise ContractViolation("need at least one sequence")


@dataclass(frozen=True)
class NMSEDetail:
    """Per-sequence NMSE values plus whether any hit the exactness floor."""

    per_sequence_db: np.ndarray
    exact: np.ndarray

    @property
    def mean_db(self) -> float:
        return float(np.mean(self.per_sequence_db))

    @property
    def std_db(self) -> float:
        return float(np.std(self.per_sequence_db, ddof=1))


def nmse_detail(true_states, estimates) -> NMSEDetail:
    """Per-sequence 10 log10(sum_t |x - xhat|^2 / sum_t |x|^2), floored at -300 dB."""
    _check_pairs(true_states, estimates)
    vals = np.empty(len(true_states))
    exact = np.zeros(len(true_states), dtype=bool)
    for i, (x, e) in enumerate(zip(true_states, estimates)):
        x = np.asarray(x, dtype=np.float64)
        e = np.asarray(e, dtype=np.float64)
        if x.shape != e.shape:
            raise ContractViolation(f"sequence {i}: shapes {x.shape} and {e.shape} differ")
        denom = float(np.sum(x * x))
        if denom == 0.0:
            raise ContractViolation(f"sequence {i} has zero energy")
        num = float(np.sum((x - e) ** 2))
        ratio_db = 10.0 * np.log10(num / denom) if num > 0.0 else -np.inf
        if ratio_db <= NMSE_FLOOR_DB:
            vals[i] = NMSE_FLOOR_DB
            exact[i] = True
        else:
            vals[i] = ratio_db
    return NMSEDetail(per_sequence_db=vals, exact=exact)


def nmse_db(true_states, estimates) -> float:
    """Mean over sequences of the per-sequence NMSE in dB."""
    return nmse_detail(true_states, estimates).mean_db


def alp(true_states, results: list[SmoothingResult]) -> float:
    """Average log posterior of the true states under the smoothed beliefs."""
    _check_pairs(true_states, results)
    totals = []
    for i, (x, res) in enumerate(zip(true_states, results)):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != res.T:
            raise ContractViolation(
                f"sequence {i}: {x.shape[0]} states but {res.T} posteriors")
        total = sum(evaluate_posterior_density(x[t - 1], res, t) for t in range(1, res.T + 1))
        totals.append(total / res.T)
    return float(np.mean(totals))


def measure_smnr(dataset: TrajectoryDataset) -> float:
    """Realized SMNR: mean over sequences of 10 log10(signal power / tr(Cw)).

    Signal power is the per-step energy of H x after removing the per-sequence
    mean, so it round-trips the calibration targets exactly.
    """
    if dataset.states is None:
        raise ContractViolation("dataset has no states; SMNR needs the clean signal")
    if not dataset.states:
        raise ContractViolation("dataset is empty")
    tr_cw = float(np.trace(dataset.model.Cw))
    ratios = []
    for x in dataset.states:
        power = sequence_signal_power(np.asarray(x, dtype=np.float64), dataset.model.H)
        if power == 0.0:
            raise CalibrationError("a sequence has zero centered signal energy")
        ratios.append(10.0 * np.log10(power / tr_cw))
    return float(np.mean(ratios))
