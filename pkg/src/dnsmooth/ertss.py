"""Extended Rauch-Tung-Striebel smoother driven by a known transition model.

The model-driven reference point: an extended Kalman filter linearizes the
transition around each filtered mean, and the backward pass applies the RTS
gain to pull estimates toward the information carried by later measurements.
Unlike the learned smoother this consumes the true dynamics, so it is only
available for systems with a closed-form one-step transition.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ContractViolation, InferenceDivergence, NumericalError
from .gaussian import (
    GaussianBelief,
    LinearMeasurementModel,
    marginal_loglik,
    posterior_update,
)
from .smoother import SmoothingResult
from .systems import SystemSpec, transition_jacobian, transition_matrix


@dataclass(frozen=True)
class StateTransitionModel:
    """One-step mean map, its Jacobian, and the process noise covariance."""

    f: Callable[[np.ndarray], np.ndarray]
    jacobian: Callable[[np.ndarray], np.ndarray]
    process_noise_cov: np.ndarray

    def __post_init__(self):
        Q = np.asarray(self.process_noise_cov, dtype=np.float64)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
            raise ContractViolation(f"process noise covariance must be square, got {Q.shape}")
        if not np.allclose(Q, Q.T):
            raise ContractViolation("process noise covariance must be symmetric")
        object.__setattr__(self, "process_noise_cov", Q)

    @property
    def dim(self) -> int:
        return self.process_noise_cov.shape[0]


def transition_model(spec: SystemSpec) -> StateTransitionModel:
    """The exact-hold transition model for a simulated system.

    The pendulum observes a nonlinear projection of an eight-dimensional
    internal state, so no transition model on the observed coordinates exists
    and it is refused.
    """
    if spec.kind == "sdsp":
        raise ContractViolation(
            "no closed-form transition model for the observed pendulum coordinates")
    return StateTransitionModel(
        f=lambda x: transition_matrix(x, spec) @ x,
        jacobian=lambda x: transition_jacobian(x, spec),
        process_noise_cov=spec.process_noise_cov,
    )


def default_init(y1: np.ndarray, model: LinearMeasurementModel,
                 prior_scale: float = 10.0) -> GaussianBelief:
    """Measurement pull-back init: mean = pinv(H) y_1, covariance = scale * I."""
    mean = np.linalg.pinv(model.H) @ np.asarray(y1, dtype=np.float64)
    return GaussianBelief(mean, prior_scale * np.eye(model.m))


def _check_sequence(ys: np.ndarray, stm: StateTransitionModel,
                    model: LinearMeasurementModel) -> np.ndarray:
    ys = np.asarray(ys, dtype=np.float64)
    if ys.ndim != 2 or ys.shape[1] != model.n:
        raise ContractViolation(f"measurements must be (T, {model.n}), got {ys.shape}")
    if ys.shape[0] < 1:
        raise ContractViolation("need at least one measurement")
    if stm.dim != model.m:
        raise ContractViolation("transition model and measurement model disagree on state dim")
    return ys


def ekf_forward(ys: np.ndarray, stm: StateTransitionModel, model: LinearMeasurementModel,
                init: GaussianBelief) -> tuple[list[GaussianBelief], list[GaussianBelief]]:
    """Extended Kalman filter pass.

    Returns (filtered, predicted), both length T; predicted[0] is the init
    belief, so update(predicted[t], y_t) = filtered[t] for every t.
    """
    ys = _check_sequence(ys, stm, model)
    if init.mean.shape[0] != stm.dim:
        raise ContractViolation("init belief dimension does not match the transition model")
    Q = stm.process_noise_cov
    predicted = [init]
    filtered = []
    for t, y in enumerate(ys):
        filtered.append(posterior_update(predicted[-1], y, model))
        if t + 1 < len(ys):
            m = filtered[-1].mean
            F = stm.jacobian(m)
            # overflow to inf is caught by the finiteness check below
            with np.errstate(over="ignore", invalid="ignore"):
                mean = stm.f(m)
                cov = F @ filtered[-1].cov @ F.T + Q
            if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
                raise InferenceDivergence(f"non-finite prediction for step {t + 2}", step=t + 2)
            predicted.append(GaussianBelief(mean, 0.5 * (cov + cov.T)))
    return filtered, predicted


def _solve_predicted(P_pred: np.ndarray, B: np.ndarray) -> np.ndarray:
    """X with P_pred X = B, adding one round of jitter if the factorization fails."""
    for jitter in (0.0, 1e-9 * max(np.trace(P_pred) / P_pred.shape[0], 1.0)):
        try:
            c = cho_factor(P_pred + jitter * np.eye(P_pred.shape[0]), lower=True)
            return cho_solve(c, B)
        except np.linalg.LinAlgError:
            continue
    raise NumericalError("predicted covariance is singular; cannot form the RTS gain")


def rts_backward(filtered: list[GaussianBelief], predicted: list[GaussianBelief],
                 stm: StateTransitionModel) -> list[GaussianBelief]:
    """Backward RTS recursion; the final smoothed belief is the final filtered one."""
    if len(filtered) != len(predicted) or not filtered:
        raise ContractViolation("filtered and predicted passes must align and be nonempty")
    T = len(filtered)
    smoothed = [filtered[-1]]
    for t in range(T - 2, -1, -1):
        f_t = filtered[t]
        F = stm.jacobian(f_t.mean)
        # G = P_filt F^T P_pred^{-1}, via the solve P_pred X = F P_filt
        G = _solve_predicted(predicted[t + 1].cov, F @ f_t.cov).T
        nxt = smoothed[0]
        mean = f_t.mean + G @ (nxt.mean - predicted[t + 1].mean)
        cov = f_t.cov + G @ (nxt.cov - predicted[t + 1].cov) @ G.T
        smoothed.insert(0, GaussianBelief(mean, 0.5 * (cov + cov.T)))
    return smoothed


def ertss_smooth(ys: np.ndarray, stm: StateTransitionModel, model: LinearMeasurementModel,
                 init: GaussianBelief | None = None) -> SmoothingResult:
    """Filter forward, smooth backward, package as a SmoothingResult.

    The log-likelihood is the prediction-error decomposition
    sum_t log p(y_t | y_{1:t-1}).  No per-step prior in the learned-smoother
    sense exists here, so ``priors`` is None.
    """
    ys = _check_sequence(ys, stm, model)
    if init is None:
        init = default_init(ys[0], model)
    filtered, predicted = ekf_forward(ys, stm, model, init)
    smoothed = rts_backward(filtered, predicted, stm)
    loglik = sum(marginal_loglik(p, y, model) for p, y in zip(predicted, ys))
    return SmoothingResult(
        posteriors=smoothed,
        point_estimates=np.stack([b.mean for b in smoothed]),
        priors=None,
        loglik=float(loglik),
    )
