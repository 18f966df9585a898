"""Exact Gaussian algebra for a linear measurement model.

Implements the two closed-form operations that everything else leans on:
conditioning a Gaussian state belief on a linear noisy measurement, and the
marginal log-likelihood of that measurement under the belief.  With a prior
N(m, L) over the state and a measurement y = Hx + w, w ~ N(0, Cw):

    R = H L H^T + Cw
    K = L H^T R^{-1}
    posterior mean  = m + K (y - H m)
    posterior cov   = L - K R K^T
    log p(y)        = log N(y; H m, R)

All covariances are handled through Cholesky factorizations; log-determinants
come from the factor diagonal.  Everything is 64-bit and purely functional:
no operation mutates its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .errors import ContractViolation, NumericalError

_LOG_2PI = float(np.log(2.0 * np.pi))


def _as_locked_array(a, name: str, ndim: int) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise ContractViolation(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GaussianBelief:
    """Mean vector and covariance matrix of a Gaussian over the state.

    The covariance must be symmetric (relative tolerance 1e-10) and positive
    semidefinite up to a -1e-10 * trace eigenvalue slack.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = _as_locked_array(self.mean, "mean", 1)
        cov = _as_locked_array(self.cov, "cov", 2)
        m = mean.shape[0]
        if cov.shape != (m, m):
            raise ContractViolation(f"cov shape {cov.shape} does not match mean length {m}")
        scale = max(float(np.max(np.abs(cov))), 1.0)
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-10 * scale):
            raise ContractViolation("cov is not symmetric within 1e-10 relative tolerance")
        eigvals = np.linalg.eigvalsh(0.5 * (cov + cov.T))
        floor = -1e-10 * max(float(np.trace(cov)), 1e-300)
        if eigvals.min() < floor:
            raise ContractViolation(
                f"cov is not positive semidefinite (min eigenvalue {eigvals.min():.3e})"
            )
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class LinearMeasurementModel:
    """Measurement matrix H (n x m, n <= m) and noise covariance Cw (n x n, SPD)."""

    H: np.ndarray
    Cw: np.ndarray
    _chol_Cw: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        H = _as_locked_array(self.H, "H", 2)
        Cw = _as_locked_array(self.Cw, "Cw", 2)
        n, m = H.shape
        if n > m:
            raise ContractViolation(f"H must have n <= m, got shape {H.shape}")
        if Cw.shape != (n, n):
            raise ContractViolation(f"Cw shape {Cw.shape} does not match n={n}")
        scale = max(float(np.max(np.abs(Cw))), 1.0)
        if not np.allclose(Cw, Cw.T, rtol=0.0, atol=1e-10 * scale):
            raise ContractViolation("Cw is not symmetric")
        try:
            chol = np.linalg.cholesky(Cw)
        except np.linalg.LinAlgError as exc:
            raise ContractViolation("Cw is not positive definite") from exc
        chol.setflags(write=False)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "Cw", Cw)
        object.__setattr__(self, "_chol_Cw", chol)

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def m(self) -> int:
        return self.H.shape[1]

    @classmethod
    def identity(cls, dim: int, noise_var: float) -> "LinearMeasurementModel":
        """Identity measurement of every state coordinate with isotropic noise."""
        return cls(H=np.eye(dim), Cw=noise_var * np.eye(dim))


def _check_dims(prior: GaussianBelief, y: np.ndarray, model: LinearMeasurementModel):
    if prior.dim != model.m:
        raise ContractViolation(f"prior dim {prior.dim} does not match model m={model.m}")
    if y.shape != (model.n,):
        raise ContractViolation(f"measurement shape {y.shape} does not match n={model.n}")


def _innovation_factor(prior: GaussianBelief, model: LinearMeasurementModel):
    """Cholesky factor of R = H L H^T + Cw, plus H L for gain computation."""
    HL = model.H @ prior.cov
    R = HL @ model.H.T + model.Cw
    R = 0.5 * (R + R.T)
    try:
        cho = cho_factor(R, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("innovation covariance is not positive definite") from exc
    return cho, HL, R


def posterior_update(
    prior: GaussianBelief, y: np.ndarray, model: LinearMeasurementModel
) -> GaussianBelief:
    """Condition a Gaussian prior on a linear measurement y = Hx + w.

    Returns the posterior belief with mean m + K(y - Hm) and covariance
    L - K R K^T where K = L H^T R^{-1}.  The returned covariance is explicitly
    symmetrized, since the subtraction can break symmetry in floating point.
    """
    y = np.asarray(y, dtype=np.float64)
    _check_dims(prior, y, model)
    cho, HL, R = _innovation_factor(prior, model)
    # K = L H^T R^{-1}; with L symmetric, K^T = R^{-1} H L.
    K = cho_solve(cho, HL).T
    mean = prior.mean + K @ (y - model.H @ prior.mean)
    cov = prior.cov - K @ R @ K.T
    cov = 0.5 * (cov + cov.T)
    return GaussianBelief(mean=mean, cov=cov)


def marginal_loglik(
    prior: GaussianBelief, y: np.ndarray, model: LinearMeasurementModel
) -> float:
    """Log of the marginal measurement density, log N(y; Hm, H L H^T + Cw)."""
    y = np.asarray(y, dtype=np.float64)
    _check_dims(prior, y, model)
    cho, _, _ = _innovation_factor(prior, model)
    logdet = 2.0 * float(np.sum(np.log(np.diag(cho[0]))))
    resid = y - model.H @ prior.mean
    maha = float(resid @ cho_solve(cho, resid))
    return -0.5 * (model.n * _LOG_2PI + logdet + maha)


def spd_cholesky(cov: np.ndarray, jitter_scale: float = 1e-12) -> np.ndarray:
    """Lower Cholesky factor of a nominally-PSD matrix, with trace-scaled jitter.

    Retries with jitter_scale * trace(cov) added to the diagonal when the plain
    factorization fails; raises NumericalError if even the jittered matrix is
    not positive definite.
    """
    cov = 0.5 * (cov + cov.T)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    jitter = jitter_scale * max(float(np.trace(cov)), 1e-300)
    try:
        return np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("covariance is not positive semidefinite") from exc


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """log N(x; mean, cov) via Cholesky, tolerating a barely-PSD covariance."""
    x = np.asarray(x, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    if x.shape != mean.shape:
        raise ContractViolation(f"point shape {x.shape} does not match mean {mean.shape}")
    chol = spd_cholesky(np.asarray(cov, dtype=np.float64))
    z = solve_triangular(chol, x - mean, lower=True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return -0.5 * (x.shape[0] * _LOG_2PI + logdet + float(z @ z))
