"""Recurrent network building blocks and the Adam optimizer.

Layers come in two flavours: taped functions operating on ``autodiff.Var``
nodes (used inside training and smoothing passes) and plain-numpy wrappers of
the same arithmetic for direct unit testing.  All follow a batch-first (B, d)
convention.

The GRU uses the gating convention where the update gate preserves the old
state: h' = z * h + (1 - z) * htilde.  A saturated update gate (large positive
gate bias) therefore copies the hidden state through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var, sigmoid_values, softplus_values
from .errors import ContractViolation, OptimizerError

ACTIVATIONS = ("identity", "tanh", "relu")


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    """Weights drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _apply_activation(x: Var, activation: str) -> Var:
    if activation == "identity":
        return x
    if activation == "tanh":
        return ad.tanh(x)
    if activation == "relu":
        return ad.relu(x)
    raise ContractViolation(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")


def dense(x: Var, w: Var, b: Var, activation: str = "identity") -> Var:
    """Taped affine layer act(x @ w + b); x is (B, d_in), w is (d_in, d_out)."""
    return _apply_activation(ad.add(ad.matmul(x, w), b), activation)


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, activation: str = "identity") -> np.ndarray:
    """Plain-numpy face of ``dense`` for single vectors or batches."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    tape = ad.Tape()
    out = dense(tape.constant(np.atleast_2d(x)), tape.constant(w), tape.constant(b), activation)
    return out.value[0] if single else out.value


@dataclass(frozen=True)
class GRUWeights:
    """The nine taped tensors of one GRU cell (update, reset, candidate)."""

    w_z: Var
    u_z: Var
    b_z: Var
    w_r: Var
    u_r: Var
    b_r: Var
    w_h: Var
    u_h: Var
    b_h: Var


def gru_cell(x: Var, h: Var, p: GRUWeights) -> Var:
    """One taped GRU step; x is (B, d_in), h is (B, units)."""
    z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, p.w_z), ad.matmul(h, p.u_z)), p.b_z))
    r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, p.w_r), ad.matmul(h, p.u_r)), p.b_r))
    htilde = ad.tanh(ad.add(ad.add(ad.matmul(x, p.w_h), ad.matmul(ad.mul(r, h), p.u_h)), p.b_h))
    one_minus_z = ad.sub(1.0, z)
    return ad.add(ad.mul(z, h), ad.mul(one_minus_z, htilde))


def gru_cell_forward(x: np.ndarray, h: np.ndarray, weights: dict) -> np.ndarray:
    """Plain-numpy GRU step; ``weights`` maps the nine names w_z..b_h to arrays."""
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    single = x.ndim == 1
    tape = ad.Tape()
    p = GRUWeights(**{k: tape.constant(weights[k]) for k in
                      ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")})
    out = gru_cell(tape.constant(np.atleast_2d(x)), tape.constant(np.atleast_2d(h)), p)
    return out.value[0] if single else out.value


def conv_step(window: list[Var], taps: list[Var], bias: Var) -> Var:
    """One causal 1-d convolution output: sum_k window[k] @ taps[k] + bias.

    ``window`` holds the last ``width`` inputs oldest-first, each (B, d_in);
    ``taps`` holds one (d_in, channels) matrix per window position.
    """
    if len(window) != len(taps):
        raise ContractViolation("conv window and taps must have equal length")
    acc = ad.matmul(window[0], taps[0])
    for w, t in zip(window[1:], taps[1:]):
        acc = ad.add(acc, ad.matmul(w, t))
    return ad.add(acc, bias)


def causal_conv1d_forward(seq: np.ndarray, taps: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Causal convolution over a full sequence, with zero left-padding.

    ``seq`` is (T, d_in), ``taps`` is (width, d_in, channels) ordered oldest
    tap first, ``bias`` is (channels,).  Output (T, channels); position t sees
    inputs t-width+1 .. t only.
    """
    seq = np.asarray(seq, dtype=np.float64)
    taps = np.asarray(taps, dtype=np.float64)
    width, d_in, channels = taps.shape
    T = seq.shape[0]
    out = np.tile(np.asarray(bias, dtype=np.float64), (T, 1))
    for k in range(width):
        # tap k multiplies the input lagged by (width - 1 - k) steps
        lag = width - 1 - k
        if lag == 0:
            out += seq @ taps[k]
        elif lag < T:
            out[lag:] += seq[:-lag] @ taps[k]
    return out


def softplus(x: np.ndarray) -> np.ndarray:
    """Positive reparameterization used by variance heads."""
    return softplus_values(x)


def lr_schedule(epoch: int, base_lr: float = 1e-3, decay: float = 0.9, every: int = 33) -> float:
    """Stepwise exponential decay: base_lr * decay ** floor(epoch / every)."""
    if epoch < 0:
        raise ContractViolation("epoch must be non-negative")
    return base_lr * decay ** (epoch // every)


def clip_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Scale all gradients jointly so the global L2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if not np.isfinite(norm):
        raise OptimizerError("gradient norm is not finite")
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


@dataclass
class AdamState:
    """First/second moment accumulators plus the bias-correction step count."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict, **kwargs) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **kwargs,
        )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """One bias-corrected Adam update; mutates ``state``, returns new params."""
    if set(grads) - set(params):
        raise ContractViolation("gradient for unknown parameter")
    state.step += 1
    t = state.step
    b1, b2, eps = state.beta1, state.beta2, state.eps
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for {name!r}")
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        mhat = m / (1.0 - b1 ** t)
        vhat = v / (1.0 - b2 ** t)
        out[name] = p - lr * mhat / (np.sqrt(vhat) + eps)
    return out
