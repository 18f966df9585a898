"""The deep recurrent architecture that emits Gaussian prior parameters.

Three input branches, each a causal conv front-end feeding a GRU: one
consumes past measurements, one runs anti-causally over future measurements,
one consumes past state estimates.  Branch hiddens are concatenated into a
three-layer dense trunk; the state-branch hidden also passes through a
three-layer skip stack whose output is added to the trunk's.  Linear heads
emit the prior mean and, through a softplus, the diagonal prior variance.

Variants: "dns" is the full model, "dns-s" drops the past-measurement branch,
"dns-noskip" drops the skip stack.

Inputs are standardized against stored dataset statistics and the heads map
back to data scale, so a freshly initialized network already emits a
climatology-like prior (data mean, data variance).  The statistics live in
non-trainable buffers; with the defaults (zero mean, unit scale) the network
is a plain unnormalized one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tape, Var
from .errors import ContractViolation
from .gaussian import LinearMeasurementModel

VARIANTS = ("dns", "dns-s", "dns-noskip")

# shift so a zero-initialized variance head emits softplus(shift) = 1 exactly
VAR_HEAD_SHIFT = float(np.log(np.expm1(1.0)))
VAR_FLOOR = 1e-6

_GRU_NAMES = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")


@dataclass(frozen=True)
class Architecture:
    """Variant plus every width the parameter shapes depend on."""

    variant: str
    state_dim: int
    meas_dim: int
    conv_channels: int = 16
    conv_width: int = 3
    gru_units: int = 30
    dense_width: int = 32
    dense_layers: int = 3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractViolation(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.meas_dim > self.state_dim:
            raise ContractViolation("measurement dimension cannot exceed state dimension")

    @property
    def branches(self) -> tuple:
        if self.variant == "dns-s":
            return ("future", "state")
        return ("past", "future", "state")

    @property
    def has_skip(self) -> bool:
        return self.variant != "dns-noskip"

    def branch_input_dim(self, branch: str) -> int:
        return self.state_dim if branch == "state" else self.meas_dim

    def to_meta(self) -> dict:
        return {
            "variant": self.variant, "state_dim": self.state_dim, "meas_dim": self.meas_dim,
            "conv_channels": self.conv_channels, "conv_width": self.conv_width,
            "gru_units": self.gru_units, "dense_width": self.dense_width,
            "dense_layers": self.dense_layers,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "Architecture":
        return cls(**{k: meta[k] for k in (
            "variant", "state_dim", "meas_dim", "conv_channels", "conv_width",
            "gru_units", "dense_width", "dense_layers")})


@dataclass(frozen=True)
class PriorParams:
    """Gaussian prior for one step: mean and strictly positive diagonal variance."""

    mean: np.ndarray
    var_diag: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        var = np.asarray(self.var_diag, dtype=np.float64)
        if mean.shape != var.shape or mean.ndim != 1:
            raise ContractViolation("mean and var_diag must be equal-length vectors")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
            raise ContractViolation("prior parameters must be finite")
        if np.any(var <= 0.0):
            raise ContractViolation("prior variance must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var_diag", var)

    @property
    def cov(self) -> np.ndarray:
        return np.diag(self.var_diag)


def parameter_shapes(arch: Architecture) -> list[tuple[str, tuple]]:
    """Ordered (name, shape) pairs; the order fixes the init RNG stream."""
    shapes = []
    C, G, W = arch.conv_channels, arch.gru_units, arch.dense_width
    for branch in arch.branches:
        d = arch.branch_input_dim(branch)
        for k in range(arch.conv_width):
            shapes.append((f"{branch}.conv.w{k}", (d, C)))
        shapes.append((f"{branch}.conv.b", (C,)))
        for gname in _GRU_NAMES:
            if gname.startswith("w"):
                shapes.append((f"{branch}.gru.{gname}", (C, G)))
            elif gname.startswith("u"):
                shapes.append((f"{branch}.gru.{gname}", (G, G)))
            else:
                shapes.append((f"{branch}.gru.{gname}", (G,)))
        shapes.append((f"{branch}.gru.h0", (G,)))
    trunk_in = G * len(arch.branches)
    for i in range(arch.dense_layers):
        shapes.append((f"trunk.l{i}.w", (trunk_in if i == 0 else W, W)))
        shapes.append((f"trunk.l{i}.b", (W,)))
    if arch.has_skip:
        for i in range(arch.dense_layers):
            shapes.append((f"skip.l{i}.w", (G if i == 0 else W, W)))
            shapes.append((f"skip.l{i}.b", (W,)))
    for head in ("head_mean", "head_var"):
        shapes.append((f"{head}.w", (W, arch.state_dim)))
        shapes.append((f"{head}.b", (arch.state_dim,)))
    return shapes


def buffer_defaults(arch: Architecture) -> dict:
    return {
        "norm.y_mean": np.zeros(arch.meas_dim),
        "norm.y_scale": np.ones(arch.meas_dim),
        "norm.x_mean": np.zeros(arch.state_dim),
        "norm.x_scale": np.ones(arch.state_dim),
    }


@dataclass
class DRAParameters:
    """All trainable tensors plus non-trainable standardization buffers."""

    arch: Architecture
    tensors: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]

    def __post_init__(self):
        expected = dict(parameter_shapes(self.arch))
        if set(self.tensors) != set(expected):
            missing = set(expected) - set(self.tensors)
            extra = set(self.tensors) - set(expected)
            raise ContractViolation(f"parameter names mismatch: missing {sorted(missing)}, "
                                    f"unexpected {sorted(extra)}")
        for name, t in self.tensors.items():
            if t.shape != expected[name]:
                raise ContractViolation(f"{name} has shape {t.shape}, expected {expected[name]}")
            if not np.all(np.isfinite(t)):
                raise ContractViolation(f"{name} contains non-finite values")
        for name in buffer_defaults(self.arch):
            if name not in self.buffers:
                raise ContractViolation(f"missing buffer {name}")

    def copy(self) -> "DRAParameters":
        return DRAParameters(
            arch=self.arch,
            tensors={k: v.copy() for k, v in self.tensors.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
        )


def init_parameters(arch: Architecture, seed: int = 0) -> DRAParameters:
    """Uniform fan-in weights, zero biases and initial hiddens."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in parameter_shapes(arch):
        if len(shape) == 2:
            tensors[name] = nn.uniform_init(rng, shape, fan_in=shape[0])
        else:
            tensors[name] = np.zeros(shape)
    return DRAParameters(arch=arch, tensors=tensors, buffers=buffer_defaults(arch))


def parameter_count(arch: Architecture) -> int:
    return sum(int(np.prod(shape)) for _, shape in parameter_shapes(arch))


def set_standardization(params: DRAParameters, measurements: list[np.ndarray],
                        model: LinearMeasurementModel):
    """Fit the standardization buffers to a training measurement set.

    State-space statistics are pulled back through the pseudoinverse of H
    (identical to the measurement statistics when H = I).  Mutates the
    buffers in place; trainable tensors are untouched.
    """
    flat = np.concatenate([np.asarray(y, dtype=np.float64) for y in measurements], axis=0)
    if flat.shape[1] != params.arch.meas_dim:
        raise ContractViolation("measurement dimension does not match the architecture")
    y_mean = flat.mean(axis=0)
    y_var = flat.var(axis=0)
    pinv = np.linalg.pinv(model.H)
    x_mean = pinv @ y_mean
    x_var = np.diag(pinv @ np.diag(y_var) @ pinv.T)
    params.buffers["norm.y_mean"] = y_mean
    params.buffers["norm.y_scale"] = np.sqrt(np.maximum(y_var, 1e-12))
    params.buffers["norm.x_mean"] = x_mean
    params.buffers["norm.x_scale"] = np.sqrt(np.maximum(x_var, 1e-12))


class TapedDRA:
    """One pass worth of tape-bound parameters and stepping machinery.

    Carries are (older input, newer input, hidden) triples per branch, all as
    tape nodes, so gradients flow through time and through the state
    feedback.  Batch-first throughout: inputs (B, d), hiddens (B, units).
    """

    def __init__(self, tape: Tape, params: DRAParameters, batch_size: int):
        self.tape = tape
        self.arch = params.arch
        self.B = batch_size
        self.p = {name: tape.leaf(t) for name, t in params.tensors.items()}
        self._gru = {
            branch: nn.GRUWeights(**{g: self.p[f"{branch}.gru.{g}"] for g in _GRU_NAMES})
            for branch in self.arch.branches
        }
        b = params.buffers
        self._y_mean = b["norm.y_mean"]
        self._y_inv_scale = 1.0 / b["norm.y_scale"]
        self._x_mean = b["norm.x_mean"]
        self._x_inv_scale = 1.0 / b["norm.x_scale"]
        self._x_scale = b["norm.x_scale"]
        self._x_var = b["norm.x_scale"] ** 2

    def leaves(self) -> dict[str, Var]:
        return self.p

    def initial_carry(self, branch: str):
        d = self.arch.branch_input_dim(branch)
        pad = self.tape.constant(np.zeros((self.B, d)))
        h = ad.add(self.p[f"{branch}.gru.h0"], np.zeros((self.B, self.arch.gru_units)))
        return (pad, pad, h)

    def standardize_y(self, y: Var) -> Var:
        return ad.mul(ad.sub(y, self._y_mean), self._y_inv_scale)

    def standardize_x(self, x: Var) -> Var:
        return ad.mul(ad.sub(x, self._x_mean), self._x_inv_scale)

    def branch_step(self, branch: str, carry, u: Var | None):
        """Advance one branch by one standardized input (None = placeholder)."""
        older, newer, h = carry
        if u is None:
            u = self.tape.constant(np.zeros((self.B, self.arch.branch_input_dim(branch))))
        taps = [self.p[f"{branch}.conv.w{k}"] for k in range(self.arch.conv_width)]
        x = nn.conv_step([older, newer, u], taps, self.p[f"{branch}.conv.b"])
        h_new = nn.gru_cell(x, h, self._gru[branch])
        return h_new, (newer, u, h_new)

    def anticausal_states(self, ys: list[Var]) -> list[Var]:
        """a_t for t=1..T; a_t has consumed y_T,...,y_{t+1} and nothing else."""
        T = len(ys)
        carry = self.initial_carry("future")
        a: list[Var | None] = [None] * T
        a[T - 1] = carry[2]
        for t in range(T - 1, 0, -1):
            hidden, carry = self.branch_step("future", carry, self.standardize_y(ys[t]))
            a[t - 1] = hidden
        return a

    def prior_head(self, a_t: Var, h_past: Var | None, h_state: Var) -> tuple[Var, Var]:
        """Trunk plus skip stack plus heads; returns (mean, var_diag), each (B, m)."""
        if self.arch.variant == "dns-s":
            feats = ad.concat([a_t, h_state], axis=1)
        else:
            feats = ad.concat([h_past, a_t, h_state], axis=1)
        z = feats
        for i in range(self.arch.dense_layers):
            z = nn.dense(z, self.p[f"trunk.l{i}.w"], self.p[f"trunk.l{i}.b"], "tanh")
        if self.arch.has_skip:
            s = h_state
            for i in range(self.arch.dense_layers):
                s = nn.dense(s, self.p[f"skip.l{i}.w"], self.p[f"skip.l{i}.b"], "tanh")
            z = ad.add(z, s)
        raw_mean = nn.dense(z, self.p["head_mean.w"], self.p["head_mean.b"])
        raw_var = nn.dense(z, self.p["head_var.w"], self.p["head_var.b"])
        mean = ad.add(self._x_mean, ad.mul(self._x_scale, raw_mean))
        var = ad.add(ad.mul(self._x_var, ad.softplus(ad.add(raw_var, VAR_HEAD_SHIFT))), VAR_FLOOR)
        return mean, var


# ---------------------------------------------------------------------------
# Single-sequence numpy-facing wrappers (a fresh throwaway tape per call)


def anticausal_sweep(ys: np.ndarray, params: DRAParameters) -> np.ndarray:
    """Future-branch hiddens a_1..a_T as a (T, gru_units) array."""
    ys = np.asarray(ys, dtype=np.float64)
    if ys.ndim != 2 or ys.shape[1] != params.arch.meas_dim:
        raise ContractViolation(f"measurements must be (T, {params.arch.meas_dim})")
    tape = Tape()
    net = TapedDRA(tape, params, batch_size=1)
    a = net.anticausal_states([tape.constant(y[None, :]) for y in ys])
    return np.stack([v.value[0] for v in a])


def _empty_carry():
    return {"past": None, "state": None}


def _step_prior(params: DRAParameters, a_t: np.ndarray, y_prev: np.ndarray | None,
                xhat_prev: np.ndarray | None, carry: dict | None):
    arch = params.arch
    tape = Tape()
    net = TapedDRA(tape, params, batch_size=1)
    carry = carry or _empty_carry()

    def lift(branch, stored):
        if stored is None:
            return net.initial_carry(branch)
        return tuple(tape.constant(arr) for arr in stored)

    h_past = None
    new_carry = {}
    if arch.variant != "dns-s":
        u = None if y_prev is None else net.standardize_y(tape.constant(np.asarray(y_prev)[None, :]))
        h_past, c = net.branch_step("past", lift("past", carry["past"]), u)
        new_carry["past"] = tuple(v.value for v in c)
    else:
        new_carry["past"] = None
    ux = None if xhat_prev is None else net.standardize_x(tape.constant(np.asarray(xhat_prev)[None, :]))
    h_state, c = net.branch_step("state", lift("state", carry["state"]), ux)
    new_carry["state"] = tuple(v.value for v in c)

    mean, var = net.prior_head(tape.constant(np.asarray(a_t)[None, :]), h_past, h_state)
    return PriorParams(mean.value[0], var.value[0]), new_carry


def dra_forward(y_prev: np.ndarray | None, future_summary: np.ndarray,
                xhat_prev: np.ndarray | None, params: DRAParameters,
                carry: dict | None = None):
    """One prior step of the full model.

    Consumes the previous measurement and previous state estimate (None at
    t=1, meaning the zero placeholder) plus the anti-causal summary a_t.
    Returns (PriorParams, updated carry).
    """
    if params.arch.variant == "dns-s":
        raise ContractViolation("dns-s parameters have no past-measurement branch; "
                                "use dra_s_forward")
    return _step_prior(params, future_summary, y_prev, xhat_prev, carry)


def dra_s_forward(future_summary: np.ndarray, xhat_prev: np.ndarray | None,
                  params: DRAParameters, carry: dict | None = None):
    """One prior step of the simplified model (no past-measurement branch)."""
    if params.arch.variant != "dns-s":
        raise ContractViolation("dra_s_forward requires dns-s parameters")
    return _step_prior(params, future_summary, None, xhat_prev, carry)
