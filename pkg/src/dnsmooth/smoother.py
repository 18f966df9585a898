"""Sequential smoothing with a learned Gaussian prior, and its training loop.

One pass over a sequence runs the anti-causal sweep once, then walks t = 1..T:
the network emits a Gaussian prior (m_t, L_t) conditioned on past measurements,
past state estimates, and the future summary a_t; conditioning on y_t gives the
closed-form posterior; its mean becomes the state estimate x-hat_t fed back
into the network at t+1.  The same pass accumulates the marginal measurement
log-likelihood sum_t log p(y_t | y_past, y_future), which is the (negated)
training loss, so inference is literally embedded in training and no state
labels are ever consumed.

Gradients flow through the state feedback by default (full backpropagation
through time); ``detach_feedback`` cuts that edge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tape
from .container import read_container, write_container
from .dra import (
    Architecture,
    DRAParameters,
    PriorParams,
    TapedDRA,
    init_parameters,
    parameter_shapes,
    set_standardization,
)
from .errors import (ContractViolation, InferenceDivergence, NumericalError,
                     TrainingDivergence)
from .gaussian import GaussianBelief, LinearMeasurementModel, gaussian_logpdf

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class SmoothingResult:
    """Per-step posterior beliefs, point estimates, and (optionally) priors."""

    posteriors: list[GaussianBelief]
    point_estimates: np.ndarray
    priors: list[PriorParams] | None
    loglik: float

    def __post_init__(self):
        T = len(self.posteriors)
        if self.point_estimates.shape[0] != T:
            raise ContractViolation("point estimate count does not match posterior count")
        if self.priors is not None and len(self.priors) != T:
            raise ContractViolation("prior count does not match posterior count")

    @property
    def T(self) -> int:
        return len(self.posteriors)


@dataclass
class TrainConfig:
    """Optimizer protocol: epochs, batching, schedule, clipping, seed, variant."""

    epochs: int = 200
    batch_size: int = 64
    base_lr: float = 1e-3
    lr_decay: float = 0.9
    lr_decay_every: int = 33
    clip_norm: float = 10.0
    seed: int = 0
    variant: str = "dns"
    detach_feedback: bool = False
    heldout: list | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractViolation("epochs and batch_size must be at least 1")


def _batch_pass(tape: Tape, net: TapedDRA, Y: np.ndarray, model: LinearMeasurementModel,
                detach: bool, collect: bool):
    """The shared sequential pass over a (B, T, n) measurement batch.

    Returns the per-sequence log-likelihood node (B,) and, when ``collect``,
    numpy records of priors, posterior means, and posterior covariances.
    """
    B, T, n = Y.shape
    m = net.arch.state_dim
    H, Cw = model.H, model.Cw
    Ht = H.T.copy()

    ys = [tape.constant(Y[:, t, :]) for t in range(T)]
    a = net.anticausal_states(ys)
    has_past = net.arch.variant != "dns-s"
    past_carry = net.initial_carry("past") if has_past else None
    state_carry = net.initial_carry("state")

    loglik = None
    xhat_prev = None
    records = None
    if collect:
        records = {
            "prior_mean": np.empty((B, T, m)), "prior_var": np.empty((B, T, m)),
            "post_mean": np.empty((B, T, m)), "post_cov": np.empty((B, T, m, m)),
        }

    for t in range(T):
        h_past = None
        if has_past:
            u = net.standardize_y(ys[t - 1]) if t > 0 else None
            h_past, past_carry = net.branch_step("past", past_carry, u)
        ux = net.standardize_x(xhat_prev) if t > 0 else None
        h_state, state_carry = net.branch_step("state", state_carry, ux)
        mean, var = net.prior_head(a[t], h_past, h_state)

        R = ad.add(ad.hdh(var, H), Cw)
        Rinv = ad.psd_inverse(R)
        ld = ad.logdet_psd(R)
        e = ad.sub(ys[t], ad.matmul(mean, Ht))
        e_col = ad.reshape(e, (B, n, 1))
        alpha = ad.matmul(Rinv, e_col)
        maha = ad.reduce_sum(ad.mul(e_col, alpha), axis=(1, 2))
        ll_t = ad.add(ad.mul(ad.add(ld, maha), -0.5), -0.5 * n * _LOG_2PI)
        loglik = ll_t if loglik is None else ad.add(loglik, ll_t)

        # posterior mean: m + L H^T R^{-1} (y - H m), with L = diag(var)
        xhat = ad.add(mean, ad.mul(var, ad.matmul(ad.reshape(alpha, (B, n)), H)))
        if not np.all(np.isfinite(xhat.value)) or not np.all(np.isfinite(var.value)):
            raise InferenceDivergence(f"non-finite belief at step {t + 1}", step=t + 1)

        if collect:
            records["prior_mean"][:, t] = mean.value
            records["prior_var"][:, t] = var.value
            records["post_mean"][:, t] = xhat.value
            v = var.value
            K = v[:, :, None] * np.matmul(Ht, Rinv.value)
            cov = np.zeros((B, m, m))
            cov[:, np.arange(m), np.arange(m)] = v
            cov -= np.matmul(np.matmul(K, R.value), np.swapaxes(K, 1, 2))
            records["post_cov"][:, t] = 0.5 * (cov + np.swapaxes(cov, 1, 2))

        xhat_prev = tape.constant(xhat.value) if detach else xhat

    return loglik, records


def _check_variant(params: DRAParameters, variant: str | None):
    if variant is not None and variant != params.arch.variant:
        raise ContractViolation(
            f"requested variant {variant!r} but parameters are {params.arch.variant!r}")


def smooth(ys: np.ndarray, model: LinearMeasurementModel, params: DRAParameters,
           variant: str | None = None, detach_feedback: bool = False) -> SmoothingResult:
    """Full posterior for one measurement sequence of shape (T, n)."""
    _check_variant(params, variant)
    ys = np.asarray(ys, dtype=np.float64)
    if ys.ndim != 2 or ys.shape[1] != model.n:
        raise ContractViolation(f"measurements must be (T, {model.n}), got {ys.shape}")
    if model.m != params.arch.state_dim or model.n != params.arch.meas_dim:
        raise ContractViolation("measurement model dimensions do not match the architecture")
    tape = Tape()
    net = TapedDRA(tape, params, batch_size=1)
    loglik, rec = _batch_pass(tape, net, ys[None, :, :], model, detach_feedback, collect=True)
    T = ys.shape[0]
    posteriors = [GaussianBelief(rec["post_mean"][0, t], rec["post_cov"][0, t]) for t in range(T)]
    priors = [PriorParams(rec["prior_mean"][0, t], rec["prior_var"][0, t]) for t in range(T)]
    return SmoothingResult(
        posteriors=posteriors,
        point_estimates=rec["post_mean"][0].copy(),
        priors=priors,
        loglik=float(loglik.value[0]),
    )


def sequence_loglik(ys: np.ndarray, model: LinearMeasurementModel, params: DRAParameters,
                    variant: str | None = None, detach_feedback: bool = False) -> float:
    """sum_t log p(y_t | y_{1:t-1}, y_{t+1:T}) under the current parameters."""
    _check_variant(params, variant)
    ys = np.asarray(ys, dtype=np.float64)
    tape = Tape()
    net = TapedDRA(tape, params, batch_size=1)
    loglik, _ = _batch_pass(tape, net, ys[None, :, :], model, detach_feedback, collect=False)
    return float(loglik.value[0])


def evaluate_posterior_density(x: np.ndarray, result: SmoothingResult, t: int) -> float:
    """log posterior density of a state vector at 1-based step t."""
    if not 1 <= t <= result.T:
        raise ContractViolation(f"t must be in 1..{result.T}, got {t}")
    belief = result.posteriors[t - 1]
    return gaussian_logpdf(np.asarray(x, dtype=np.float64), belief.mean, belief.cov)


def _extract_measurements(data) -> list[np.ndarray]:
    if hasattr(data, "measurements"):
        if getattr(data, "states", None) is not None:
            raise ContractViolation(
                "training input still carries state labels; pass dataset.measurements_only()")
        seqs = data.measurements
    else:
        seqs = list(data)
    if not seqs:
        raise ContractViolation("training set is empty")
    return [np.asarray(y, dtype=np.float64) for y in seqs]


def _mean_heldout_nll(heldout, model, params, detach):
    total = 0.0
    steps = 0
    for y in heldout:
        y = np.asarray(y, dtype=np.float64)
        total -= sequence_loglik(y, model, params, detach_feedback=detach)
        steps += y.shape[0] * model.n
    return total / steps


def train(data, model: LinearMeasurementModel, config: TrainConfig,
          callback=None, _resume=None) -> tuple[DRAParameters, list[dict]]:
    """Fit prior-network parameters to measurement sequences by maximum likelihood.

    The per-batch objective is the mean over sequences of the per-sequence
    negative log-likelihood; gradients are clipped by global norm and applied
    with Adam under the step-decay schedule.  Bit-deterministic for a fixed
    config.  Returns the trained parameters and one history row per epoch
    with the mean per-step per-dimension loss and the learning rate.

    ``callback(epoch, params, adam, shuffle_rng, history)``, when given, runs
    after every epoch (checkpoint hooks).  ``_resume`` is the loaded training
    state from a checkpoint and continues the identical stream as an
    uninterrupted run.
    """
    seqs = _extract_measurements(data)
    for y in seqs:
        if y.ndim != 2 or y.shape[1] != model.n:
            raise ContractViolation(f"sequences must be (T, {model.n})")

    if _resume is not None:
        params = _resume["params"]
        adam = _resume["adam"]
        shuffle_rng = _resume["shuffle_rng"]
        start_epoch = _resume["epoch_next"]
        history = list(_resume["history"])
    else:
        arch = Architecture(config.variant, state_dim=model.m, meas_dim=model.n)
        params = init_parameters(arch, seed=config.seed)
        set_standardization(params, seqs, model)
        adam = nn.AdamState.for_params(params.tensors)
        shuffle_rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(entropy=config.seed, spawn_key=(2,))))
        start_epoch = 0
        history = []

    N = len(seqs)
    for epoch in range(start_epoch, config.epochs):
        lr = nn.lr_schedule(epoch, config.base_lr, config.lr_decay, config.lr_decay_every)
        order = shuffle_rng.permutation(N)
        epoch_nll = 0.0
        epoch_obs = 0
        for b0 in range(0, N, config.batch_size):
            batch = order[b0:b0 + config.batch_size]
            # sub-batch by length so each stack is rectangular; gradient
            # seeding by 1/B keeps the objective the batch mean regardless
            groups: dict[int, list[int]] = {}
            for idx in batch:
                groups.setdefault(seqs[idx].shape[0], []).append(idx)
            B_total = len(batch)
            grads: dict[str, np.ndarray] = {}
            batch_nll = 0.0
            # params are mutated only by adam_step, so at any failure point
            # they are still the last finite parameter state
            try:
                for T, idxs in sorted(groups.items()):
                    Y = np.stack([seqs[i] for i in idxs])
                    tape = Tape()
                    net = TapedDRA(tape, params, batch_size=len(idxs))
                    loglik, _ = _batch_pass(tape, net, Y, model, config.detach_feedback,
                                            collect=False)
                    loss = ad.mul(ad.reduce_sum(loglik), -1.0)
                    if not np.isfinite(loss.value):
                        raise TrainingDivergence(
                            f"non-finite loss in epoch {epoch}, batch {b0 // config.batch_size}",
                            epoch=epoch, batch=b0 // config.batch_size,
                            last_params=params.copy())
                    tape.backward(loss, seed=1.0 / B_total)
                    for name, leaf in net.leaves().items():
                        if leaf.grad is not None:
                            grads[name] = grads.get(name, 0.0) + leaf.grad
                    batch_nll += float(loss.value)
                    epoch_obs += Y.shape[0] * T * model.n
                clipped, _ = nn.clip_global_norm(grads, config.clip_norm)
                params.tensors = nn.adam_step(params.tensors, clipped, adam, lr)
            except TrainingDivergence:
                raise
            except NumericalError as exc:
                raise TrainingDivergence(
                    f"numerical failure in epoch {epoch}, "
                    f"batch {b0 // config.batch_size}: {exc}",
                    epoch=epoch, batch=b0 // config.batch_size,
                    last_params=params.copy()) from exc
            epoch_nll += batch_nll
        row = {"epoch": epoch, "loss": epoch_nll / epoch_obs, "lr": lr}
        if config.heldout is not None:
            row["heldout_loss"] = _mean_heldout_nll(config.heldout, model, params,
                                                    config.detach_feedback)
        history.append(row)
        if callback is not None:
            callback(epoch, params, adam, shuffle_rng, history)
    return params, history


# ---------------------------------------------------------------------------
# Checkpoints and smoothing-result persistence


def save_checkpoint(path, params: DRAParameters, meta: dict | None = None,
                    adam: nn.AdamState | None = None,
                    shuffle_state: dict | None = None,
                    epoch_next: int | None = None,
                    history: list | None = None):
    arrays = {}
    for name, t in params.tensors.items():
        arrays[f"param.{name}"] = t
    for name, b in params.buffers.items():
        arrays[f"buffer.{name}"] = b
    header = {
        "kind": "checkpoint",
        "arch": params.arch.to_meta(),
        "meta": meta or {},
    }
    if adam is not None:
        for name in params.tensors:
            arrays[f"adam.m.{name}"] = adam.m[name]
            arrays[f"adam.v.{name}"] = adam.v[name]
        header["adam_step"] = adam.step
    if shuffle_state is not None:
        header["shuffle_state"] = shuffle_state
    if epoch_next is not None:
        header["epoch_next"] = epoch_next
    if history is not None:
        header["history"] = history
    write_container(path, arrays, header)


def load_checkpoint(path) -> tuple[DRAParameters, dict]:
    """Parameters plus the raw header; training state stays in the header."""
    arrays, header = read_container(path)
    if header.get("kind") != "checkpoint":
        raise ContractViolation(f"{path} is not a checkpoint container")
    arch = Architecture.from_meta(header["arch"])
    # restore declaration order: the container sorts array names, but reduction
    # order inside gradient clipping follows dict order, so resumed runs must
    # iterate tensors exactly like a fresh init to stay bit-deterministic
    tensors = {name: arrays[f"param.{name}"] for name, _ in parameter_shapes(arch)}
    buffers = {name[len("buffer."):]: arr for name, arr in arrays.items()
               if name.startswith("buffer.")}
    params = DRAParameters(arch=arch, tensors=tensors, buffers=buffers)
    return params, header


def load_training_state(path) -> dict:
    """Rebuild the full resume bundle (params, Adam, shuffle RNG, epoch)."""
    arrays, header = read_container(path)
    params, _ = load_checkpoint(path)
    if "adam_step" not in header or "shuffle_state" not in header:
        raise ContractViolation(f"{path} lacks optimizer state; cannot resume")
    order = [name for name, _ in parameter_shapes(params.arch)]
    adam = nn.AdamState(
        m={name: arrays[f"adam.m.{name}"] for name in order},
        v={name: arrays[f"adam.v.{name}"] for name in order},
        step=int(header["adam_step"]),
    )
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = header["shuffle_state"]
    return {
        "params": params,
        "adam": adam,
        "shuffle_rng": rng,
        "epoch_next": int(header["epoch_next"]),
        "history": header.get("history", []),
    }


def save_smoothing_results(path, results: list[SmoothingResult], meta: dict | None = None):
    lengths = np.array([r.T for r in results], dtype=np.int64)
    arrays = {
        "lengths": lengths,
        "post_mean": np.concatenate([np.stack([b.mean for b in r.posteriors]) for r in results]),
        "post_cov": np.concatenate([np.stack([b.cov for b in r.posteriors]) for r in results]),
    }
    have_priors = all(r.priors is not None for r in results)
    if have_priors:
        arrays["prior_mean"] = np.concatenate(
            [np.stack([p.mean for p in r.priors]) for r in results])
        arrays["prior_var"] = np.concatenate(
            [np.stack([p.var_diag for p in r.priors]) for r in results])
    header = {
        "kind": "smoothing",
        "logliks": [r.loglik for r in results],
        "meta": meta or {},
    }
    write_container(path, arrays, header)


def load_smoothing_results(path) -> tuple[list[SmoothingResult], dict]:
    arrays, header = read_container(path)
    if header.get("kind") != "smoothing":
        raise ContractViolation(f"{path} is not a smoothing-results container")
    lengths = arrays["lengths"].tolist()
    splits = np.cumsum(lengths)[:-1]
    means = np.split(arrays["post_mean"], splits)
    covs = np.split(arrays["post_cov"], splits)
    priors_m = np.split(arrays["prior_mean"], splits) if "prior_mean" in arrays else None
    priors_v = np.split(arrays["prior_var"], splits) if "prior_var" in arrays else None
    results = []
    for i, T in enumerate(lengths):
        posteriors = [GaussianBelief(means[i][t], covs[i][t]) for t in range(T)]
        priors = None
        if priors_m is not None:
            priors = [PriorParams(priors_m[i][t], priors_v[i][t]) for t in range(T)]
        results.append(SmoothingResult(
            posteriors=posteriors, point_estimates=means[i].copy(),
            priors=priors, loglik=float(header["logliks"][i])))
    return results, header["meta"]
