"""Tape-based reverse-mode automatic differentiation over numpy arrays.

A ``Tape`` records every primitive operation in construction order, which is
automatically a topological order; the reverse sweep walks the record
backwards and accumulates gradients additively at fan-out points.  Values are
64-bit numpy arrays throughout.  The primitive set is deliberately small:
elementwise arithmetic and activations, matrix products (optionally batched),
reductions, concatenation, and three dense-linear-algebra primitives used by
the Gaussian likelihood (``hdh``, ``psd_inverse``, ``logdet_psd``).

Gradient correctness is checked against central finite differences; see
``finite_difference`` and ``max_gradient_error`` at the bottom.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation, NumericalError


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function on raw arrays."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus_values(x: np.ndarray) -> np.ndarray:
    """Numerically stable log(1 + e^x); linear for large x, e^x for very negative x."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x > 0
    out[pos] = x[pos] + np.log1p(np.exp(-x[pos]))
    out[~pos] = np.log1p(np.exp(x[~pos]))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Var:
    """A tape node: a value plus a slot for the accumulated gradient."""

    __slots__ = ("value", "grad", "tape", "_bwd")

    def __init__(self, value: np.ndarray, tape: "Tape"):
        self.value = value
        self.grad = None
        self.tape = tape
        self._bwd = None

    @property
    def shape(self):
        return self.value.shape

    def _accum(self, g: np.ndarray):
        self.grad = g if self.grad is None else self.grad + g

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of primitive operations enabling the reverse sweep."""

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes: list[Var] = []

    def __len__(self):
        return len(self._nodes)

    def _record(self, value: np.ndarray, bwd) -> Var:
        node = Var(value, self)
        node._bwd = bwd
        self._nodes.append(node)
        return node

    def leaf(self, value) -> Var:
        """A differentiable input node (parameter or data entry point)."""
        return self._record(np.asarray(value, dtype=np.float64), None)

    def constant(self, value) -> Var:
        """A node whose gradient is never read; identical mechanics to leaf."""
        return self.leaf(value)

    def backward(self, loss: Var, seed: float = 1.0):
        """Reverse sweep from a scalar loss; gradients land in ``Var.grad``."""
        if loss.tape is not self:
            raise ContractViolation("loss node does not belong to this tape")
        if loss.value.shape != ():
            raise ContractViolation(f"loss must be scalar, got shape {loss.value.shape}")
        loss._accum(np.asarray(seed, dtype=np.float64))
        for node in reversed(self._nodes):
            if node.grad is not None and node._bwd is not None:
                node._bwd(node.grad)


def backward(tape: Tape, loss: Var, seed: float = 1.0):
    """Run the reverse sweep; free-function face of ``Tape.backward``."""
    tape.backward(loss, seed)


def _tape_of(*operands) -> Tape:
    for op in operands:
        if isinstance(op, Var):
            return op.tape
    raise ContractViolation("at least one operand must be a Var")


def _value(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def add(a, b) -> Var:
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    out = tape._record(av + bv, None)

    def bwd(g):
        if isinstance(a, Var):
            a._accum(_unbroadcast(g, av.shape))
        if isinstance(b, Var):
            b._accum(_unbroadcast(g, bv.shape))

    out._bwd = bwd
    return out


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    out = tape._record(av - bv, None)

    def bwd(g):
        if isinstance(a, Var):
            a._accum(_unbroadcast(g, av.shape))
        if isinstance(b, Var):
            b._accum(_unbroadcast(-g, bv.shape))

    out._bwd = bwd
    return out


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    out = tape._record(av * bv, None)

    def bwd(g):
        if isinstance(a, Var):
            a._accum(_unbroadcast(g * bv, av.shape))
        if isinstance(b, Var):
            b._accum(_unbroadcast(g * av, bv.shape))

    out._bwd = bwd
    return out


def neg(a: Var) -> Var:
    out = a.tape._record(-a.value, None)
    out._bwd = lambda g: a._accum(-g)
    return out


def matmul(a, b) -> Var:
    """Matrix product; operands of ndim >= 2, broadcasting over leading axes."""
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ContractViolation("matmul operands must have ndim >= 2")
    out = tape._record(av @ bv, None)

    def bwd(g):
        if isinstance(a, Var):
            a._accum(_unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape))
        if isinstance(b, Var):
            b._accum(_unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape))

    out._bwd = bwd
    return out


def _elementwise(a: Var, value: np.ndarray, local_grad: np.ndarray) -> Var:
    out = a.tape._record(value, None)
    out._bwd = lambda g: a._accum(g * local_grad)
    return out


def tanh(a: Var) -> Var:
    t = np.tanh(a.value)
    return _elementwise(a, t, 1.0 - t * t)


def sigmoid(a: Var) -> Var:
    s = sigmoid_values(a.value)
    return _elementwise(a, s, s * (1.0 - s))


def relu(a: Var) -> Var:
    v = a.value
    return _elementwise(a, np.maximum(v, 0.0), (v > 0).astype(np.float64))


def exp(a: Var) -> Var:
    e = np.exp(a.value)
    return _elementwise(a, e, e)


def log(a: Var) -> Var:
    return _elementwise(a, np.log(a.value), 1.0 / a.value)


def softplus(a: Var) -> Var:
    # d/dx log(1 + e^x) = sigmoid(x)
    return _elementwise(a, softplus_values(a.value), sigmoid_values(a.value))


def square(a: Var) -> Var:
    return _elementwise(a, a.value * a.value, 2.0 * a.value)


def reduce_sum(a: Var, axis=None, keepdims: bool = False) -> Var:
    out = a.tape._record(a.value.sum(axis=axis, keepdims=keepdims), None)

    def bwd(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.value.shape).copy())
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(gg, a.value.shape).copy())

    out._bwd = bwd
    return out


def reshape(a: Var, shape) -> Var:
    orig = a.value.shape
    out = a.tape._record(a.value.reshape(shape), None)
    out._bwd = lambda g: a._accum(g.reshape(orig))
    return out


def concat(parts: list, axis: int = -1) -> Var:
    tape = _tape_of(*parts)
    values = [_value(p) for p in parts]
    out = tape._record(np.concatenate(values, axis=axis), None)
    sizes = [v.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if isinstance(part, Var):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                part._accum(g[tuple(idx)])

    out._bwd = bwd
    return out


def hdh(v: Var, H: np.ndarray) -> Var:
    """Map a batch of diagonal covariances through H: v (B,m) -> H diag(v) H^T (B,n,n)."""
    H = np.asarray(H, dtype=np.float64)
    out = v.tape._record(np.einsum("ij,bj,kj->bik", H, v.value, H), None)
    out._bwd = lambda g: v._accum(np.einsum("bik,ij,kj->bj", g, H, H))
    return out


def _sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def _chol_inverse(A: np.ndarray):
    """Batched SPD inverse via Cholesky: A = L L^T, A^{-1} = L^{-T} L^{-1}."""
    try:
        chol = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("matrix is not positive definite") from exc
    inv_chol = np.linalg.inv(chol)
    return np.swapaxes(inv_chol, -1, -2) @ inv_chol, chol


def psd_inverse(A: Var) -> Var:
    """Inverse of a (batched) symmetric positive definite matrix.

    The input is symmetrized before factoring, and the gradient is
    symmetrized to match, so the primitive is exact under unconstrained
    perturbations of the input entries.
    """
    Y, _ = _chol_inverse(_sym(A.value))
    out = A.tape._record(Y, None)
    Yt = np.swapaxes(Y, -1, -2)
    out._bwd = lambda g: A._accum(_sym(-(Yt @ g @ Yt)))
    return out


def logdet_psd(A: Var) -> Var:
    """log det of a (batched) SPD matrix, from the Cholesky diagonal."""
    Ainv, chol = _chol_inverse(_sym(A.value))
    diag = np.diagonal(chol, axis1=-2, axis2=-1)
    out = A.tape._record(2.0 * np.sum(np.log(diag), axis=-1), None)
    out._bwd = lambda g: A._accum(_sym(g[..., None, None] * Ainv))
    return out


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


def finite_difference(f, arrays: list, h: float = 1e-6) -> list:
    """Full central-difference gradient of a scalar function of several arrays."""
    grads = []
    work = [np.array(a, dtype=np.float64) for a in arrays]
    for i, a in enumerate(work):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = f(work)
            flat[j] = orig - h
            fm = f(work)
            flat[j] = orig
            gflat[j] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_gradient_error(
    f,
    arrays: list,
    analytic: list,
    h: float = 1e-6,
    floor: float = 1e-6,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between analytic gradients and central differences.

    With ``samples`` set, checks that many randomly chosen coordinates per
    array instead of every coordinate.  The relative error of a coordinate is
    |a - d| / max(|a|, |d|, floor).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    work = [np.array(a, dtype=np.float64) for a in arrays]
    worst = 0.0
    for i, a in enumerate(work):
        flat = a.reshape(-1)
        if samples is None or flat.size <= samples:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=samples, replace=False)
        gflat = np.asarray(analytic[i]).reshape(-1)
        for j in coords:
            orig = flat[j]
            flat[j] = orig + h
            fp = f(work)
            flat[j] = orig - h
            fm = f(work)
            flat[j] = orig
            fd = (fp - fm) / (2.0 * h)
            err = abs(gflat[j] - fd) / max(abs(gflat[j]), abs(fd), floor)
            worst = max(worst, err)
    return worst
