"""Reverse-mode autodiff tape, parameter store, Adam, and a gradient checker.

The calibration networks in this package are tiny and structurally fixed,
so gradients come from a small tape over float64 numpy arrays instead of a
tensor framework.  The op vocabulary covers exactly what the losses need:
matmul, sparse-constant matmul, broadcasting add/sub/mul/div, ReLU,
LeakyReLU, softplus, row softmax, exp/log/pow, clamping, row/column
gathers, and sum/mean reductions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

__all__ = [
    "AdamState",
    "GradCheckReport",
    "NonFiniteLossError",
    "ParamStore",
    "Tensor",
    "adam_step",
    "clamp_min",
    "evaluate_loss",
    "finite_diff_check",
    "gather_rows",
    "leaky_relu",
    "leaky_relu_np",
    "log",
    "mean",
    "mean_nll",
    "pick",
    "power",
    "relu",
    "softmax_rows",
    "softmax_rows_np",
    "softplus",
    "softplus_np",
    "spmm",
    "tsum",
    "value_and_grad",
]


class NonFiniteLossError(ValueError):
    """A loss evaluation produced NaN/Inf; the message names the first bad op."""


# ---------------------------------------------------------------------------
# plain-numpy kernels shared by the tape and the inference paths


def softmax_rows_np(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softplus_np(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x), stable for large |x|
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


def leaky_relu_np(x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0.0, x, slope * x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# tape


class Tensor:
    """Node in the reverse-mode tape wrapping a float64 ndarray.

    ``_backward`` maps the output gradient to a tuple of parent gradients.
    Nodes are numbered at creation so the first non-finite intermediate of
    a bad loss can be named in the error message.
    """

    __slots__ = ("value", "grad", "needs_grad", "name", "serial", "_parents", "_backward")

    _counter = 0

    def __init__(self, value, parents=(), backward=None, needs_grad=None, name=""):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward
        if needs_grad is None:
            needs_grad = any(p.needs_grad for p in self._parents)
        self.needs_grad = needs_grad
        self.name = name or type(self).__name__
        Tensor._counter += 1
        self.serial = Tensor._counter

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor({self.name}#{self.serial}, shape={self.value.shape})"

    # operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, needs_grad=False, name="const")


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.value + b.value

    def backward(g):
        return _unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)

    return Tensor(out, (a, b), backward, name="add")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.value * b.value

    def backward(g):
        return (
            _unbroadcast(g * b.value, a.value.shape),
            _unbroadcast(g * a.value, b.value.shape),
        )

    return Tensor(out, (a, b), backward, name="mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.value / b.value

    def backward(g):
        return (
            _unbroadcast(g / b.value, a.value.shape),
            _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape),
        )

    return Tensor(out, (a, b), backward, name="div")


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    out = a.value @ b.value

    def backward(g):
        return g @ b.value.T, a.value.T @ g

    return Tensor(out, (a, b), backward, name="matmul")


def spmm(operator: sp.spmatrix, x) -> Tensor:
    """Constant sparse operator times a tape value."""
    x = _wrap(x)
    out = operator @ x.value
    op_t = operator.T.tocsr()

    def backward(g):
        return (op_t @ g,)

    return Tensor(out, (x,), backward, name="spmm")


def relu(x) -> Tensor:
    x = _wrap(x)
    mask = x.value > 0.0

    def backward(g):
        return (g * mask,)

    return Tensor(np.where(mask, x.value, 0.0), (x,), backward, name="relu")


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = _wrap(x)
    mask = x.value > 0.0

    def backward(g):
        return (g * np.where(mask, 1.0, slope),)

    return Tensor(np.where(mask, x.value, slope * x.value), (x,), backward, name="leaky_relu")


def softplus(x) -> Tensor:
    x = _wrap(x)

    def backward(g):
        return (g * expit(x.value),)

    return Tensor(softplus_np(x.value), (x,), backward, name="softplus")


def log(x) -> Tensor:
    x = _wrap(x)

    def backward(g):
        return (g / x.value,)

    return Tensor(np.log(x.value), (x,), backward, name="log")


def exp(x) -> Tensor:
    x = _wrap(x)
    out = np.exp(x.value)

    def backward(g):
        return (g * out,)

    return Tensor(out, (x,), backward, name="exp")


def power(x, exponent: float) -> Tensor:
    x = _wrap(x)
    e = float(exponent)

    def backward(g):
        return (g * e * x.value ** (e - 1.0),)

    return Tensor(x.value**e, (x,), backward, name="pow")


def clamp_min(x, floor: float) -> Tensor:
    x = _wrap(x)
    mask = x.value >= floor

    def backward(g):
        return (g * mask,)

    return Tensor(np.maximum(x.value, floor), (x,), backward, name="clamp_min")


def softmax_rows(x) -> Tensor:
    x = _wrap(x)
    s = softmax_rows_np(x.value)

    def backward(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - inner),)

    return Tensor(s, (x,), backward, name="softmax")


def tsum(x) -> Tensor:
    x = _wrap(x)

    def backward(g):
        return (np.full(x.value.shape, float(g)),)

    return Tensor(x.value.sum(), (x,), backward, name="sum")


def mean(x) -> Tensor:
    x = _wrap(x)
    n = x.value.size

    def backward(g):
        return (np.full(x.value.shape, float(g) / n),)

    return Tensor(x.value.mean(), (x,), backward, name="mean")


def gather_rows(x, idx) -> Tensor:
    """Select a subset of rows; gradients scatter-add back."""
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        gx = np.zeros(x.value.shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return Tensor(x.value[idx], (x,), backward, name="gather_rows")


def pick(x, cols) -> Tensor:
    """Per-row column pick: out[i] = x[i, cols[i]]."""
    x = _wrap(x)
    cols = np.asarray(cols, dtype=np.int64)
    n = x.value.shape[0]
    rows = np.arange(n)

    def backward(g):
        gx = np.zeros(x.value.shape)
        gx[rows, cols] = g
        return (gx,)

    return Tensor(x.value[rows, cols], (x,), backward, name="pick")


def mean_nll(probs: Tensor, labels) -> Tensor:
    """Mean negative log likelihood of distribution rows at the given labels."""
    return mean(-log(clamp_min(pick(probs, labels), 1e-12)))


def _backprop(out: Tensor) -> None:
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited or not node.needs_grad:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.needs_grad and id(p) not in visited:
                stack.append((p, False))
    out.grad = np.ones_like(out.value)
    for node in reversed(topo):
        if node._backward is None or node.grad is None:
            continue
        for parent, pg in zip(node._parents, node._backward(node.grad)):
            if not parent.needs_grad:
                continue
            parent.grad = pg if parent.grad is None else parent.grad + pg


def _first_nonfinite(out: Tensor) -> Tensor:
    nodes: list[Tensor] = []
    seen: set[int] = set()
    stack = [out]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)
    bad = [n for n in nodes if not np.all(np.isfinite(n.value))]
    return min(bad, key=lambda n: n.serial) if bad else out


# ---------------------------------------------------------------------------
# parameters and optimization


class ParamStore:
    """Named float64 parameter tensors with parallel gradient slots."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self.has_grads = False

    def add(self, name: str, value) -> None:
        if name in self._values:
            raise KeyError(f"parameter {name!r} already exists")
        arr = np.array(value, dtype=np.float64)
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)

    def names(self) -> list[str]:
        return list(self._values)

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def set(self, name: str, value) -> None:
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self._values[name].shape:
            raise ValueError(f"shape mismatch for {name!r}")
        self._values[name] = arr.copy()

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0
        self.has_grads = False

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self._values.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.set(k, v)

    def __contains__(self, name: str) -> bool:
        return name in self._values


def value_and_grad(loss_fn, params: ParamStore) -> float:
    """Evaluate ``loss_fn`` and fill analytic gradients into ``params``.

    ``loss_fn`` receives a dict mapping parameter names to tape leaves and
    must return a scalar Tensor built from this module's ops.  Raises
    :class:`NonFiniteLossError` naming the first non-finite intermediate.
    """
    params.zero_grads()
    leaves = {name: Tensor(params.value(name), needs_grad=True, name=name) for name in params.names()}
    out = loss_fn(leaves)
    out = _wrap(out)
    if out.value.size != 1:
        raise ValueError("loss must be scalar")
    if not np.all(np.isfinite(out.value)):
        bad = _first_nonfinite(out)
        raise NonFiniteLossError(f"non-finite loss; first bad intermediate: {bad.name}#{bad.serial}")
    _backprop(out)
    for name, leaf in leaves.items():
        if leaf.grad is not None:
            params._grads[name][...] = leaf.grad
    params.has_grads = True
    return float(out.value)


def evaluate_loss(loss_fn, params: ParamStore) -> float:
    """Evaluate the loss without touching gradient slots."""
    leaves = {name: Tensor(params.value(name), needs_grad=False, name=name) for name in params.names()}
    out = _wrap(loss_fn(leaves))
    return float(out.value)


@dataclass
class AdamState:
    """Adam moments plus hyperparameters (decoupled weight decay)."""

    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamStore, **kwargs) -> "AdamState":
        state = cls(**kwargs)
        for name in params.names():
            state.m[name] = np.zeros_like(params.value(name))
            state.v[name] = np.zeros_like(params.value(name))
        return state


def adam_step(params: ParamStore, state: AdamState) -> None:
    """One Adam update from the gradients currently stored in ``params``."""
    if not params.has_grads:
        raise RuntimeError("adam_step called before any gradient evaluation")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name in params.names():
        g = params.grad(name)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p = params.value(name)
        p -= state.lr * update
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p


# ---------------------------------------------------------------------------
# finite differences


@dataclass(frozen=True)
class GradCheckReport:
    passed: bool
    worst_rel_err: float
    worst_param: str
    worst_index: tuple
    tol: float
    step: float


def finite_diff_check(loss_fn, params: ParamStore, step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    value_and_grad(loss_fn, params)
    analytic = {name: params.grad(name).copy() for name in params.names()}
    worst = -1.0
    worst_param, worst_index = "", ()
    for name in params.names():
        p = params.value(name)
        it = np.nditer(p, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = p[idx]
            p[idx] = orig + step
            f_plus = evaluate_loss(loss_fn, params)
            p[idx] = orig - step
            f_minus = evaluate_loss(loss_fn, params)
            p[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = analytic[name][idx]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > worst:
                worst, worst_param, worst_index = rel, name, idx
            it.iternext()
    return GradCheckReport(worst <= tol, worst, worst_param, worst_index, tol, step)
