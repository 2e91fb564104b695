"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations on tensors that require gradients are recorded on the active
:class:`GradTape` (entered as a context manager). Outside a tape, the same
operations run as plain forward computations, which is what inference and
finite-difference probes use.

The primitive set is closed: every differentiable operation below goes
through :func:`_record`, and its backward rule lives in ``BACKWARD`` so the
verification suite can check (and tests can deliberately corrupt) each rule
by name.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_local = threading.local()

# Number of L2-normalize rows that hit the degenerate-norm branch.
DEGENERATE_NORMALIZE_COUNT = 0

NORM_FLOOR = 1e-30


class ContractViolation(ValueError):
    """A precondition of an operation was not met by its caller."""


class NumericFault(FloatingPointError):
    """A NaN or Inf appeared while evaluating or differentiating a graph."""

    def __init__(self, primitive: str, phase: str):
        super().__init__(f"non-finite value in {phase} of primitive '{primitive}'")
        self.primitive = primitive
        self.phase = phase


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "tape", "node")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape: GradTape | None = None
        self.node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def item(self) -> float:
        return float(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return multiply(self, -1.0)

    def __sub__(self, other):
        return add(self, multiply(other, -1.0))

    def __rsub__(self, other):
        return add(multiply(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractViolation("division is only defined by a constant")
        return multiply(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: dict = field(default_factory=dict)


class GradTape:
    """Ordered log of primitive applications for one forward pass.

    Records are appended as operations run, so list order is already a
    topological order of the graph.
    """

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> "GradTape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)


def _tape_stack() -> list[GradTape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _record(op: str, inputs: Sequence[Tensor], out_values: np.ndarray, **saved) -> Tensor:
    out = Tensor(out_values)
    tape = active_tape()
    if tape is not None and any(t.tracked for t in inputs):
        out.tape = tape
        out.node = len(tape.records)
        tape.records.append(Record(op, tuple(inputs), out, saved))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("add", (a, b), a.values + b.values)


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("multiply", (a, b), a.values * b.values)


def matmul(a, b, transpose_b: bool = False) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractViolation(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    rhs = b.values.T if transpose_b else b.values
    if a.shape[1] != rhs.shape[0]:
        raise ContractViolation(f"matmul shape mismatch {a.shape} @ {rhs.shape}")
    return _record("matmul", (a, b), a.values @ rhs, transpose_b=transpose_b)


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        return _record("exp", (x,), np.exp(x.values))


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        return _record("log", (x,), np.log(x.values))


def relu(x) -> Tensor:
    x = as_tensor(x)
    return _record("relu", (x,), np.maximum(x.values, 0.0))


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    return _record("sum", (x,), x.values.sum(axis=axis, keepdims=keepdims), axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    return _record("mean", (x,), x.values.mean(axis=axis, keepdims=keepdims), axis=axis, keepdims=keepdims)


def max(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    return _record("max", (x,), x.values.max(axis=axis, keepdims=keepdims), axis=axis, keepdims=keepdims)


def _masked_shift(values: np.ndarray, axis: int, where: np.ndarray | None):
    if where is None:
        return values - values.max(axis=axis, keepdims=True), None
    masked = np.where(where, values, -np.inf)
    row_max = masked.max(axis=axis, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    return np.where(where, values - row_max, -np.inf), where


def softmax(x, axis: int = -1, where=None) -> Tensor:
    """Row-max-shifted softmax; entries outside ``where`` are excluded and output 0."""
    x = as_tensor(x)
    where = None if where is None else np.broadcast_to(np.asarray(where, dtype=bool), x.shape)
    shifted, where = _masked_shift(x.values, axis, where)
    e = np.exp(shifted)
    denom = e.sum(axis=axis, keepdims=True)
    out = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    return _record("softmax", (x,), out, axis=axis)


def log_softmax(x, axis: int = -1, where=None) -> Tensor:
    """Stable log-softmax via log-sum-exp; entries outside ``where`` output 0."""
    x = as_tensor(x)
    where = None if where is None else np.broadcast_to(np.asarray(where, dtype=bool), x.shape)
    shifted, where = _masked_shift(x.values, axis, where)
    e = np.exp(shifted)
    denom = e.sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        lse = np.log(denom)
        out = shifted - lse
    probs = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)
    if where is not None:
        out = np.where(where, out, 0.0)
    return _record("log_softmax", (x,), out, axis=axis, probs=probs, where=where)


def logsumexp(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    row_max = x.values.max(axis=axis, keepdims=True)
    e = np.exp(x.values - row_max)
    denom = e.sum(axis=axis, keepdims=True)
    out = (np.log(denom) + row_max).squeeze(axis)
    return _record("logsumexp", (x,), out, axis=axis, probs=e / denom)


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Scale slices along ``axis`` to unit Euclidean norm.

    Slices with norm below 1e-30 map to zero with zero gradient and are
    counted in ``DEGENERATE_NORMALIZE_COUNT``.
    """
    global DEGENERATE_NORMALIZE_COUNT
    x = as_tensor(x)
    norm = np.sqrt((x.values * x.values).sum(axis=axis, keepdims=True))
    degenerate = norm < NORM_FLOOR
    if degenerate.any():
        DEGENERATE_NORMALIZE_COUNT += int(degenerate.sum())
        logger.warning("l2_normalize: %d degenerate slice(s)", int(degenerate.sum()))
    safe = np.where(degenerate, 1.0, norm)
    out = np.where(degenerate, 0.0, x.values / safe)
    return _record("l2_normalize", (x,), out, axis=axis, norm=safe, degenerate=degenerate)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    return _record("concat", tensors, out, axis=axis, sizes=sizes)


def index_select(x, indices, axis: int = 0) -> Tensor:
    x = as_tensor(x)
    indices = np.asarray(indices, dtype=np.intp)
    return _record("index_select", (x,), np.take(x.values, indices, axis=axis), axis=axis, indices=indices)


def mask_apply(x, mask) -> Tensor:
    """Elementwise product with a constant (non-differentiable) mask or weight array."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=np.float64)
    return _record("mask_apply", (x,), x.values * mask, mask=mask)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _record("reshape", (x,), x.values.reshape(shape))


# ------------------------------------------------------------ backward rules


def _expand_reduced(g, rec: Record):
    axis, keepdims = rec.saved["axis"], rec.saved["keepdims"]
    shape = rec.inputs[0].shape
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def _bw_add(g, rec):
    a, b = rec.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _bw_multiply(g, rec):
    a, b = rec.inputs
    return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)


def _bw_matmul(g, rec):
    a, b = rec.inputs
    if rec.saved["transpose_b"]:
        return g @ b.values, g.T @ a.values
    return g @ b.values.T, a.values.T @ g


def _bw_exp(g, rec):
    return (g * rec.output.values,)


def _bw_log(g, rec):
    return (g / rec.inputs[0].values,)


def _bw_relu(g, rec):
    return (g * (rec.inputs[0].values > 0),)


def _bw_sum(g, rec):
    return (np.array(_expand_reduced(g, rec)),)


def _bw_mean(g, rec):
    x = rec.inputs[0]
    count = x.values.size // np.maximum(rec.output.values.size, 1)
    return (np.array(_expand_reduced(g, rec)) / count,)


def _bw_max(g, rec):
    x = rec.inputs[0]
    axis = rec.saved["axis"]
    m = rec.output.values
    if axis is not None and not rec.saved["keepdims"]:
        m = np.expand_dims(m, axis)
    hit = (x.values == m).astype(np.float64)
    hit /= hit.sum(axis=axis, keepdims=True)
    return (_expand_reduced(g, rec) * hit,)


def _bw_softmax(g, rec):
    s = rec.output.values
    axis = rec.saved["axis"]
    return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)


def _bw_log_softmax(g, rec):
    axis, probs, where = rec.saved["axis"], rec.saved["probs"], rec.saved["where"]
    if where is not None:
        g = np.where(where, g, 0.0)
    return (g - probs * g.sum(axis=axis, keepdims=True),)


def _bw_logsumexp(g, rec):
    return (np.expand_dims(g, rec.saved["axis"]) * rec.saved["probs"],)


def _bw_l2_normalize(g, rec):
    y = rec.output.values
    axis, norm = rec.saved["axis"], rec.saved["norm"]
    gx = (g - y * (g * y).sum(axis=axis, keepdims=True)) / norm
    return (np.where(rec.saved["degenerate"], 0.0, gx),)


def _bw_concat(g, rec):
    splits = np.cumsum(rec.saved["sizes"])[:-1]
    return tuple(np.split(g, splits, axis=rec.saved["axis"]))


def _bw_index_select(g, rec):
    x = rec.inputs[0]
    axis, idx = rec.saved["axis"], rec.saved["indices"]
    gx = np.zeros_like(x.values)
    moved = np.moveaxis(gx, axis, 0)
    np.add.at(moved, idx, np.moveaxis(g, axis, 0))
    return (gx,)


def _bw_mask_apply(g, rec):
    return (g * rec.saved["mask"],)


def _bw_reshape(g, rec):
    return (g.reshape(rec.inputs[0].shape),)


BACKWARD: dict[str, Callable] = {
    "add": _bw_add,
    "multiply": _bw_multiply,
    "matmul": _bw_matmul,
    "exp": _bw_exp,
    "log": _bw_log,
    "relu": _bw_relu,
    "sum": _bw_sum,
    "mean": _bw_mean,
    "max": _bw_max,
    "softmax": _bw_softmax,
    "log_softmax": _bw_log_softmax,
    "logsumexp": _bw_logsumexp,
    "l2_normalize": _bw_l2_normalize,
    "concat": _bw_concat,
    "index_select": _bw_index_select,
    "mask_apply": _bw_mask_apply,
    "reshape": _bw_reshape,
}


# ------------------------------------------------------------------- driver


def eval_with_grad(root: Tensor, parameters: Sequence[Tensor]) -> tuple[float, list[np.ndarray]]:
    """Return the scalar value of ``root`` and d(root)/d(p) for each parameter.

    Parameters the root does not depend on receive zero gradients.
    """
    if root.values.size != 1:
        raise ContractViolation(f"gradient root must be scalar, got shape {root.shape}")
    tape = root.tape
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.values)}
    if tape is not None:
        records = tape.records[: root.node + 1]
        for rec in records:
            if not np.all(np.isfinite(rec.output.values)):
                raise NumericFault(rec.op, "forward")
        for rec in reversed(records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            input_grads = BACKWARD[rec.op](g, rec)
            for inp, gi in zip(rec.inputs, input_grads):
                if not inp.tracked:
                    continue
                if not np.all(np.isfinite(gi)):
                    raise NumericFault(rec.op, "backward")
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = np.array(gi, dtype=np.float64)
    elif not np.all(np.isfinite(root.values)):
        raise NumericFault("input", "forward")
    out = []
    for p in parameters:
        g = grads.get(id(p))
        out.append(np.zeros_like(p.values) if g is None else g.reshape(p.shape))
    return float(root.values), out


def value_and_grad(fn: Callable[..., Tensor], parameters: Sequence[Tensor]):
    """Evaluate ``fn(*parameters)`` on a fresh tape and differentiate it."""
    with GradTape():
        root = fn(*parameters)
    return eval_with_grad(root, parameters)


def finite_diff_check(
    fn: Callable[..., Tensor],
    point: Sequence[Tensor],
    epsilon: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error for each coordinate is ``|g_a - g_fd| / max(1, |g_fd|)``. With
    ``max_coords`` set, a random subset of coordinates per tensor is probed.
    """
    params = [Tensor(p.values.copy(), requires_grad=True) for p in point]
    _, analytic = value_and_grad(fn, params)
    worst = 0.0
    for k, p in enumerate(params):
        flat = p.values.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + epsilon
            hi = fn(*params).values
            flat[c] = orig - epsilon
            lo = fn(*params).values
            flat[c] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericFault("finite_diff_check", "perturbation")
            fd = float(hi - lo) / (2 * epsilon)
            err = abs(analytic[k].reshape(-1)[c] - fd) / np.maximum(1.0, abs(fd))
            worst = np.maximum(worst, err)
    return float(worst)


# ---------------------------------------------------------------- optimizer


@dataclass
class SgdState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.lr < 0:
            raise ContractViolation("learning rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractViolation("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ContractViolation("weight decay must be nonnegative")


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: SgdState) -> None:
    """In-place heavy-ball update: v = mu*v + g + wd*p; p -= lr*v."""
    if len(params) != len(grads):
        raise ContractViolation("params and grads differ in length")
    if not state.velocity:
        state.velocity = [np.zeros_like(p.values) for p in params]
    for p, g, v in zip(params, grads, state.velocity):
        if p.shape != np.shape(g) or p.shape != v.shape:
            raise ContractViolation(f"shape mismatch: param {p.shape}, grad {np.shape(g)}, velocity {v.shape}")
        v *= state.momentum
        v += g
        if state.weight_decay:
            v += state.weight_decay * p.values
        p.values -= state.lr * v
