"""Small tape-based reverse-mode autodiff over float64 numpy arrays.

Only the handful of operations an MLP classifier and its attacks need are
provided. Operations record themselves on the innermost active :class:`Tape`
when at least one operand requires a gradient; outside a tape they only
compute values.

    >>> with Tape() as tape:
    ...     w = Tensor([2.0, 3.0], requires_grad=True)
    ...     x = Tensor([1.0, 1.0], requires_grad=True)
    ...     loss = dot(w, x)
    ...     tape.backward(loss)
    >>> x.grad
    array([2., 3.])
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DiffError(Exception):
    """Base class for autodiff errors."""


class ShapeError(DiffError, ValueError):
    pass


class DomainError(DiffError, ValueError):
    pass


class ContractError(DiffError, RuntimeError):
    pass


class NonFiniteError(DiffError, FloatingPointError):
    def __init__(self, op: str, index: tuple | None = None):
        where = f" at coordinate {index}" if index is not None else ""
        super().__init__(f"non-finite value produced by {op}{where}")
        self.op = op
        self.index = index


def _check_finite(values: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(values)))[0]
        raise NonFiniteError(op, tuple(int(i) for i in bad))


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("values", "requires_grad", "grad", "_node")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Entry:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of operations; one backward pass per recording."""

    entries: list[_Entry] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def record(self, kind, inputs, output, backward) -> None:
        output._node = len(self.entries)
        self.entries.append(_Entry(kind, tuple(inputs), output, backward))

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for entry in self.entries:
            for t in entry.inputs:
                if t.is_leaf and t.requires_grad:
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def zero_grad(self) -> None:
        """Clear leaf gradients and allow another backward pass."""
        for leaf in self.leaves():
            leaf.grad = None
        self.consumed = False

    def backward(self, loss: Tensor) -> None:
        if loss.values.size != 1 or loss.values.ndim != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise ContractError("tape already consumed; call zero_grad() before another backward")
        if loss._node is None or loss._node >= len(self.entries) or self.entries[loss._node].output is not loss:
            raise ContractError("loss was not recorded on this tape")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        for entry in reversed(self.entries[: loss._node + 1]):
            g_out = grads.pop(id(entry.output), None)
            if g_out is None:
                continue
            g_ins = entry.backward(g_out)
            for t, g in zip(entry.inputs, g_ins):
                if g is None or not t.requires_grad:
                    continue
                _check_finite(g, f"backward of {entry.kind}")
                if id(t) in grads:
                    grads[id(t)] = grads[id(t)] + g
                else:
                    grads[id(t)] = g
        for leaf in self.leaves():
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros_like(leaf.values)
            leaf.grad = g if leaf.grad is None else leaf.grad + g


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def _emit(kind: str, inputs: Sequence[Tensor], values: np.ndarray, backward) -> Tensor:
    _check_finite(values, kind)
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out._node = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    tapes = _stack()
    if out.requires_grad and tapes:
        tapes[-1].record(kind, inputs, out, backward)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- primitives -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D @ 2-D or 2-D @ 1-D operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim not in (1, 2):
        raise ShapeError(f"matmul expects 2-D @ 1-D/2-D, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def backward(g):
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return _emit("matmul", (a, b), av @ bv, backward)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.values.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    return _emit("transpose", (a,), a.values.T.copy(), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; a 1-D ``b`` broadcasts over the rows of a 2-D ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    if sa == sb:
        reduce_b = False
    elif len(sa) == 2 and len(sb) == 1 and sa[1] == sb[0]:
        reduce_b = True
    else:
        raise ShapeError(f"add cannot broadcast {sb} onto {sa}")

    def backward(g):
        return g, (g.sum(axis=0) if reduce_b else g)

    return _emit("add", (a, b), a.values + b.values, backward)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    mask = a.values > 0
    return _emit("relu", (a,), np.where(mask, a.values, 0.0), lambda g: (g * mask,))


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit("scale", (a,), a.values * c, lambda g: (g * c,))


def mean(a: Tensor) -> Tensor:
    """Mean over the batch (first) axis of a 1-D tensor, giving a scalar."""
    a = _as_tensor(a)
    if a.values.ndim != 1 or a.values.size == 0:
        raise ShapeError(f"mean expects a non-empty 1-D tensor, got {a.shape}")
    n = a.values.size
    return _emit("mean", (a,), np.asarray(a.values.mean()), lambda g: (np.full(n, g / n),))


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two 1-D tensors (kept for linear gradient checks)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot expects equal 1-D shapes, got {a.shape}, {b.shape}")
    av, bv = a.values, b.values
    return _emit("dot", (a, b), np.asarray(av @ bv), lambda g: (g * bv, g * av))


def log_softmax_values(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_values(z: np.ndarray) -> np.ndarray:
    shifted = np.exp(z - z.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise DomainError("labels must be integers")
        labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DomainError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-sample cross-entropy, shape (N,). Softmax uses max subtraction."""
    logits = _as_tensor(logits)
    if logits.values.ndim != 2:
        raise ShapeError(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.shape
    labels = _check_labels(labels, n, k)
    logp = log_softmax_values(logits.values)
    rows = np.arange(n)
    loss = -logp[rows, labels]

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * g[:, None],)

    return _emit("softmax_cross_entropy", (logits,), loss, backward)


def kl_divergence(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Per-sample KL(softmax(p) || softmax(q)), shape (N,)."""
    p_logits, q_logits = _as_tensor(p_logits), _as_tensor(q_logits)
    if p_logits.values.ndim != 2 or p_logits.shape != q_logits.shape:
        raise ShapeError(f"kl_divergence needs equal (N, K) shapes, got {p_logits.shape}, {q_logits.shape}")
    logp = log_softmax_values(p_logits.values)
    logq = log_softmax_values(q_logits.values)
    p, q = np.exp(logp), np.exp(logq)
    diff = logp - logq
    kl = (p * diff).sum(axis=1)

    def backward(g):
        # d/dp_logits: p * (diff - kl); d/dq_logits: q - p
        gp = p * (diff - kl[:, None])
        gq = q - p
        return gp * g[:, None], gq * g[:, None]

    return _emit("kl_divergence", (p_logits, q_logits), kl, backward)


def backward(loss: Tensor) -> None:
    """Run backward on the innermost active tape."""
    tapes = _stack()
    if not tapes:
        raise ContractError("backward() called with no active tape")
    tapes[-1].backward(loss)


# -- gradient checking --------------------------------------------------------


@dataclass
class CheckReport:
    max_rel_error: float
    passed: bool
    n_compared: int
    worst: tuple[str, tuple] | None = None
    non_comparable: list[tuple[str, tuple]] = field(default_factory=list)


def _relu_pattern(tape: Tape) -> np.ndarray:
    masks = [e.inputs[0].values.ravel() > 0 for e in tape.entries if e.kind == "relu"]
    return np.concatenate(masks) if masks else np.zeros(0, dtype=bool)


def _evaluate(fn, arrays: dict[str, np.ndarray], with_grad: bool = False):
    # always record, so the ReLU pattern is visible even when no gradient is wanted
    with Tape() as tape:
        tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        loss = fn(tensors)
        if with_grad:
            tape.backward(loss)
    return loss.item(), _relu_pattern(tape), tensors


def finite_difference_check(
    fn: Callable[[dict[str, Tensor]], Tensor],
    arrays: dict[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> CheckReport:
    """Compare autodiff gradients of ``fn`` with central differences.

    ``fn`` maps named tensors to a scalar loss. Every coordinate of every
    array is perturbed by ``+-h``; coordinates whose perturbation flips a ReLU
    activation are reported as non-comparable instead of counted. Relative
    error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if h <= 0 or tol <= 0:
        raise DomainError("h and tol must be positive")
    arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
    for name, v in arrays.items():
        if not np.all(np.isfinite(v)):
            idx = tuple(int(i) for i in np.argwhere(~np.isfinite(np.atleast_1d(v)))[0])
            raise NonFiniteError(f"input {name!r}", idx)
    _, base_pattern, tensors = _evaluate(fn, arrays, with_grad=True)
    analytic = {k: t.grad for k, t in tensors.items()}

    worst_err, worst_at, n = 0.0, None, 0
    skipped = []
    for name, base in arrays.items():
        for idx in np.ndindex(base.shape):
            shifted = dict(arrays)
            plus, minus = base.copy(), base.copy()
            plus[idx] += h
            minus[idx] -= h
            shifted[name] = plus
            f_plus, pat_plus, _ = _evaluate(fn, shifted)
            shifted[name] = minus
            f_minus, pat_minus, _ = _evaluate(fn, shifted)
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(f"finite difference of {name!r}", idx)
            if not (np.array_equal(pat_plus, base_pattern) and np.array_equal(pat_minus, base_pattern)):
                skipped.append((name, idx))
                continue
            numeric = (f_plus - f_minus) / (2 * h)
            a = float(analytic[name][idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            n += 1
            if err > worst_err or worst_at is None:
                worst_err, worst_at = err, (name, idx)
    return CheckReport(worst_err, worst_err < tol, n, worst_at, skipped)
