"""Minimal reverse-mode differentiation on dense float64 tensors.

A ``Tape`` records every differentiable op in execution order; ``backward``
zeroes all gradient buffers, seeds the scalar loss with 1.0, and replays the
records in exact reverse order. Tensors not attached to a tape are constants:
ops on them run as plain numpy with nothing recorded, which is the inference
fast path.

Broadcasting is deliberately narrow: binary ops accept equal shapes, or a
1-d vector against the last axis of a 2-d operand. Anything else raises
``DimensionError`` naming both shapes. Every op checks its result for
NaN/inf and raises ``NonFiniteError`` naming the op, so a blow-up is
localized instead of surfacing as a garbage loss.

A tape is single-threaded and not shareable; independent tapes may run in
parallel threads.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, NonFiniteError, UsageError, ValidationError

__all__ = [
    "Tensor",
    "Tape",
    "matmul",
    "add",
    "mul",
    "relu",
    "sigmoid",
    "tanh",
    "sum_all",
    "scale",
    "repeat_rows",
    "softmax",
    "softmax_cross_entropy",
    "grad_check",
    "GradCheckReport",
    "resolve_tape",
    "ensure_finite",
]


class Tensor:
    """Dense float64 value, optionally attached to a tape.

    ``data`` is the numpy payload (any rank, row-major). ``grad`` is a
    same-shaped buffer allocated when the tensor joins a tape, else None.
    """

    __slots__ = ("data", "grad", "tape")

    def __init__(self, values, tape: "Tape | None" = None):
        self.data = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.tape = None
        if tape is not None:
            tape.attach(self)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        taped = "taped" if self.tape is not None else "const"
        return f"Tensor(shape={self.data.shape}, {taped})"


class Tape:
    """Ordered record of executed ops plus the tensors that took part."""

    def __init__(self):
        self._records: list[tuple[str, Callable[[], None]]] = []
        self._tensors: list[Tensor] = []

    def attach(self, *tensors: Tensor) -> None:
        """Put tensors on this tape, allocating zero gradient buffers.

        Re-attaching a tensor from an older tape moves it here, which is how
        long-lived parameters join the fresh tape of each training step.
        """
        for t in tensors:
            if t.tape is self:
                continue
            t.tape = self
            t.grad = np.zeros_like(t.data)
            self._tensors.append(t)

    def record(self, name: str, backward: Callable[[], None]) -> None:
        self._records.append((name, backward))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(tensor) into every attached tensor's grad."""
        if loss.tape is not self:
            raise UsageError("backward target does not belong to this tape")
        if loss.data.shape != ():
            raise UsageError(
                f"backward target must be a scalar, got shape {loss.data.shape}"
            )
        for t in self._tensors:
            t.grad[...] = 0.0
        loss.grad[...] = 1.0
        for _, bw in reversed(self._records):
            bw()

    def __len__(self) -> int:
        return len(self._records)


def resolve_tape(*tensors: "Tensor | None") -> "Tape | None":
    """The single tape shared by the given tensors, or None if all are constants."""
    tape = None
    for t in tensors:
        if t is None or t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise UsageError("operands belong to different tapes")
    return tape


def ensure_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"op {op!r} produced a non-finite value")


def _result(op: str, data: np.ndarray, tape: "Tape | None") -> Tensor:
    ensure_finite(op, data)
    return Tensor(data, tape=tape)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. a is 2-d; b is 2-d (m,k)@(k,n) or 1-d (m,k)@(k,)."""
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim not in (1, 2) or ad.shape[1] != bd.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    tape = resolve_tape(a, b)
    out = _result("matmul", ad @ bd, tape)
    if tape is not None:

        def backward():
            g = out.grad
            if bd.ndim == 2:
                if a.tape is not None:
                    a.grad += g @ bd.T
                if b.tape is not None:
                    b.grad += ad.T @ g
            else:
                if a.tape is not None:
                    a.grad += np.outer(g, bd)
                if b.tape is not None:
                    b.grad += ad.T @ g

        tape.record("matmul", backward)
    return out


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return
    if a.data.ndim == 2 and b.data.ndim == 1 and sa[-1] == sb[0]:
        return
    if b.data.ndim == 2 and a.data.ndim == 1 and sb[-1] == sa[0]:
        return
    raise DimensionError(f"{op}: incompatible shapes {sa} and {sb}")


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over the broadcast leading axis when the operand was 1-d."""
    if grad.shape == shape:
        return grad
    return grad.sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; a 1-d operand broadcasts over the other's last axis."""
    _binary_shapes("add", a, b)
    tape = resolve_tape(a, b)
    out = _result("add", a.data + b.data, tape)
    if tape is not None:

        def backward():
            g = out.grad
            if a.tape is not None:
                a.grad += _reduce_to(g, a.data.shape)
            if b.tape is not None:
                b.grad += _reduce_to(g, b.data.shape)

        tape.record("add", backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; same broadcast rule as add."""
    _binary_shapes("mul", a, b)
    tape = resolve_tape(a, b)
    out = _result("mul", a.data * b.data, tape)
    if tape is not None:

        def backward():
            g = out.grad
            if a.tape is not None:
                a.grad += _reduce_to(g * b.data, a.data.shape)
            if b.tape is not None:
                b.grad += _reduce_to(g * a.data, b.data.shape)

        tape.record("mul", backward)
    return out


def relu(a: Tensor) -> Tensor:
    tape = resolve_tape(a)
    out = _result("relu", np.maximum(a.data, 0.0), tape)
    if tape is not None:

        def backward():
            if a.tape is not None:
                a.grad += out.grad * (a.data > 0.0)

        tape.record("relu", backward)
    return out


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # Split by sign so exp never overflows.
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    tape = resolve_tape(a)
    out = _result("sigmoid", s, tape)
    if tape is not None:

        def backward():
            if a.tape is not None:
                a.grad += out.grad * s * (1.0 - s)

        tape.record("sigmoid", backward)
    return out


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    tape = resolve_tape(a)
    out = _result("tanh", t, tape)
    if tape is not None:

        def backward():
            if a.tape is not None:
                a.grad += out.grad * (1.0 - t * t)

        tape.record("tanh", backward)
    return out


def sum_all(a: Tensor) -> Tensor:
    """Sum of every element, as a scalar tensor."""
    tape = resolve_tape(a)
    out = _result("sum_all", np.asarray(a.data.sum()), tape)
    if tape is not None:

        def backward():
            if a.tape is not None:
                a.grad += out.grad

        tape.record("sum_all", backward)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant."""
    c = float(c)
    tape = resolve_tape(a)
    out = _result("scale", a.data * c, tape)
    if tape is not None:

        def backward():
            if a.tape is not None:
                a.grad += out.grad * c

        tape.record("scale", backward)
    return out


def repeat_rows(a: Tensor, counts: np.ndarray) -> Tensor:
    """Repeat row i of a 2-d tensor counts[i] times, in order.

    The adjoint sums gradient rows back per source row, which is what makes
    per-utterance conditioning rows usable inside a packed multi-utterance
    graph.
    """
    if a.data.ndim != 2:
        raise DimensionError(f"repeat_rows: need a 2-d tensor, got {a.data.shape}")
    c = np.asarray(counts)
    if not np.issubdtype(c.dtype, np.integer) or c.ndim != 1 or c.shape[0] != a.data.shape[0]:
        raise DimensionError(
            f"repeat_rows: counts shape {c.shape} does not match {a.data.shape[0]} rows"
        )
    if c.size == 0 or c.min() < 1:
        raise ValidationError("repeat_rows: every count must be a positive integer")
    tape = resolve_tape(a)
    out = _result("repeat_rows", np.repeat(a.data, c, axis=0), tape)
    if tape is not None:
        offsets = np.concatenate(([0], np.cumsum(c[:-1])))

        def backward():
            if a.tape is not None:
                a.grad += np.add.reduceat(out.grad, offsets, axis=0)

        tape.record("repeat_rows", backward)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a (frames, classes) array, max-shifted for stability."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(
    logits: Tensor, labels: np.ndarray, weights: np.ndarray | None = None
) -> Tensor:
    """Mean per-frame cross entropy of (frames, classes) logits vs int labels.

    Uses the log-sum-exp form so extreme logits neither overflow nor
    underflow; ``[[1000, 0]]`` with label 0 gives exactly 0.0.

    ``weights`` replaces the 1/frames mean with an arbitrary per-frame
    weighting: loss = sum(weights * per_frame_ce). Callers packing several
    utterances into one logits block use it to recover a per-utterance mean.
    """
    z = logits.data
    if z.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be 2-d, got {z.shape}")
    y = np.asarray(labels)
    if not np.issubdtype(y.dtype, np.integer):
        raise ValidationError(f"labels must be integers, got dtype {y.dtype}")
    if y.ndim != 1 or y.shape[0] != z.shape[0]:
        raise DimensionError(
            f"softmax_cross_entropy: labels shape {y.shape} does not match logits {z.shape}"
        )
    if z.shape[0] == 0:
        raise ValidationError("softmax_cross_entropy needs at least one frame")
    if y.size and (y.min() < 0 or y.max() >= z.shape[1]):
        raise ValidationError(
            f"labels must lie in [0, {z.shape[1] - 1}], got range "
            f"[{y.min()}, {y.max()}]"
        )
    n = z.shape[0]
    w = None
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,):
            raise DimensionError(
                f"softmax_cross_entropy: weights shape {w.shape}, expected ({n},)"
            )
        ensure_finite("softmax_cross_entropy weights", w)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    picked = z[np.arange(n), y]
    per_frame = lse - picked
    loss_val = float(per_frame.mean() if w is None else (per_frame * w).sum())
    tape = resolve_tape(logits)
    out = _result("softmax_cross_entropy", np.asarray(loss_val), tape)
    if tape is not None:
        probs = softmax(z)

        def backward():
            if logits.tape is not None:
                d = probs.copy()
                d[np.arange(n), y] -= 1.0
                if w is None:
                    logits.grad += out.grad * d / n
                else:
                    logits.grad += out.grad * d * w[:, None]

        tape.record("softmax_cross_entropy", backward)
    return out


@dataclass
class GradCheckReport:
    """Outcome of an analytic-vs-central-difference comparison."""

    eps: float
    tol: float
    max_rel_err: float
    passed: bool
    per_param: list = field(default_factory=list)  # (name, max_rel_err)

    def __str__(self) -> str:
        lines = [
            f"grad check: max rel err {self.max_rel_err:.3e} "
            f"(eps={self.eps:g}, tol={self.tol:g}) -> "
            + ("PASS" if self.passed else "FAIL")
        ]
        for name, err in self.per_param:
            lines.append(f"  {name}: {err:.3e}")
        return "\n".join(lines)


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of the scalar ``f()`` against central differences.

    ``f`` must recompute its value from the current contents of ``params``
    each call. The analytic pass runs once on a fresh tape; the numeric pass
    perturbs every parameter element by +-eps with the params detached.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValidationError(f"eps must lie in [1e-7, 1e-3], got {eps:g}")
    params = list(params)
    if params and isinstance(params[0], tuple):  # (name, tensor) pairs
        if names is None:
            names = [n for n, _ in params]
        params = [t for _, t in params]
    if names is None:
        names = [f"param{i}" for i in range(len(params))]

    tape = Tape()
    tape.attach(*params)
    loss = f()
    if not np.isfinite(loss.data):
        raise NonFiniteError("grad check loss is non-finite")
    tape.backward(loss)
    analytic = [p.grad.copy() for p in params]

    for p in params:  # numeric passes run untaped
        p.tape = None
        p.grad = None

    per_param = []
    worst = 0.0
    for p, got, name in zip(params, analytic, names):
        flat = p.data.reshape(-1)
        err = 0.0
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = float(f().data)
            flat[i] = keep - eps
            lo = float(f().data)
            flat[i] = keep
            fd = (hi - lo) / (2.0 * eps)
            a = got.reshape(-1)[i]
            denom = max(abs(a), abs(fd), 1e-6)
            err = max(err, abs(a - fd) / denom)
        per_param.append((name, err))
        worst = max(worst, err)
    return GradCheckReport(
        eps=eps, tol=tol, max_rel_err=worst, passed=worst < tol, per_param=per_param
    )
