"""Small reverse-mode autodiff over numpy arrays.

A :class:`Tape` records every primitive as a :class:`Var` holding its value,
its parents and a vector-Jacobian closure.  Trainable quantities live in
:class:`Param` objects that outlive tapes; a fresh tape is built for every
optimization iteration and thrown away after :func:`backward`.

Everything on the optimization path is float64.
"""

from __future__ import annotations

import logging
from typing import Callable, Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

Vjp = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Param:
    """A trainable array plus its gradient and Adam moments."""

    def __init__(self, value, name: str = "", trainable: bool = True):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.moment1 = np.zeros_like(self.value)
        self.moment2 = np.zeros_like(self.value)
        self.steps = 0
        self.name = name
        self.trainable = trainable

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def append_rows(self, rows: np.ndarray) -> None:
        """Grow a 2-D param along axis 0; optimizer state for new rows starts at zero."""
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, *self.value.shape[1:])
        pad = np.zeros_like(rows)
        self.value = np.concatenate([self.value, rows])
        self.grad = np.concatenate([self.grad, pad])
        self.moment1 = np.concatenate([self.moment1, pad])
        self.moment2 = np.concatenate([self.moment2, pad])

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


class Var:
    __slots__ = ("value", "parents", "vjp", "tape", "index", "param", "requires_grad")

    def __init__(self, tape, value, parents=(), vjp=None, param=None, requires_grad=False):
        self.tape = tape
        self.value = value
        self.parents = tuple(parents)
        self.vjp = vjp
        self.param = param
        self.requires_grad = requires_grad
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __len__(self):
        return len(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        return f"Var(#{self.index}, shape={np.shape(self.value)}, grad={self.requires_grad})"


class Tape:
    """Append-only list of recorded nodes; parents always precede children."""

    def __init__(self, frozen: Iterable[Param] = ()):
        self.nodes: list[Var] = []
        self.frozen = {id(p) for p in frozen}
        self._leaves: dict[int, Var] = {}

    def const(self, value) -> Var:
        return Var(self, np.asarray(value, dtype=np.float64))

    def param(self, p: Param) -> Var:
        """Leaf for ``p``; one leaf per Param per tape."""
        leaf = self._leaves.get(id(p))
        if leaf is None or leaf.value is not p.value:
            leaf = Var(self, p.value, param=p, requires_grad=p.trainable and id(p) not in self.frozen)
            self._leaves[id(p)] = leaf
        return leaf

    def record(self, value, parents: Sequence[Var], vjp: Vjp) -> Var:
        """Record a primitive.  ``vjp(g)`` returns one gradient (or None) per parent."""
        req = any(p.requires_grad for p in parents)
        return Var(self, value, parents, vjp if req else None, requires_grad=req)

    def clear(self) -> None:
        """Drop every recorded node.  Vars point back at their tape, so the
        graph is a reference cycle; clearing frees its arrays right away
        instead of at the next full garbage collection."""
        self.nodes.clear()
        self._leaves.clear()

    def lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("Var belongs to a different tape")
            return x
        return self.const(x)


def backward(tape: Tape, output: Var) -> None:
    """Accumulate d(output)/d(param) into every Param reachable from ``output``."""
    if output.tape is not tape or output.index >= len(tape.nodes) or tape.nodes[output.index] is not output:
        raise ValueError("output is not recorded on this tape")
    if np.size(output.value) != 1:
        raise ValueError(f"backward needs a scalar output, got shape {np.shape(output.value)}")
    grads: dict[int, np.ndarray] = {output.index: np.ones_like(output.value)}
    for node in reversed(tape.nodes[: output.index + 1]):
        g = grads.pop(node.index, None)
        if g is None or not node.requires_grad:
            continue
        if node.param is not None:
            node.param.grad += g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + pg
            else:
                grads[parent.index] = pg


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b):
    tape = a.tape if isinstance(a, Var) else b.tape
    return tape, tape.lift(a), tape.lift(b)


# elementwise ---------------------------------------------------------------

def add(a, b) -> Var:
    tape, a, b = _pair(a, b)
    sa, sb = a.value.shape, b.value.shape
    return tape.record(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    tape, a, b = _pair(a, b)
    sa, sb = a.value.shape, b.value.shape
    return tape.record(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    tape, a, b = _pair(a, b)
    av, bv = a.value, b.value
    return tape.record(
        av * bv,
        (a, b),
        lambda g: (
            _unbroadcast(g * bv, av.shape) if a.requires_grad else None,
            _unbroadcast(g * av, bv.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Var:
    tape, a, b = _pair(a, b)
    av, bv = a.value, b.value
    out = av / bv
    return tape.record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / bv, av.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bv, bv.shape) if b.requires_grad else None,
        ),
    )


def neg(a: Var) -> Var:
    return a.tape.record(-a.value, (a,), lambda g: (-g,))


def square(a: Var) -> Var:
    v = a.value
    return a.tape.record(v * v, (a,), lambda g: (2.0 * v * g,))


def abs(a: Var) -> Var:  # noqa: A001
    v = a.value
    return a.tape.record(np.abs(v), (a,), lambda g: (np.sign(v) * g,))


def relu(a: Var) -> Var:
    v = a.value
    return a.tape.record(np.maximum(v, 0.0), (a,), lambda g: (g * (v > 0),))


_SIG_LO = np.finfo(np.float64).tiny
_SIG_HI = np.nextafter(1.0, 0.0)


def _sigmoid(x):
    # clipped so the result is strictly inside (0, 1) even where float64 saturates
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return np.clip(s, _SIG_LO, _SIG_HI)


def sigmoid(a: Var) -> Var:
    s = _sigmoid(a.value)
    return a.tape.record(s, (a,), lambda g: (g * s * (1.0 - s),))


# reductions and shape ------------------------------------------------------

def sum(a: Var, axis=None) -> Var:  # noqa: A001
    shape = a.value.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return a.tape.record(np.sum(a.value, axis=axis), (a,), vjp)


def mean(a: Var, axis=None) -> Var:
    n = a.value.size if axis is None else a.value.shape[axis]
    return sum(a, axis) * (1.0 / n)


def reshape(a: Var, shape) -> Var:
    old = a.value.shape
    return a.tape.record(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a: Var, key) -> Var:
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return a.tape.record(a.value[key], (a,), vjp)


def take_rows(a: Var, idx: np.ndarray) -> Var:
    """Gather rows ``a[idx]``; repeated indices accumulate in the backward pass."""
    idx = np.asarray(idx)
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return a.tape.record(a.value[idx], (a,), vjp)


def concat(vars_: Sequence[Var], axis: int = -1) -> Var:
    tape = vars_[0].tape
    vars_ = [tape.lift(v) for v in vars_]
    sizes = [v.value.shape[axis] for v in vars_]
    splits = np.cumsum(sizes)[:-1]
    return tape.record(
        np.concatenate([v.value for v in vars_], axis=axis),
        vars_,
        lambda g: np.split(g, splits, axis=axis),
    )


def segment_sum(a: Var, segments: np.ndarray, n_segments: int) -> Var:
    """Sum rows of ``a`` that share a segment id; output has ``n_segments`` rows."""
    segments = np.asarray(segments)
    out = np.zeros((n_segments,) + a.value.shape[1:])
    np.add.at(out, segments, a.value)
    return a.tape.record(out, (a,), lambda g: (g[segments],))


# linear algebra ------------------------------------------------------------

def matmul(a, b) -> Var:
    tape, a, b = _pair(a, b)
    av, bv = a.value, b.value
    if av.shape[-1] != bv.shape[0]:
        raise ValueError(f"matmul shape mismatch {av.shape} @ {bv.shape}")
    return tape.record(
        av @ bv,
        (a, b),
        lambda g: (
            g @ bv.T if a.requires_grad else None,
            np.outer(av, g) if b.requires_grad and av.ndim == 1 else (av.T @ g if b.requires_grad else None),
        ),
    )


def forward_linear(x, weight, bias) -> Var:
    """``weight @ x + bias`` for a vector ``x``, or row-wise for a batch ``x`` of shape (M, in).

    ``weight`` has shape (out, in).
    """
    tape = next(v.tape for v in (x, weight, bias) if isinstance(v, Var))
    x, weight, bias = tape.lift(x), tape.lift(weight), tape.lift(bias)
    xv, wv, bv = x.value, weight.value, bias.value
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[1] or bv.shape != (wv.shape[0],):
        raise ValueError(f"linear shape mismatch: x{xv.shape} W{wv.shape} b{bv.shape}")
    out = xv @ wv.T + bv

    def vjp(g):
        gx = g @ wv if x.requires_grad else None
        if weight.requires_grad:
            gw = np.outer(g, xv) if xv.ndim == 1 else g.T @ xv
        else:
            gw = None
        gb = (g if g.ndim == 1 else g.sum(axis=0)) if bias.requires_grad else None
        return gx, gw, gb

    return tape.record(out, (x, weight, bias), vjp)


# optimizer -----------------------------------------------------------------

def adam_step(
    params: Iterable[Param],
    lr: float = 1e-2,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> int:
    """One bias-corrected Adam update; grads are zeroed afterwards.

    Params whose gradient holds a non-finite entry are skipped; the number
    skipped is returned.
    """
    b1, b2 = betas
    skipped = 0
    for p in params:
        if not p.trainable:
            p.zero_grad()
            continue
        if not np.all(np.isfinite(p.grad)):
            skipped += 1
            p.zero_grad()
            continue
        p.steps += 1
        p.moment1 *= b1
        p.moment1 += (1.0 - b1) * p.grad
        p.moment2 *= b2
        p.moment2 += (1.0 - b2) * p.grad * p.grad
        m_hat = p.moment1 / (1.0 - b1**p.steps)
        v_hat = p.moment2 / (1.0 - b2**p.steps)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()
    if skipped:
        log.warning("adam_step skipped %d param(s) with non-finite gradients", skipped)
    return skipped
