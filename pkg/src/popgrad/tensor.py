"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` records primitive operations in execution order, which is
already a topological order. Parameters enter the tape through
:meth:`Tape.param` together with the slice of the flat parameter vector they
came from; :func:`backward` scatters their gradients back into a flat vector
of the same layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _kernels
from .errors import ConfigError, UsageError


@dataclass(frozen=True)
class _Node:
    op: str
    parents: tuple
    backward: Callable | None


class Var:
    """Handle to a value slot on a tape."""

    __slots__ = ("tape", "idx", "value")

    def __init__(self, tape, idx, value):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if not isinstance(other, Var) else mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise UsageError("division by a taped value is not supported")
        return mul(self, 1.0 / other)

    def __repr__(self):
        return f"Var(idx={self.idx}, shape={self.value.shape})"


def _as_array(value):
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ConfigError("non-finite values are not accepted as tape inputs")
    return arr


class Tape:
    def __init__(self, n_params=0):
        self.n_params = n_params
        self.nodes: list[_Node] = []
        self.values: list[np.ndarray] = []
        self.param_slots: dict[int, tuple[slice, tuple]] = {}
        self.root: Var | None = None

    def __len__(self):
        return len(self.nodes)

    def _push(self, op, value, parents=(), backward=None):
        self.nodes.append(_Node(op, tuple(p.idx for p in parents), backward))
        self.values.append(value)
        return Var(self, len(self.nodes) - 1, value)

    def constant(self, value):
        return self._push("const", _as_array(value))

    def param(self, value, slot):
        """Register ``value`` as trainable, living at ``flat[slot]``."""
        arr = _as_array(value)
        if slot.stop > self.n_params:
            self.n_params = slot.stop
        var = self._push("param", arr)
        self.param_slots[var.idx] = (slot, arr.shape)
        return var

    def ops(self):
        return [node.op for node in self.nodes]


def _lift(tape, x):
    if isinstance(x, Var):
        return x
    return tape.constant(x)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise UsageError("at least one operand must live on a tape")


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.shape, b.shape
    return tape._push(
        "add", a.value + b.value, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def mul(a, b):
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    return tape._push(
        "mul", av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def square(x):
    v = x.value
    return x.tape._push("square", v * v, (x,), lambda g: (2.0 * v * g,))


def abs_(x):
    v = x.value
    return x.tape._push("abs", np.abs(v), (x,), lambda g: (np.sign(v) * g,))


def sum_(x):
    shape = x.shape
    return x.tape._push("sum", np.asarray(x.value.sum()), (x,),
                        lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x):
    shape = x.shape
    n = x.value.size
    return x.tape._push("mean", np.asarray(x.value.mean()), (x,),
                        lambda g: (np.broadcast_to(g / n, shape).copy(),))


def cube(x):
    v = x.value
    return x.tape._push("cube", v * v * v, (x,), lambda g: (3.0 * v * v * g,))


def reshape(x, shape):
    old = x.shape
    return x.tape._push("reshape", x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flatten(x):
    return reshape(x, (x.shape[0], -1))


# ---------------------------------------------------------------------------
# network layers


def affine(x, w, b):
    """``x @ w + b`` with ``w`` stored fan-in first, shape (in, out)."""
    tape = _tape_of(x, w, b)
    x, w, b = _lift(tape, x), _lift(tape, w), _lift(tape, b)
    if x.shape[-1] != w.shape[0]:
        raise ConfigError(f"affine input width {x.shape[-1]} != weight fan-in {w.shape[0]}")
    xv, wv = x.value, w.value

    def back(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return tape._push("affine", xv @ wv + b.value, (x, w, b), back)


def conv2d(x, w, b):
    """3x3 (any odd k) convolution, stride 1, zero padding k//2 inside the network."""
    tape = _tape_of(x, w, b)
    x, w, b = _lift(tape, x), _lift(tape, w), _lift(tape, b)
    if x.value.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ConfigError(f"conv2d input shape {x.shape} incompatible with kernel {w.shape}")
    xv, wv = x.value, w.value

    def back(g):
        return _kernels.conv2d_backward(xv, wv, g)

    return tape._push("conv2d", _kernels.conv2d_forward(xv, wv, b.value), (x, w, b), back)


def relu(x):
    v = x.value
    mask = v > 0
    return x.tape._push("relu", np.where(mask, v, 0.0), (x,), lambda g: (g * mask,))


def maxpool2x2(x):
    out, arg = _kernels.maxpool2x2_forward(x.value)
    shape = x.shape
    return x.tape._push("maxpool2x2", out, (x,),
                        lambda g: (_kernels.maxpool2x2_backward(g, arg, shape),))


def dropout(x, p, rng):
    """Inverted dropout: kept units are scaled by 1/(1-p) at train time."""
    if p <= 0.0:
        return x
    keep = 1.0 - p
    scale = (rng.random(x.shape) < keep) / keep
    return x.tape._push("dropout", x.value * scale, (x,), lambda g: (g * scale,))


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch; ``labels`` are integer class ids."""
    z = logits.value
    labels = np.asarray(labels)
    n = z.shape[0]
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - logsum[:, None]
    loss = -logp[np.arange(n), labels].mean()
    probs = np.exp(logp)

    def back(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return logits.tape._push("softmax_xent", np.asarray(loss), (logits,), back)


# ---------------------------------------------------------------------------


def backward(tape, root=None):
    """Gradient of the scalar ``root`` (default ``tape.root``) w.r.t. all params.

    Returns a flat float64 vector of length ``tape.n_params``; parameters the
    root does not depend on get zeros.
    """
    root = tape.root if root is None else root
    if root is None:
        raise UsageError("tape has no root; pass one explicitly")
    if root.value.size != 1 or root.value.ndim != 0:
        raise UsageError(f"backward needs a scalar root, got shape {root.value.shape}")
    grads: list = [None] * len(tape.nodes)
    grads[root.idx] = np.asarray(1.0)
    flat = np.zeros(tape.n_params)
    for idx in range(root.idx, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        node = tape.nodes[idx]
        if node.op == "param":
            slot, shape = tape.param_slots[idx]
            flat[slot] += np.asarray(g).reshape(-1)
            continue
        if node.backward is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if grads[parent] is None:
                grads[parent] = pg
            else:
                grads[parent] = grads[parent] + pg
    return flat


def finite_diff_grad(loss_fn, params, h=1e-5):
    """Central differences ``(L(p + h e_i) - L(p - h e_i)) / 2h`` per coordinate."""
    if h <= 0:
        raise UsageError("finite-difference step must be positive")
    p = np.array(params, dtype=np.float64, copy=True)
    out = np.zeros_like(p)
    flat = p.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(loss_fn(p))
        flat[i] = orig - h
        down = float(loss_fn(p))
        flat[i] = orig
        out.reshape(-1)[i] = (up - down) / (2.0 * h)
    return out
