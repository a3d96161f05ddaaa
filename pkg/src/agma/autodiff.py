"""Reverse-mode automatic differentiation over numpy arrays.

A small tape: every operation produces a :class:`Tensor` that remembers its
parents and a closure computing vector-Jacobian products. ``Tensor.backward``
walks the graph in reverse topological order and accumulates gradients into
``.grad`` slots. Everything is float64; broadcasting follows numpy rules and
gradients are summed back to the original shapes.

Graph construction can be switched off with :func:`no_grad` for evaluation
paths that only need values.
"""

from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Context manager that disables graph construction inside its body."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A float64 ndarray with an optional gradient slot and tape record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp

    # -- introspection -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self):
        """A view of the same values, cut off from the tape."""
        return Tensor(self.data)

    # -- autodiff core -----------------------------------------------------

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed requires a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)

        # Iterative topological order over the subgraph that requires grad.
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad or pg is None:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        return mul(power(self, -1.0), other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp):
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _vjp=vjp)
    return Tensor(data)


# -- arithmetic --------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    sa, sb = a.data.shape, b.data.shape

    def vjp(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(out, (a, b), vjp)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    sa, sb = a.data.shape, b.data.shape
    da, db = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * db, sa), _unbroadcast(g * da, sb)

    return _make(out, (a, b), vjp)


def power(a, exponent):
    """Elementwise power with a constant exponent."""
    a = as_tensor(a)
    e = float(exponent)
    out = a.data ** e
    da = a.data

    def vjp(g):
        return (g * e * da ** (e - 1.0),)

    return _make(out, (a,), vjp)


def matmul(a, b):
    """numpy ``@`` semantics for ndim >= 2, including broadcast batch dims."""
    a, b = as_tensor(a), as_tensor(b)
    out = a.data @ b.data
    da, db = a.data, b.data
    sa, sb = da.shape, db.shape

    def vjp(g):
        ga = g @ db.swapaxes(-1, -2)
        gb = da.swapaxes(-1, -2) @ g
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return _make(out, (a, b), vjp)


# -- reductions ---------------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy() if np.ndim(g) == 0 or g.shape != shape else g,)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, shape).copy(),)

    return _make(out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# -- elementwise nonlinearities ----------------------------------------------


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _make(out, (a,), vjp)


def log(a):
    a = as_tensor(a)
    out = np.log(a.data)
    da = a.data

    def vjp(g):
        return (g / da,)

    return _make(out, (a,), vjp)


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / out,)

    return _make(out, (a,), vjp)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), vjp)


def sigmoid(a):
    a = as_tensor(a)
    # exp(-|x|) form is stable for both tails
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), vjp)


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0.0

    def vjp(g):
        return (g * mask,)

    return _make(out, (a,), vjp)


def softplus(a):
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    x = a.data

    def vjp(g):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))
        return (g * s,)

    return _make(out, (a,), vjp)


def maximum(a, floor):
    """Elementwise max with a constant; gradient passes only where a > floor."""
    a = as_tensor(a)
    floor = np.asarray(floor, dtype=np.float64)
    out = np.maximum(a.data, floor)
    mask = a.data > floor

    def vjp(g):
        return (g * mask,)

    return _make(out, (a,), vjp)


def neg_entropy(a):
    """Sum of a*(log a - 1) with the 0*log 0 = 0 convention."""
    a = as_tensor(a)
    d = a.data
    pos = d > 0.0
    out = np.sum(np.where(pos, d * (np.log(np.where(pos, d, 1.0)) - 1.0), 0.0))

    def vjp(g):
        return (g * np.where(pos, np.log(np.where(pos, d, 1.0)), 0.0),)

    return _make(out, (a,), vjp)


# -- shaping ------------------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    orig = a.data.shape

    def vjp(g):
        return (g.reshape(orig),)

    return _make(out, (a,), vjp)


def transpose(a, axes=None):
    a = as_tensor(a)
    out = a.data.transpose(axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)

    def vjp(g):
        return (g.transpose(inv),)

    return _make(out, (a,), vjp)


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)
    out = a.data.swapaxes(ax1, ax2)

    def vjp(g):
        return (g.swapaxes(ax1, ax2),)

    return _make(out, (a,), vjp)


def _is_advanced(key):
    if isinstance(key, (np.ndarray, list)):
        return True
    if isinstance(key, tuple):
        return any(isinstance(k, (np.ndarray, list)) for k in key)
    return False


def take(a, key):
    """Indexing/slicing; the gradient scatters back into zeros."""
    a = as_tensor(a)
    out = a.data[key]
    shape = a.data.shape
    advanced = _is_advanced(key)

    def vjp(g):
        full = np.zeros(shape, dtype=np.float64)
        if advanced:
            np.add.at(full, key, g)  # repeated indices must accumulate
        else:
            full[key] += g
        return (full,)

    return _make(out, (a,), vjp)


def take_along_axis(a, indices, axis):
    """Gather along an axis (argmin/argmax selection). One source element per
    output position, so the backward scatter never collides."""
    a = as_tensor(a)
    out = np.take_along_axis(a.data, indices, axis=axis)
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape, dtype=np.float64)
        np.put_along_axis(full, indices, g, axis=axis)
        return (full,)

    return _make(out, (a,), vjp)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), vjp)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        parts = np.split(g, len(tensors), axis=axis)
        return tuple(p.squeeze(axis) for p in parts)

    return _make(out, tuple(tensors), vjp)


# -- composites ---------------------------------------------------------------


def logsumexp(a, axis=-1, keepdims=False):
    """Stable log-sum-exp; the shift is treated as a constant, which leaves
    the gradient (a softmax) exact."""
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = add(a, -m)
    out = add(log(sum_(exp(shifted), axis=axis, keepdims=True)), m)
    if not keepdims:
        out = reshape(out, np.squeeze(out.data, axis=axis).shape)
    return out


def softmax(a, axis=-1):
    a = as_tensor(a)
    return exp(add(a, mul(logsumexp(a, axis=axis, keepdims=True), -1.0)))


def entmax15(a, axis=-1):
    """1.5-entmax: sparse simplex projection.

    Forward solves for the threshold tau with bisection (tolerance 1e-9,
    100 iterations); some outputs can be exactly zero. Backward uses the
    closed-form Jacobian-vector product with s = sqrt(p).
    """
    a = as_tensor(a)
    x = np.moveaxis(a.data, axis, -1)
    lead = x.shape[:-1]
    x2 = x.reshape(-1, x.shape[-1])

    u = 0.5 * x2
    lo = u.max(axis=-1, keepdims=True) - 1.0
    hi = u.max(axis=-1, keepdims=True)
    for _ in range(100):
        tau = 0.5 * (lo + hi)
        p = np.maximum(u - tau, 0.0) ** 2
        total = p.sum(axis=-1, keepdims=True)
        too_big = total > 1.0
        lo = np.where(too_big, tau, lo)
        hi = np.where(too_big, hi, tau)
        if np.all(hi - lo < 1e-9):
            break
    tau = 0.5 * (lo + hi)
    p = np.maximum(u - tau, 0.0) ** 2
    p /= p.sum(axis=-1, keepdims=True)

    out = np.moveaxis(p.reshape(*lead, x.shape[-1]), -1, axis)
    p_flat = p

    def vjp(g):
        gm = np.moveaxis(g, axis, -1).reshape(p_flat.shape)
        s = np.sqrt(p_flat)
        coeff = (gm * s).sum(axis=-1, keepdims=True) / s.sum(axis=-1, keepdims=True)
        gx = s * (gm - coeff)  # dp/dx = s_i (delta_ij - s_j / sum s), 0.5 input scale folded in
        return (np.moveaxis(gx.reshape(np.moveaxis(g, axis, -1).shape), -1, axis),)

    return _make(out, (a,), vjp)
