"""Minimal reverse-mode differentiation over numpy arrays.

Every function in this module accepts either plain arrays or :class:`Var`
objects. With plain inputs it simply computes the numpy result, so the same
model code runs as a fast forward-only pass or as a recorded pass on a
:class:`Tape`.

    >>> tape = Tape()
    >>> x = tape.leaf(3.0)
    >>> y = tape.leaf(2.0)
    >>> grads = tape.backward(x * y)
    >>> float(grads[x]), float(grads[y])
    (2.0, 3.0)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import sparse


class AutodiffError(RuntimeError):
    """Usage errors: non-scalar loss, repeated backward, mixed tapes."""


class Var:
    """A value recorded on a tape."""

    __slots__ = ("value", "tape", "id", "parents", "vjp", "name")
    __array_ufunc__ = None  # make ndarray <op> Var dispatch to Var's reflected ops

    def __init__(self, value, tape, parents=(), vjp=None, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.name = name
        self.id = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    @property
    def is_leaf(self):
        return self.vjp is None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.shape}, id={self.id})"

    def __len__(self):
        return len(self.value)

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __matmul__ = lambda a, b: matmul(a, b)
    __rmatmul__ = lambda a, b: matmul(b, a)
    __neg__ = lambda a: neg(a)
    __pow__ = lambda a, p: power(a, p)
    __getitem__ = lambda a, idx: getitem(a, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Append-only record of operations; supports exactly one backward pass."""

    def __init__(self):
        self.nodes: list[Var] = []
        self._consumed = False

    def leaf(self, value, name=None) -> Var:
        return Var(np.array(value, dtype=np.float64), self, name=name)

    def record(self, value, parents: Sequence, vjp: Callable, name=None) -> Var:
        """Register a custom node.

        ``vjp(g)`` must return one gradient (or None) per parent.
        """
        parents = tuple(p if isinstance(p, Var) else None for p in parents)
        for p in parents:
            if p is not None and p.tape is not self:
                raise AutodiffError("inputs recorded on a different tape")
        return Var(value, self, parents, vjp, name)

    def backward(self, loss: Var, retain: Sequence[Var] = ()) -> dict:
        """Propagate d(loss) to every leaf on the tape.

        Returns a dict keyed by Var; leaves unreachable from ``loss`` map to
        zeros. Intermediate nodes listed in ``retain`` keep their gradient too.
        """
        if self._consumed:
            raise AutodiffError("backward already ran on this tape; higher-order "
                                "or repeated backward is not supported")
        if not isinstance(loss, Var) or loss.tape is not self:
            raise AutodiffError("loss must be a Var recorded on this tape")
        if np.size(loss.value) != 1:
            raise AutodiffError(f"loss must be scalar, got shape {loss.shape}")
        self._consumed = True
        keep = {v.id for v in retain}
        grads: dict[int, np.ndarray] = {loss.id: np.ones(np.shape(loss.value))}
        for node in reversed(self.nodes[: loss.id + 1]):
            if node.vjp is None:
                continue
            g = grads.get(node.id) if node.id in keep else grads.pop(node.id, None)
            if g is None:
                continue
            pgs = node.vjp(g)
            for p, pg in zip(node.parents, pgs):
                if p is None or pg is None:
                    continue
                pg = np.asarray(pg, dtype=np.float64)
                if pg.shape != np.shape(p.value):
                    pg = _unbroadcast(pg, np.shape(p.value))
                if p.id in grads:
                    grads[p.id] = grads[p.id] + pg
                else:
                    grads[p.id] = pg
        out = {}
        for node in self.nodes:
            if node.vjp is None or node.id in keep:
                g = grads.get(node.id)
                out[node] = g if g is not None else np.zeros(np.shape(node.value))
        # drop the graph: nodes <-> tape is a reference cycle, and the vjp
        # closures hold every intermediate, so without this a training step's
        # memory waits for the cyclic collector
        for node in self.nodes:
            node.vjp = None
            node.parents = ()
        self.nodes = []
        return out


# ----------------------------------------------------------------------------
# helpers

def value(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise AutodiffError("inputs recorded on different tapes")
    return tape


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _op(fwd_value, inputs, vjp):
    tape = _tape_of(*inputs)
    if tape is None:
        return fwd_value
    return tape.record(fwd_value, inputs, vjp)


# ----------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    return _op(value(a) + value(b), (a, b), lambda g: (g, g))


def sub(a, b):
    return _op(value(a) - value(b), (a, b), lambda g: (g, -g))


def mul(a, b):
    av, bv = value(a), value(b)
    return _op(av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    return _op(out, (a, b), lambda g: (g / bv, -g * out / bv))


def neg(a):
    return _op(-value(a), (a,), lambda g: (-g,))


def power(a, p):
    if isinstance(p, Var):
        raise AutodiffError("only constant exponents are supported")
    av = value(a)
    return _op(av ** p, (a,), lambda g: (g * p * av ** (p - 1),))


def square(a):
    av = value(a)
    return _op(av * av, (a,), lambda g: (2.0 * g * av,))


def exp(a):
    out = np.exp(value(a))
    return _op(out, (a,), lambda g: (g * out,))


def log(a):
    av = value(a)
    return _op(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a):
    out = np.sqrt(value(a))
    return _op(out, (a,), lambda g: (0.5 * g / out,))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-value(a)))
    return _op(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    out = np.tanh(value(a))
    return _op(out, (a,), lambda g: (g * (1.0 - out * out),))


def silu(a):
    av = value(a)
    s = 1.0 / (1.0 + np.exp(-av))
    return _op(av * s, (a,), lambda g: (g * (s + av * s * (1.0 - s)),))


def abs_(a):
    av = value(a)
    return _op(np.abs(av), (a,), lambda g: (g * np.sign(av),))


def relu(a):
    av = value(a)
    return _op(np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0),))


def clip(a, lo, hi):
    """Clamp to [lo, hi]; the gradient is zero where the clamp is active."""
    av = value(a)
    inside = (av >= lo) & (av <= hi)
    return _op(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    return _op(np.where(cond, value(a), value(b)), (a, b),
               lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)))


# ----------------------------------------------------------------------------
# shape and reductions

def sum_(a, axis=None, keepdims=False):
    av = value(a)
    shape = np.shape(av)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)
    return _op(np.sum(av, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    av = value(a)
    n = np.size(av) if axis is None else np.prod([np.shape(av)[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) / float(n)


def reshape(a, shape):
    av = value(a)
    old = np.shape(av)
    return _op(np.reshape(av, shape), (a,), lambda g: (np.reshape(g, old),))


def transpose(a, axes=None):
    av = value(a)
    inv = None if axes is None else np.argsort(axes)
    return _op(np.transpose(av, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i, j):
    return _op(np.swapaxes(value(a), i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx):
    av = value(a)
    shape = np.shape(av)
    basic = _is_basic_index(idx)

    def vjp(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)
    return _op(av[idx], (a,), vjp)


def take_rows(a, index):
    """``a[index]`` along axis 0 with a bincount-based scatter adjoint."""
    av = value(a)
    index = np.asarray(index, dtype=np.int64)
    shape = np.shape(av)
    n = shape[0]

    def vjp(g):
        g2 = g.reshape(len(index), -1)
        out = np.zeros((n, g2.shape[1]))
        if len(index):
            cols = g2.shape[1]
            flat = (index[:, None] * cols + np.arange(cols)).ravel()
            out = np.bincount(flat, weights=g2.ravel(), minlength=n * cols).reshape(n, cols)
        return (out.reshape(shape),)
    return _op(av[index], (a,), vjp)


def stack(xs, axis=0):
    vals = [np.asarray(value(x), dtype=np.float64) for x in xs]
    out = np.stack(np.broadcast_arrays(*vals), axis=axis)
    shapes = [v.shape for v in vals]

    def vjp(g):
        parts = np.moveaxis(g, axis, 0)
        return tuple(_unbroadcast(p, s) for p, s in zip(parts, shapes))
    return _op(out, tuple(xs), vjp)


def concatenate(xs, axis=0):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    splits = np.cumsum([np.shape(v)[axis] for v in vals])[:-1]
    return _op(out, tuple(xs), lambda g: tuple(np.split(g, splits, axis=axis)))


# ----------------------------------------------------------------------------
# linear algebra and softmax

def matmul(a, b):
    av, bv = value(a), value(b)

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2) if np.ndim(bv) > 1 else np.multiply.outer(g, bv)
        gb = np.swapaxes(av, -1, -2) @ g if np.ndim(av) > 1 else np.multiply.outer(av, g)
        return ga, gb
    return _op(av @ bv, (a, b), vjp)


def softmax(a, axis=-1):
    av = value(a)
    z = av - np.max(av, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _op(out, (a,), vjp)


# ----------------------------------------------------------------------------
# bilinear gather

def bilinear_sample(grid, u, v):
    """Sample a ``(h, D1, D2)`` grid at normalized coords ``u, v`` in [0, 1].

    Texel ``i`` sits at ``i / (D - 1)`` (corner-aligned), so sampling is exact
    at texel centers. Returns ``(N, h)``.
    """
    gv = np.asarray(value(grid))
    uv_, vv_ = np.asarray(value(u), dtype=np.float64), np.asarray(value(v), dtype=np.float64)
    h, d1, d2 = gv.shape
    x = uv_ * (d1 - 1)
    y = vv_ * (d2 - 1)
    i0 = np.clip(np.floor(x).astype(np.int64), 0, d1 - 2)
    j0 = np.clip(np.floor(y).astype(np.int64), 0, d2 - 2)
    fx = x - i0
    fy = y - j0
    # texel-major copy so each corner gather reads contiguous feature rows
    flat = np.ascontiguousarray(gv.reshape(h, d1 * d2).T)
    k00 = i0 * d2 + j0
    k01 = k00 + 1
    k10 = k00 + d2
    k11 = k10 + 1
    g00, g01, g10, g11 = flat[k00], flat[k01], flat[k10], flat[k11]  # (N, h)
    w00 = (1 - fx) * (1 - fy)
    w01 = (1 - fx) * fy
    w10 = fx * (1 - fy)
    w11 = fx * fy
    out = g00 * w00[:, None] + g01 * w01[:, None] + g10 * w10[:, None] + g11 * w11[:, None]

    def vjp(g):
        ggrid = None
        if isinstance(grid, Var):
            n = len(k00)
            scatter = sparse.csr_matrix(
                (np.concatenate([w00, w01, w10, w11]),
                 (np.concatenate([k00, k01, k10, k11]), np.tile(np.arange(n), 4))),
                shape=(d1 * d2, n))
            ggrid = np.ascontiguousarray((scatter @ g).T).reshape(h, d1, d2)
        gu = gvv = None
        if isinstance(u, Var):
            dfx = (1 - fy)[:, None] * (g10 - g00) + fy[:, None] * (g11 - g01)
            gu = (g * dfx).sum(axis=1) * (d1 - 1)
        if isinstance(v, Var):
            dfy = (1 - fx)[:, None] * (g01 - g00) + fx[:, None] * (g11 - g10)
            gvv = (g * dfy).sum(axis=1) * (d2 - 1)
        return ggrid, gu, gvv
    return _op(out, (grid, u, v), vjp)


# ----------------------------------------------------------------------------
# finite-difference checking

class GradcheckError(RuntimeError):
    pass


@dataclass
class GradcheckReport:
    max_rel_err: float
    passed: bool
    tol: float
    worst: tuple = ()
    analytic: list = field(default_factory=list, repr=False)
    numeric: list = field(default_factory=list, repr=False)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"gradcheck {status}: max rel err {self.max_rel_err:.3e} (tol {self.tol:g}) at {self.worst}"


def relative_error(analytic, numeric, atol=1e-6):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), atol)


def gradcheck(fn, point, eps=1e-5, tol=1e-3, atol=1e-6, mask=None) -> GradcheckReport:
    """Compare tape gradients of a scalar ``fn`` against central differences.

    ``point`` is one array or a sequence of arrays (one per argument of
    ``fn``). ``mask`` optionally selects, per argument, which entries get a
    finite-difference probe; unprobed entries are not compared.
    Relative error per entry is ``|a - n| / max(|a|, |n|, atol)``.
    """
    single = not isinstance(point, (list, tuple))
    pts = [np.array(point if single else p, dtype=np.float64) for p in ([point] if single else point)]
    masks = [None] * len(pts) if mask is None else ([mask] if single else list(mask))

    tape = Tape()
    leaves = [tape.leaf(p) for p in pts]
    out = fn(*leaves)
    if not np.all(np.isfinite(value(out))):
        raise GradcheckError(f"non-finite function value at the check point: {value(out)}")
    grads = tape.backward(out)
    analytic = [grads[l] for l in leaves]

    def f(args):
        r = value(fn(*args))
        if not np.all(np.isfinite(r)):
            raise GradcheckError("non-finite function value during finite differencing")
        return float(np.asarray(r).reshape(()))

    numeric = []
    worst = (0.0, ())
    for k, p in enumerate(pts):
        num = np.zeros_like(p)
        probe = np.ones(p.shape, bool) if masks[k] is None else np.asarray(masks[k], bool)
        for idx in zip(*np.nonzero(probe)) if p.ndim else [()]:
            if p.ndim == 0 and not probe:
                continue
            args = [q.copy() for q in pts]
            args[k][idx] += eps
            fp = f(args)
            args[k][idx] -= 2 * eps
            fm = f(args)
            num[idx] = (fp - fm) / (2 * eps)
        numeric.append(num)
        err = relative_error(analytic[k], num, atol) * probe
        if err.size and err.max() > worst[0]:
            worst = (float(err.max()), (k,) + tuple(int(i) for i in np.unravel_index(np.argmax(err), err.shape)))
    return GradcheckReport(worst[0], worst[0] <= tol, tol, worst[1], analytic, numeric)
