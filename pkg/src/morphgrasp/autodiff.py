"""Dense 2-D tensors with a reverse-mode tape.

Ops only record while a :class:`Tape` is active::

    with Tape() as tape:
        y = tanh(matmul(x, w))
        loss = sum_all(y)
    grads = tape.backward(loss, {"w": w})

Outside a tape every op is a plain numpy evaluation, which is what rollouts use.
Broadcasting is limited to adding/multiplying a ``(1, c)`` row against ``(r, c)``.
"""

import logging
import threading
from contextlib import contextmanager

import numpy as np
import scipy.sparse as sp

from .errors import NonFiniteError, NotScalarLossError, ShapeMismatchError

log = logging.getLogger(__name__)
_local = threading.local()


def _active():
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    def numpy(self):
        return self.data

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.records = []
        self.diagnostics = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, out, inputs, vjp):
        self.records.append((out, inputs, vjp))

    def backward(self, loss, params=None):
        """Gradients of scalar ``loss``.

        With ``params`` (a name -> Tensor mapping) returns name -> ndarray, using zeros
        for parameters the loss does not reach and noting them in ``diagnostics``.
        Without it, leaf tensors that require grad get their ``.grad`` filled.
        """
        if loss.data.size != 1:
            raise NotScalarLossError(f"loss must be scalar, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        if params is None:
            produced = {id(out) for out, _, _ in self.records}
            for _, inputs, _ in self.records:
                for inp in inputs:
                    if inp.requires_grad and id(inp) not in produced and id(inp) in grads:
                        inp.grad = grads[id(inp)]
            if id(loss) in grads and not any(o is loss for o, _, _ in self.records):
                loss.grad = grads[id(loss)]
            return grads
        out = {}
        for name, p in params.items():
            g = grads.get(id(p))
            if g is None:
                self.diagnostics.append(f"DisconnectedParameter: {name}")
                log.debug("parameter %s not reached by loss", name)
                g = np.zeros_like(p.data)
            out[name] = g
        return out


def _make(value, inputs, vjp):
    tape = _active()
    needs = any(i.requires_grad for i in inputs)
    out = Tensor(value, requires_grad=needs and tape is not None)
    if tape is not None and needs:
        tape.record(out, inputs, vjp)
    return out


def _broadcast_check(op, a, b):
    """True when ``b`` is a (1, c) row added across the rows of ``a``."""
    if a.shape == b.shape:
        return False
    if a.ndim == 2 and b.ndim == 2 and b.shape[0] == 1 and b.shape[1] == a.shape[1]:
        return True
    raise ShapeMismatchError(op, a.shape, b.shape)


def _unbroadcast(g, shape, mode):
    if mode:
        return g.sum(axis=0, keepdims=True)
    return g


# -- core ops ---------------------------------------------------------------


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    A, B = a.data, b.data
    return _make(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g))


def spmm(A, x):
    """Constant (sparse or dense) matrix times a tensor; no gradient flows into ``A``."""
    x = _lift(x)
    if A.shape[1] != x.shape[0]:
        raise ShapeMismatchError("spmm", A.shape, x.shape)
    At = A.T
    value = A @ x.data
    return _make(np.asarray(value), (x,), lambda g: (np.asarray(At @ g),))


def add(a, b):
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape and a.data.ndim == 2 and b.data.ndim == 2 and a.shape[0] == 1 and b.shape[0] > 1:
        a, b = b, a
    mode = _broadcast_check("add", a.data, b.data)
    return _make(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, b.shape, mode)))


def sub(a, b):
    a, b = _lift(a), _lift(b)
    mode = _broadcast_check("sub", a.data, b.data)
    return _make(a.data - b.data, (a, b), lambda g: (g, -_unbroadcast(g, b.shape, mode)))


def mul(a, b):
    """Elementwise product; ``b`` may be a (1, c) row."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape and a.data.ndim == 2 and b.data.ndim == 2 and a.shape[0] == 1 and b.shape[0] > 1:
        a, b = b, a
    mode = _broadcast_check("mul", a.data, b.data)
    A, B = a.data, b.data
    return _make(A * B, (a, b), lambda g: (g * B, _unbroadcast(g * A, b.shape, mode)))


def scale(x, c):
    x = _lift(x)
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def add_scalar(x, c):
    x = _lift(x)
    return _make(x.data + float(c), (x,), lambda g: (g,))


def concat_cols(tensors):
    tensors = [_lift(t) for t in tensors]
    rows = {t.shape[0] for t in tensors}
    if len(rows) != 1 or any(t.data.ndim != 2 for t in tensors):
        raise ShapeMismatchError("concat_cols", *(t.shape for t in tensors))
    widths = np.cumsum([0] + [t.shape[1] for t in tensors])
    value = np.concatenate([t.data for t in tensors], axis=1)
    return _make(value, tuple(tensors),
                 lambda g: tuple(g[:, widths[i]:widths[i + 1]] for i in range(len(tensors))))


def relu(x):
    x = _lift(x)
    on = x.data > 0
    _note_kinks(x.data)
    return _make(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def leaky_relu(x, slope=0.01):
    x = _lift(x)
    factor = np.where(x.data > 0, 1.0, slope)
    _note_kinks(x.data)
    return _make(x.data * factor, (x,), lambda g: (g * factor,))


def tanh(x):
    x = _lift(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def exp(x):
    x = _lift(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def square(x):
    x = _lift(x)
    X = x.data
    return _make(X * X, (x,), lambda g: (2.0 * g * X,))


def clip(x, lo, hi):
    """Clamp with zero gradient outside ``[lo, hi]``."""
    x = _lift(x)
    inside = (x.data >= lo) & (x.data <= hi)
    _note_kinks(x.data - lo)
    _note_kinks(hi - x.data)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def minimum(a, b):
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise ShapeMismatchError("minimum", a.shape, b.shape)
    pick_a = a.data <= b.data
    _note_kinks(b.data - a.data)
    return _make(np.where(pick_a, a.data, b.data), (a, b), lambda g: (g * pick_a, g * ~pick_a))


def layernorm(x, gain=None, bias=None, eps=1e-5):
    """Row-wise normalization to zero mean / unit variance, then ``gain * z + bias``."""
    x = _lift(x)
    X = x.data
    if X.ndim != 2:
        raise ShapeMismatchError("layernorm", X.shape)
    mu = X.mean(axis=1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    z = xc * inv
    n = X.shape[1]

    def norm_vjp(gz):
        return (inv * (gz - gz.mean(axis=1, keepdims=True) - z * (gz * z).mean(axis=1, keepdims=True)),)

    zt = _make(z, (x,), norm_vjp)
    if gain is not None:
        zt = mul(zt, gain)
    if bias is not None:
        zt = add(zt, bias)
    return zt


def row_select(x, idx):
    x = _lift(x)
    idx = np.asarray(idx, dtype=int)
    rows = x.shape[0]

    def vjp(g):
        out = np.zeros((rows,) + g.shape[1:])
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), vjp)


def sum_all(x):
    x = _lift(x)
    shape = x.shape
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_rows(x):
    """Per-row sum, shape (r, 1)."""
    x = _lift(x)
    shape = x.shape
    return _make(x.data.sum(axis=1, keepdims=True), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x):
    x = _lift(x)
    shape, n = x.shape, x.data.size
    return _make(np.array(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def check_finite(x, where="tensor"):
    x = _lift(x)
    if not np.all(np.isfinite(x.data)):
        raise NonFiniteError(f"non-finite entries in {where}")
    return x


# -- kink tracking for finite-difference checks -----------------------------


def _note_kinks(values):
    rec = getattr(_local, "kinks", None)
    if rec is not None:
        rec.append(values > 0)


@contextmanager
def kink_pattern():
    """Collect the on/off pattern of every piecewise-linear activation evaluated inside."""
    prev = getattr(_local, "kinks", None)
    _local.kinks = pattern = []
    try:
        yield pattern
    finally:
        _local.kinks = prev


def _same_pattern(a, b):
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def resolvable_floor(value, h):
    """Smallest gradient that central differences at step ``h`` resolve to ~1e-6 relative.

    A deep forward pass carries rounding noise of roughly 1e2 * eps * |f| per
    evaluation, so the difference quotient is uncertain by ~1e2 * eps * |f| / h.
    """
    return 1e8 * np.finfo(float).eps * max(abs(float(value)), 1.0) / h


def grad_check(f, x, h=1e-6, coords=None, rng=None, skip_kinks=True, resolvable_only=False):
    """Worst relative error between tape gradients and central differences.

    ``f`` maps a Tensor to a scalar Tensor. ``coords`` limits the check to that many
    randomly chosen coordinates. Coordinates whose +/- perturbations flip the on/off
    pattern of a piecewise-linear op are skipped (the function is not differentiable
    there). With ``resolvable_only`` coordinates are drawn only among those whose
    analytic gradient exceeds :func:`resolvable_floor`; below it rounding in ``f``
    dominates the difference quotient.
    """
    x = Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=float), requires_grad=True)
    with Tape() as tape:
        y = f(x)
    grads = tape.backward(y, {"x": x})["x"]
    flat = x.data.reshape(-1)
    gflat = grads.reshape(-1)
    idx = np.arange(flat.size)
    if resolvable_only:
        idx = idx[np.abs(gflat) >= resolvable_floor(y.data, h)]
    if coords is not None and coords < idx.size:
        rng = rng if rng is not None else np.random.default_rng(0)
        idx = rng.choice(idx, size=coords, replace=False)
    worst = 0.0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        with kink_pattern() as kp:
            fp = float(f(Tensor(x.data)).data)
        flat[i] = orig - h
        with kink_pattern() as km:
            fm = float(f(Tensor(x.data)).data)
        flat[i] = orig
        if skip_kinks and not _same_pattern(kp, km):
            continue
        num = (fp - fm) / (2.0 * h)
        ana = float(gflat[i])
        err = abs(num - ana) / max(abs(num), abs(ana), 1e-8)
        worst = max(worst, err)
    return worst


def grad_check_params(f, params, h=1e-6, coords=1, rng=None, skip_kinks=True, resolvable_only=False):
    """:func:`grad_check` over several parameter tensors at once, sharing one backward pass.

    ``f()`` builds a scalar loss reading ``params`` (name -> Tensor) in place; ``coords``
    coordinates are sampled per tensor. Returns the worst relative error.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    with Tape() as tape:
        y = f()
    grads = tape.backward(y, params)
    floor = resolvable_floor(y.data, h)

    def value():
        with kink_pattern() as kp:
            out = float(f().data)
        return out, kp

    worst = 0.0
    for name, p in params.items():
        flat, gflat = p.data.reshape(-1), grads[name].reshape(-1)
        idx = np.arange(flat.size)
        if resolvable_only:
            idx = idx[np.abs(gflat) >= floor]
        if coords is not None and coords < idx.size:
            idx = rng.choice(idx, size=coords, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp, kp = value()
            flat[i] = orig - h
            fm, km = value()
            flat[i] = orig
            if skip_kinks and not _same_pattern(kp, km):
                continue
            num, ana = (fp - fm) / (2.0 * h), float(gflat[i])
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-8))
    return worst


def block_diag(blocks):
    """Sparse block-diagonal constant matrix for batching graphs."""
    return sp.block_diag(blocks, format="csr")


def reshape_scalar(x):
    """View a scalar tensor as 1 x 1."""
    x = _lift(x)
    return _make(x.data.reshape(1, 1), (x,), lambda g: (g.reshape(x.shape),))
