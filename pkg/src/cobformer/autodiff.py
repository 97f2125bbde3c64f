"""Dense 2-D reverse-mode autodiff.

Every value is a 2-D array wrapped in :class:`Tensor`. Operations record onto
the innermost active :class:`Tape` when any input requires a gradient;
outside a tape they run as plain numpy with no bookkeeping, which is what the
finite-difference checker relies on.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

DEFAULT_DTYPE = np.float64
_TAPES: list["Tape"] = []
_RELU_WATCH: list[list] = []


class ShapeError(ValueError):
    pass


class NumericalFault(ArithmeticError):
    pass


class ContractError(RuntimeError):
    pass


def set_default_dtype(dtype):
    """Switch new tensors to ``dtype`` (float64 unless explicitly lowered)."""
    global DEFAULT_DTYPE
    DEFAULT_DTYPE = np.dtype(dtype).type


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "name", "_tape")

    def __init__(self, values, requires_grad=False, name=None, dtype=None):
        v = np.asarray(values, dtype=dtype or DEFAULT_DTYPE)
        if v.ndim == 0:
            v = v.reshape(1, 1)
        elif v.ndim == 1:
            v = v.reshape(1, -1)
        elif v.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {v.shape}")
        self.values = v
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._tape = None

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on a {self.shape} tensor")
        return float(self.values[0, 0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self._tape is None:
            raise ContractError("tensor was not produced on a tape")
        self._tape.backward(self)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar for the common cases
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class Tape:
    """Ordered record of primitive applications for one backward sweep."""

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, out, inputs, backward_fn):
        if self.consumed:
            raise ContractError("tape already consumed by backward()")
        out.requires_grad = True
        out._tape = self
        self.nodes.append((out, inputs, backward_fn))

    def backward(self, loss: Tensor):
        if loss.shape != (1, 1):
            raise ContractError(f"backward needs a 1x1 loss, got {loss.shape}")
        if self.consumed:
            raise ContractError("backward() already ran on this tape; build a new one")
        if not self.nodes:
            raise ContractError("empty tape")
        self.consumed = True
        grads = {id(loss): np.ones((1, 1), dtype=loss.values.dtype)}
        produced = {id(out) for out, _, _ in self.nodes}
        leaves = {}
        for out, inputs, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g
        self.nodes = []


def _tape_for(inputs):
    if not _TAPES:
        return None
    if any(t.requires_grad for t in inputs):
        return _TAPES[-1]
    return None


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op, values, inputs, backward_fn):
    if not np.all(np.isfinite(values)):
        raise NumericalFault(f"{op} produced a non-finite value")
    out = Tensor(values, dtype=values.dtype)
    tape = _tape_for(inputs)
    if tape is not None:
        tape.record(out, inputs, backward_fn)
    return out


def _need(cond, msg):
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b, transpose_b=False):
    """``a @ b`` (or ``a @ b.T`` with ``transpose_b``)."""
    a, b = _as_tensor(a), _as_tensor(b)
    bv = b.values.T if transpose_b else b.values
    _need(a.shape[1] == bv.shape[0], f"matmul {a.shape} x {bv.shape}")
    av = a.values

    def back(g):
        ga = g @ bv.T
        gb = (g.T @ av) if transpose_b else (av.T @ g)
        return ga, gb

    return _emit("matmul", av @ bv, (a, b), back)


def spmm(matrix, x):
    """Constant (sparse or dense) matrix times tensor; gradient flows to ``x`` only."""
    x = _as_tensor(x)
    _need(matrix.shape[1] == x.shape[0], f"spmm {matrix.shape} x {x.shape}")
    mt = matrix.T.tocsr() if sp.issparse(matrix) else matrix.T
    out = np.asarray(matrix @ x.values)
    return _emit("spmm", out, (x,), lambda g: (np.asarray(mt @ g),))


def add(a, b):
    """Elementwise sum; ``b`` may be a 1-row bias broadcast over rows."""
    a, b = _as_tensor(a), _as_tensor(b)
    bcast = b.shape[0] == 1 and a.shape[0] != 1
    _need(a.shape[1] == b.shape[1] and (bcast or a.shape[0] == b.shape[0]), f"add {a.shape} + {b.shape}")

    def back(g):
        return g, (g.sum(axis=0, keepdims=True) if bcast else g)

    return _emit("add", a.values + b.values, (a, b), back)


def sub(a, b):
    return add(a, scale(b, -1.0))


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)
    return _emit("scale", a.values * c, (a,), lambda g: (g * c,))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _need(a.shape == b.shape, f"mul {a.shape} * {b.shape}")
    av, bv = a.values, b.values
    return _emit("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def concat_cols(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    rows = tensors[0].shape[0]
    _need(all(t.shape[0] == rows for t in tensors), "concat_cols row mismatch")
    cuts = np.cumsum([t.shape[1] for t in tensors])[:-1]
    return _emit(
        "concat_cols",
        np.concatenate([t.values for t in tensors], axis=1),
        tuple(tensors),
        lambda g: np.split(g, cuts, axis=1),
    )


def concat_rows(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    cols = tensors[0].shape[1]
    _need(all(t.shape[1] == cols for t in tensors), "concat_rows column mismatch")
    cuts = np.cumsum([t.shape[0] for t in tensors])[:-1]
    return _emit(
        "concat_rows",
        np.concatenate([t.values for t in tensors], axis=0),
        tuple(tensors),
        lambda g: np.split(g, cuts, axis=0),
    )


def row_softmax(a):
    a = _as_tensor(a)
    z = a.values - a.values.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _emit("row_softmax", y, (a,), back)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize each row over its columns, then apply the affine (1, c) gamma/beta."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be > 0")
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    _need(gamma.shape == (1, x.shape[1]) and beta.shape == gamma.shape, "layer_norm affine shape")
    mu = x.values.mean(axis=1, keepdims=True)
    xc = x.values - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gamma.values

    def back(g):
        gx = g * gv
        dx = inv * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _emit("layer_norm", xhat * gv + beta.values, (x, gamma, beta), back)


class relu_margin:
    """Context manager recording the smallest |input| any relu sees.

    Finite differences straddling the kink at 0 are meaningless, so gradient
    checks use this to reject test points that land too close to it.
    """

    def __init__(self):
        self.value = np.inf

    def __enter__(self):
        _RELU_WATCH.append([np.inf])
        return self

    def __exit__(self, *exc):
        self.value = _RELU_WATCH.pop()[0]
        return False


def relu(a):
    a = _as_tensor(a)
    on = a.values > 0
    if _RELU_WATCH and a.values.size:
        w = _RELU_WATCH[-1]
        w[0] = min(w[0], float(np.abs(a.values).min()))
    return _emit("relu", np.where(on, a.values, 0.0).astype(a.values.dtype), (a,), lambda g: (g * on,))


def mean_rows(x, groups, num_groups=None):
    """Per-group row means; ``groups[i]`` names the group of row i."""
    x = _as_tensor(x)
    groups = np.asarray(groups, dtype=np.int64)
    _need(len(groups) == x.shape[0], "mean_rows group vector length")
    k = int(groups.max()) + 1 if num_groups is None else num_groups
    counts = np.bincount(groups, minlength=k).astype(x.values.dtype)
    if np.any(counts == 0):
        raise ContractError("mean_rows over an empty group")
    sums = np.zeros((k, x.shape[1]), dtype=x.values.dtype)
    np.add.at(sums, groups, x.values)
    inv = (1.0 / counts)[:, None]
    return _emit("mean_rows", sums * inv, (x,), lambda g: ((g * inv)[groups],))


def row_select(x, index):
    """Gather rows by integer index (repeats allowed) or boolean mask."""
    x = _as_tensor(x)
    index = np.asarray(index)
    if index.dtype == bool:
        _need(len(index) == x.shape[0], "row_select mask length")
        index = np.flatnonzero(index)
    n = x.shape[0]

    def back(g):
        out = np.zeros((n, g.shape[1]), dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return _emit("row_select", x.values[index], (x,), back)


def dropout(x, p, training, rng):
    """Inverted dropout. ``rng`` is a numpy Generator owned by the caller."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout p must lie in [0, 1)")
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    keep = keep.astype(x.values.dtype)
    return _emit("dropout", x.values * keep, (x,), lambda g: (g * keep,))


def log(x, floor=0.0):
    """Natural log of ``max(x, floor)``; no gradient where the floor binds."""
    x = _as_tensor(x)
    clipped = x.values <= floor
    safe = np.where(clipped, floor, x.values)
    with np.errstate(divide="ignore"):
        y = np.log(safe)
    return _emit("log", y, (x,), lambda g: (np.where(clipped, 0.0, g / np.where(clipped, 1.0, x.values)),))


def sum_all(x):
    x = _as_tensor(x)
    shape = x.shape
    return _emit("sum", np.array([[x.values.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),))


def detach(x):
    """Same values, cut from the tape."""
    return Tensor(x.values.copy(), dtype=x.values.dtype)


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(f, params, h=1e-5, details=False):
    """Max relative error between autodiff and central differences.

    ``f`` is a zero-argument callable that rebuilds the scalar loss from the
    current values of ``params``. Relative error per coordinate uses the
    denominator ``max(|auto|, |numeric|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    worst = 0.0
    rows = []
    for p in params:
        auto = p.grad if p.grad is not None else np.zeros_like(p.values)
        flat = p.values.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f().item()
            flat[i] = old - h
            fm = f().item()
            flat[i] = old
            num = (fp - fm) / (2 * h)
            a = auto.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
            if details:
                rows.append((p.name, i, a, num, err))
    return (worst, rows) if details else worst
