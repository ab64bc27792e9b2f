"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps a C-contiguous ndarray and records, for every operation,
a closure that routes upstream gradients to its inputs.  backward() walks
the graph in reverse topological order and accumulates into .grad, so a
second backward call without zeroing doubles the gradients (sum rule).

Only the operations the bundled models need are provided; there is no
general broadcasting machinery beyond what those layers use.
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float64

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; carries both shapes."""

    def __init__(self, op, shape_a, shape_b=None):
        self.op = op
        self.shapes = (tuple(shape_a),) if shape_b is None else (tuple(shape_a), tuple(shape_b))
        detail = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {detail}")


class NumericFault(FloatingPointError):
    """Raised when NaN/Inf is detected where finite values are required."""


def set_default_dtype(dtype):
    """Set the dtype used for new tensors (float64 in tests, float32 in training builds)."""
    global DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return DEFAULT_DTYPE


class no_grad:
    """Context manager disabling graph construction (eval / sampling paths)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def item(self):
        if self.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data.copy()

    def has_fault(self):
        """True if data (or grad) contains NaN/Inf."""
        if not np.all(np.isfinite(self.data)):
            return True
        return self.grad is not None and not np.all(np.isfinite(self.grad))

    # -- graph management ----------------------------------------------------

    def _needs_graph(self):
        return _grad_enabled and (self.requires_grad or self._backward is not None)

    def detach(self):
        """Stop-gradient view: same values, no parents, no grad requirement."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        out._backward = None
        return out

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable requires_grad leaf."""
        if self.size != 1:
            raise ShapeError("backward: loss must be scalar", self.shape)

        # Iterative topological order; deep graphs must not hit the recursion limit.
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node._accumulate(g)
            if node._backward is None:
                continue
            for parent, pg in node._backward(g):
                if pg is None:
                    continue
                acc = grads.get(id(parent))
                # Out-of-place accumulation: closure outputs may alias each other
                # or be read-only broadcast views.
                grads[id(parent)] = pg if acc is None else acc + pg

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, power(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def constant(x, dtype=None):
    return Tensor(x, requires_grad=False, dtype=dtype)


def _make(data, parents, backward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    if _grad_enabled and any(p._needs_graph() for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise -------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        return ((a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape)))

    return _make(a.data * b.data, (a, b), backward)


def power(a, p):
    a = as_tensor(a)
    p = float(p)

    def backward(g):
        return ((a, g * p * np.power(a.data, p - 1.0)),)

    return _make(np.power(a.data, p), (a,), backward)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        return ((a, g * out_data),)

    return _make(out_data, (a,), backward)


def log(a):
    a = as_tensor(a)

    def backward(g):
        return ((a, g / a.data),)

    return _make(np.log(a.data), (a,), backward)


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        return ((a, g * mask),)

    return _make(np.where(mask, a.data, 0.0), (a,), backward)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ((a, ga), (b, gb))

    return _make(np.matmul(a.data, b.data), (a, b), backward)


# -- shape -------------------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    old_shape = a.shape

    def backward(g):
        return ((a, g.reshape(old_shape)),)

    return _make(np.ascontiguousarray(a.data.reshape(shape)), (a,), backward)


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return ((a, np.ascontiguousarray(g.transpose(inverse))),)

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward)


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            i != axis % ref.ndim and t.shape[i] != ref.shape[i] for i in range(ref.ndim)
        ):
            raise ShapeError("concat", ref.shape, t.shape)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, offsets, axis=axis)
        return tuple((t, np.ascontiguousarray(p)) for t, p in zip(tensors, pieces))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


# -- reductions --------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    in_shape = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(in_shape))

    def backward(g):
        return ((a, np.broadcast_to(g.reshape(kept), in_shape)),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), backward)


def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def mean_pool(a, axis):
    """Adaptive mean-pool with output size 1 along `axis` (axis removed)."""
    return reduce_mean(a, axis=axis, keepdims=False)


# -- indexing ----------------------------------------------------------------


def take_rows(a, indices):
    """Select rows along axis 0; backward scatter-adds into those rows."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("take_rows: indices must be 1-D", idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"take_rows: index out of range [0, {a.shape[0]})")

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return ((a, ga),)

    return _make(np.ascontiguousarray(a.data[idx]), (a,), backward)


def gather_columns(a, indices):
    """out[i] = a[i, indices[i]] for a 2-D tensor; backward scatter-adds."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("gather_columns", a.shape)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape != (a.shape[0],):
        raise ShapeError("gather_columns", a.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise IndexError(f"gather_columns: index out of range [0, {a.shape[1]})")
    rows = np.arange(a.shape[0])

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, idx), g)
        return ((a, ga),)

    return _make(np.ascontiguousarray(a.data[rows, idx]), (a,), backward)


# -- fused layers ------------------------------------------------------------


def softmax(a, axis=-1):
    """Numerically stable softmax; the detached max shift leaves gradients exact."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return ((a, out_data * (g - dot)),)

    return _make(out_data, (a,), backward)


def layer_norm(a, eps=1e-5):
    """Per-sample normalization over the last axis (no affine; see nn.LayerNorm)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out_data = xc * inv
    n = a.shape[-1]

    def backward(g):
        # d/dx of (x - mu) * inv with mu, var functions of x.
        g_mean = g.mean(axis=-1, keepdims=True)
        gx_mean = (g * out_data).mean(axis=-1, keepdims=True)
        return ((a, inv * (g - g_mean - out_data * gx_mean)),)

    return _make(out_data, (a,), backward)


def dropout_mask(shape, keep_prob, rng, dtype=None):
    """Inverted-dropout mask: entries are 1/keep_prob with probability keep_prob, else 0."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    dtype = dtype or DEFAULT_DTYPE
    mask = (rng.random(shape) < keep_prob).astype(dtype) / np.asarray(keep_prob, dtype=dtype)
    return constant(mask)


def sinusoidal_embedding(timesteps, dim, dtype=None):
    """Sinusoidal time embedding lookup: rows of sin/cos at geometric frequencies."""
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    dtype = dtype or DEFAULT_DTYPE
    t = np.asarray(timesteps, dtype=dtype).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=dtype) / max(half - 1, 1))
    angles = t * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)], axis=1).astype(dtype)
    return constant(emb)
