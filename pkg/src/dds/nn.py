"""Layers and parameter containers built on the autodiff tensor core."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable tensor; always participates in gradients."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Base class with attribute-path parameter naming and train/eval modes."""

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield name, value
            elif isinstance(value, ModuleList):
                for idx, child in enumerate(value):
                    yield f"{name}.{idx}", child

    def named_parameters(self, prefix=""):
        for name, value in self._children():
            path = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Parameter):
                yield path, value
            else:
                yield from value.named_parameters(path)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def train(self):
        self.training = True
        for _, child in self._children():
            if isinstance(child, Module):
                child.train()
        return self

    def eval(self):
        self.training = False
        for _, child in self._children():
            if isinstance(child, Module):
                child.eval()
        return self

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise T.ShapeError(f"load_state_dict[{name}]", p.data.shape, arr.shape)
            p.data = np.ascontiguousarray(arr)

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


class ModuleList(list):
    """Plain list of Modules; children are named by index."""


class Linear(Module):
    def __init__(self, in_dim, out_dim, rng, bias=True, scale=None):
        super().__init__()
        std = scale if scale is not None else math.sqrt(2.0 / (in_dim + out_dim))
        self.weight = Parameter(rng.normal(0.0, std, size=(in_dim, out_dim)))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def forward(self, x):
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def forward(self, x):
        return T.add(T.mul(T.layer_norm(x, eps=self.eps), self.gamma), self.beta)


class Dropout(Module):
    """Inverted dropout: scales by 1/keep at train time, identity at eval."""

    def __init__(self, p, rng):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self._rng = rng

    def forward(self, x):
        if not self.training or self.p == 0.0:
            return x
        mask = T.dropout_mask(x.shape, 1.0 - self.p, self._rng, dtype=x.dtype)
        return T.mul(x, mask)


class MLP(Module):
    """Dense stack with ReLU between layers, linear output."""

    def __init__(self, dims, rng, bias=True):
        super().__init__()
        self.layers = ModuleList(
            Linear(dims[i], dims[i + 1], rng, bias=bias) for i in range(len(dims) - 1)
        )

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


class MultiHeadSelfAttention(Module):
    def __init__(self, hidden, heads, rng):
        super().__init__()
        if hidden % heads != 0:
            raise ValueError(f"hidden ({hidden}) not divisible by heads ({heads})")
        self.heads = heads
        self.head_dim = hidden // heads
        self.wq = Linear(hidden, hidden, rng)
        self.wk = Linear(hidden, hidden, rng)
        self.wv = Linear(hidden, hidden, rng)
        self.wo = Linear(hidden, hidden, rng)

    def forward(self, x):
        b, n, hid = x.shape

        def split(t):
            return T.transpose(T.reshape(t, (b, n, self.heads, self.head_dim)), (0, 2, 1, 3))

        q, k, v = split(self.wq(x)), split(self.wk(x)), split(self.wv(x))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.head_dim))
        attn = T.softmax(scores, axis=-1)
        out = T.transpose(T.matmul(attn, v), (0, 2, 1, 3))
        return self.wo(T.reshape(out, (b, n, hid)))


class TransformerEncoderLayer(Module):
    """Post-norm encoder block: self-attention and a 4x feed-forward expansion."""

    def __init__(self, hidden, heads, dropout, rng):
        super().__init__()
        self.attn = MultiHeadSelfAttention(hidden, heads, rng)
        self.ff1 = Linear(hidden, 4 * hidden, rng)
        self.ff2 = Linear(4 * hidden, hidden, rng)
        self.norm1 = LayerNorm(hidden)
        self.norm2 = LayerNorm(hidden)
        self.drop1 = Dropout(dropout, rng)
        self.drop2 = Dropout(dropout, rng)

    def forward(self, x):
        x = self.norm1(T.add(x, self.drop1(self.attn(x))))
        ff = self.ff2(T.relu(self.ff1(x)))
        return self.norm2(T.add(x, self.drop2(ff)))


def check_finite(t, what):
    """Raise NumericFault if the tensor holds NaN/Inf."""
    if not np.all(np.isfinite(t.data)):
        raise T.NumericFault(f"non-finite values in {what}")
    return t
