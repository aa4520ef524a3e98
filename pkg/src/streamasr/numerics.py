"""Dense float64 array math with reverse-mode gradients.

Everything downstream (attention, encoders, CTC, decoders) is built from the
operations in this module.  Tensors wrap numpy float64 arrays and record a
backward closure; calling :func:`compute_gradients` (or ``Tensor.backward``)
accumulates d(loss)/d(param) into every reachable :class:`Parameter`.

Determinism: all contractions go through :func:`_contract`, which uses
``np.einsum`` with ``optimize=False`` so per-element summation order is fixed
regardless of surrounding shapes.  Randomness comes only from
:class:`RngStream`, a counter-based generator.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Sequence

import numpy as np

# Finite stand-in for log(0); exp(LOG_ZERO) underflows to exactly 0.0.
LOG_ZERO = -1.0e30

_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction (fast inference)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _contract(spec: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # optimize=False keeps einsum on its fixed-order C path (no BLAS dispatch)
    return np.einsum(spec, a, b, optimize=False)


class Tensor:
    """A float64 array plus optional gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def check_finite(self, context: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"{context}: non-finite values encountered")
        return self

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Reverse-mode accumulation from a scalar output."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # Operator sugar; all dispatch to module-level ops.
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Trainable tensor with a unique name path within its model."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name}, shape={self.data.shape})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), bwd)


def pow_(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    data = a.data ** exponent

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return _make(data, (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * data)

    return _make(data, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(data, (a,), bwd)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / data)

    return _make(data, (a,), bwd)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - data * data))

    return _make(data, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * data * (1.0 - data))

    return _make(data, (a,), bwd)


def relu(a) -> Tensor:
    """max(x, 0); subgradient at 0 is 0."""
    a = as_tensor(a)
    mask = a.data > 0.0
    data = np.where(mask, a.data, 0.0)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(data, (a,), bwd)


def swish(a) -> Tensor:
    """x * sigmoid(x)."""
    a = as_tensor(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    data = a.data * s

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * (s + a.data * s * (1.0 - s)))

    return _make(data, (a,), bwd)


def glu(a, axis: int = -1) -> Tensor:
    """Gated linear unit: first half of channels gated by sigmoid of second."""
    a = as_tensor(a)
    n = a.data.shape[axis]
    if n % 2 != 0:
        raise ValueError(f"glu requires an even channel count, got {n}")
    half = n // 2
    lead = (slice(None),) * (axis % a.data.ndim)
    x = slice_(a, lead + (slice(0, half),))
    gate = slice_(a, lead + (slice(half, None),))
    return mul(x, sigmoid(gate))


def logaddexp(a, b) -> Tensor:
    """Elementwise log(exp(a) + exp(b)); tolerates LOG_ZERO sentinels."""
    a, b = as_tensor(a), as_tensor(b)
    data = np.logaddexp(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * np.exp(a.data - data), a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * np.exp(b.data - data), b.data.shape))

    return _make(data, (a, b), bwd)


def where(cond, a, b) -> Tensor:
    """Select from a where cond else b; cond is a constant boolean array."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    data = np.where(cond, a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(cond, g, 0.0), a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(cond, 0.0, g), b.data.shape))

    return _make(data, (a, b), bwd)


# ---------------------------------------------------------------------------
# reductions and shape ops

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if a.requires_grad:
            if axis is None:
                a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(gg, a.data.shape).copy())

    return _make(data, (a,), bwd)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        count = a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    data = a.data.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _make(data, (a,), bwd)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    data = a.data.transpose(axes)

    def bwd(g):
        if a.requires_grad:
            if axes is None:
                a._accumulate(g.transpose())
            else:
                a._accumulate(g.transpose(np.argsort(axes)))

    return _make(data, (a,), bwd)


def concat(parts: Iterable, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accumulate(g[tuple(idx)])

    return _make(data, tuple(parts), bwd)


def slice_(a, key) -> Tensor:
    a = as_tensor(a)
    data = a.data[key]

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, key, g)
            a._accumulate(full)

    return _make(data, (a,), bwd)


def take_rows(a, indices) -> Tensor:
    """Gather rows along axis 0 (duplicate indices allowed)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    data = a.data[indices]

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, indices, g)
            a._accumulate(full)

    return _make(data, (a,), bwd)


def take_pairs(a, rows, cols) -> Tensor:
    """Gather a[rows[i], cols[i]] elementwise from a 2-D tensor."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    data = a.data[rows, cols]

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, (rows, cols), g)
            a._accumulate(full)

    return _make(data, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    data = _contract("ij,jk->ik", a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_contract("ik,jk->ij", g, b.data))
        if b.requires_grad:
            b._accumulate(_contract("ij,ik->jk", a.data, g))

    return _make(data, (a, b), bwd)


def einsum2(spec: str, a, b) -> Tensor:
    """Two-operand einsum with gradients.

    Index labels must not repeat within one operand, and every label of an
    operand must appear in the other operand or in the output.
    """
    a, b = as_tensor(a), as_tensor(b)
    lhs, out_spec = spec.split("->")
    a_spec, b_spec = lhs.split(",")
    data = _contract(spec, a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_contract(f"{out_spec},{b_spec}->{a_spec}", g, b.data))
        if b.requires_grad:
            b._accumulate(_contract(f"{out_spec},{a_spec}->{b_spec}", g, a.data))

    return _make(data, (a, b), bwd)


# ---------------------------------------------------------------------------
# normalization and fused sequence ops

def softmax(a, axis: int = -1) -> Tensor:
    """Stable softmax along axis; rejects non-finite input."""
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise ValueError("softmax: non-finite input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            a._accumulate(data * (g - dot))

    return _make(data, (a,), bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise ValueError("log_softmax: non-finite input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def bwd(g):
        if a.requires_grad:
            p = np.exp(data)
            a._accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return _make(data, (a,), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-12) -> Tensor:
    """gain * (x - mean) / sqrt(var + eps) + bias along the last axis."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.data.shape[-1]
    if d == 0:
        raise ValueError("layer_norm: zero-dimensional input")
    if gain.data.shape[-1] != d or bias.data.shape[-1] != d:
        raise ValueError("layer_norm: gain/bias dimension mismatch")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = gain.data * xhat + bias.data

    def bwd(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.data.shape))
        if x.requires_grad:
            gh = g * gain.data
            term = gh - gh.mean(axis=-1, keepdims=True) \
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(term * inv)

    return _make(data, (x, gain, bias), bwd)


def depthwise_conv1d(x, kernel, padding: str = "causal") -> Tensor:
    """Per-channel 1-D convolution over a (T, d) frame sequence.

    kernel has shape (k, d): one k-tap filter per channel.  ``causal`` pads
    k-1 zeros on the left; ``symmetric`` pads (k-1)/2 on each side and
    requires odd k.  Output length equals input length.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    k = kernel.data.shape[0]
    if k < 1:
        raise ValueError("depthwise_conv1d: kernel size must be >= 1")
    if padding == "causal":
        left, right = k - 1, 0
    elif padding == "symmetric":
        if k % 2 == 0:
            raise ValueError("depthwise_conv1d: symmetric padding requires odd kernel size")
        left = right = (k - 1) // 2
    else:
        raise ValueError(f"depthwise_conv1d: unknown padding {padding!r}")
    t = x.data.shape[0]
    xp = np.pad(x.data, ((left, right), (0, 0)))
    data = np.zeros_like(x.data)
    for i in range(k):
        data += kernel.data[i] * xp[i:i + t]

    def bwd(g):
        if kernel.requires_grad:
            gk = np.zeros_like(kernel.data)
            for i in range(k):
                gk[i] = (g * xp[i:i + t]).sum(axis=0)
            kernel._accumulate(gk)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                gxp[i:i + t] += kernel.data[i] * g
            x._accumulate(gxp[left:left + t] if right else gxp[left:])

    return _make(data, (x, kernel), bwd)


def dropout(x, p: float, rng: "RngStream", training: bool = True) -> Tensor:
    """Zero entries with probability p and rescale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    keep = rng.uniform(x.data.shape) >= p
    return mul(x, keep / (1.0 - p))


class BatchNormState:
    """Running mean/variance for batch normalization at inference time."""

    def __init__(self, dim: int, momentum: float = 0.1):
        self.momentum = momentum
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)


def batch_norm(x, gain, bias, state: BatchNormState, training: bool,
               eps: float = 1e-5) -> Tensor:
    """Normalize each channel over the time axis of a (T, d) sequence.

    Training mode uses batch statistics and updates the running estimates;
    evaluation mode normalizes with the stored running statistics.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if training:
        t = x.data.shape[0]
        mu = x.data.mean(axis=0)
        xc = x.data - mu
        var = (xc * xc).mean(axis=0)
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mu
        unbiased = var * (t / max(t - 1, 1))
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * unbiased
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        data = gain.data * xhat + bias.data

        def bwd(g):
            if gain.requires_grad:
                gain._accumulate((g * xhat).sum(axis=0))
            if bias.requires_grad:
                bias._accumulate(g.sum(axis=0))
            if x.requires_grad:
                gh = g * gain.data
                term = gh - gh.mean(axis=0) - xhat * (gh * xhat).mean(axis=0)
                x._accumulate(term * inv)

        return _make(data, (x, gain, bias), bwd)

    inv = 1.0 / np.sqrt(state.running_var + eps)
    mu = state.running_mean
    data = gain.data * (x.data - mu) * inv + bias.data

    def bwd_eval(g):
        if gain.requires_grad:
            gain._accumulate((g * (x.data - mu) * inv).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))
        if x.requires_grad:
            x._accumulate(g * gain.data * inv)

    return _make(data, (x, gain, bias), bwd_eval)


# ---------------------------------------------------------------------------
# gradients and RNG

def compute_gradients(loss: Tensor, params: Iterable[Parameter]) -> None:
    """Populate param.grad with d(loss)/d(param) for every given parameter.

    Parameters not reachable from the loss receive zero gradients.
    """
    params = list(params)
    for p in params:
        p.grad = np.zeros_like(p.data)
    loss.backward()


class RngStream:
    """Counter-based random stream: (seed, counter) fully determines draws.

    Each draw consumes one counter value, so reproducibility does not depend
    on process history.  ``split`` derives an independent child stream from a
    string or integer tag.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = int(counter)

    def _generator(self) -> np.random.Generator:
        bits = np.random.Philox(key=self.seed, counter=[self.counter, 0, 0, 0])
        self.counter += 1
        return np.random.Generator(bits)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._generator().uniform(low, high, size=shape)

    def normal(self, shape=(), scale: float = 1.0) -> np.ndarray:
        return self._generator().normal(0.0, scale, size=shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._generator().integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._generator().permutation(n)

    def split(self, tag) -> "RngStream":
        digest = hashlib.sha256(f"{self.seed}/{tag}".encode()).digest()
        return RngStream(int.from_bytes(digest[:8], "little"))


def glorot(rng: RngStream, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(shape, -limit, limit)
