"""Minimal deterministic tensor arithmetic with reverse-mode differentiation.

Tensors wrap row-major float32 numpy arrays. Every differentiable op records
its inputs and a backward closure on the output tensor; ``backward(loss)``
replays the tape in reverse topological order and accumulates gradients into
``Tensor.grad`` buffers. Compute is 32-bit throughout; tests cross-check
against 64-bit oracles.

Broadcasting is deliberately restricted: elementwise ops accept equal shapes,
python scalars, or a trailing-shape operand broadcast over leading axes
(e.g. adding a (d,) bias to a (T, d) activation). Anything else raises
``ShapeError`` so shape bugs surface at the op that caused them.
"""

from __future__ import annotations

import numpy as np

NEG_INF = -1e9  # additive mask value; large enough to zero out softmax mass


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


class NumericError(ValueError):
    """NaN or Inf encountered where finite values are required."""


class GraphError(RuntimeError):
    """Autodiff contract violation (e.g. backward on a non-scalar)."""


_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (eval / decoding)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_f32(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)  # note: would promote 0-d to (1,)
    return arr


class Tensor:
    """Dense n-dimensional float32 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f32(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- basic interface ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """Underlying array (not a copy; treat as read-only)."""
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise GraphError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def check_finite(self, context: str = "tensor"):
        """Barrier: raise NumericError if data (or grad) holds NaN/Inf."""
        if not np.all(np.isfinite(self.data)):
            raise NumericError(f"non-finite values in {context} (shape {self.shape})")
        if self.grad is not None and not np.all(np.isfinite(self.grad)):
            raise NumericError(f"non-finite gradient in {context} (shape {self.shape})")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise GraphError("tensor/tensor division not supported; use reciprocal ops")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = _reduce_to(g, t.data.shape)
    if t.grad is None:
        t.grad = g.astype(np.float32, copy=True)
    else:
        t.grad += g


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _broadcast_ok(a: tuple[int, ...], b: tuple[int, ...]) -> bool:
    """Equal shapes, scalars, or one shape being a trailing suffix of the other."""
    if a == b or a == () or b == ():
        return True
    small, big = (a, b) if len(a) < len(b) else (b, a)
    if len(small) == len(big):
        return False
    return big[len(big) - len(small):] == small


# -- elementwise ops ------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = Tensor(np.float32(b))
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data + b.data

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _make(out_data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        b = Tensor(np.float32(b))
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out_data = a.data * b.data

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(out_data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    out_data = np.ascontiguousarray(a.data.T)

    def backward(g):
        _accum(a, np.ascontiguousarray(g.T))

    return _make(out_data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis``."""
    n = a.data.shape[axis]
    if start < 0 or start + length > n:
        raise ShapeError(f"narrow: [{start}, {start + length}) out of range for axis {axis} of size {n}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out_data = np.ascontiguousarray(a.data[idx])

    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _make(out_data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, n in zip(tensors, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + n)
            _accum(t, g[tuple(idx)])
            offset += n

    return _make(out_data, tuple(tensors), backward)


def take_rows(a: Tensor, indices) -> Tensor:
    """Gather rows of a 2-D tensor (embedding lookup); backward scatter-adds."""
    if a.data.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-D table, got {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    out_data = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accum(a, full)

    return _make(out_data, (a,), backward)


def sum_(a: Tensor, axis: int | None = None) -> Tensor:
    out_data = a.data.sum(axis=axis, dtype=np.float32)
    out_data = np.asarray(out_data, dtype=np.float32)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
        else:
            _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape))

    return _make(out_data, (a,), backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        _accum(a, g * (a.data > 0))

    return _make(out_data, (a,), backward)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    """Sigmoid without overflow: exp() only ever sees non-positive inputs."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out_data = _sigmoid_stable(a.data)

    def backward(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


def swish(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    sig = _sigmoid_stable(a.data)
    out_data = a.data * sig

    def backward(g):
        _accum(a, g * (sig + a.data * sig * (1.0 - sig)))

    return _make(out_data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")
    out_data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _make(out_data, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis``; each slice sums to 1."""
    if np.any(np.isnan(a.data)):
        raise NumericError("softmax input contains NaN")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (out_data * g).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - dot))

    return _make(out_data, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if np.any(np.isnan(a.data)):
        raise NumericError("log_softmax input contains NaN")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse

    def backward(g):
        p = np.exp(out_data)
        _accum(a, g - p * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize last axis to zero mean / unit variance, then affine."""
    if x.shape[-1] != gamma.shape[-1] or x.shape[-1] != beta.shape[-1]:
        raise ShapeError(f"layer_norm: dim mismatch x={x.shape} gamma={gamma.shape} beta={beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv * (dxhat - m1 - xhat * m2))
        axes = tuple(range(g.ndim - 1))
        _accum(gamma, (g * xhat).sum(axis=axes))
        _accum(beta, g.sum(axis=axes))

    return _make(out_data, (x, gamma, beta), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if rate <= 0.0:
        return x
    if rate >= 1.0:
        raise GraphError(f"dropout rate must be < 1, got {rate}")
    mask = (rng.random(x.shape) >= rate).astype(np.float32) / np.float32(1.0 - rate)
    return mul(x, Tensor(mask))


def conv2d_stride2(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Valid 2-D convolution, kernel 3x3, stride 2.

    x: (T, F, Cin), w: (3, 3, Cin, Cout), b: (Cout,) -> (T', F', Cout)
    with T' = floor((T-1)/2) - 1 + (T odd adjust) per out = floor((L-3)/2)+1.
    """
    T, F, cin = x.shape
    if w.shape[:3] != (3, 3, cin):
        raise ShapeError(f"conv2d_stride2: weight {w.shape} does not match input {x.shape}")
    cout = w.shape[3]
    to = (T - 3) // 2 + 1
    fo = (F - 3) // 2 + 1
    if to < 1 or fo < 1:
        raise ShapeError(f"conv2d_stride2: input {x.shape} too small for 3x3/stride-2 kernel")
    out_data = np.broadcast_to(b.data, (to, fo, cout)).astype(np.float32).copy()
    slabs = []
    for i in range(3):
        for j in range(3):
            xs = x.data[i:i + 2 * to:2, j:j + 2 * fo:2, :]
            slabs.append(xs)
            out_data += np.tensordot(xs, w.data[i, j], axes=([2], [0]))

    def backward(g):
        dw = np.zeros_like(w.data)
        dx = np.zeros_like(x.data)
        for idx, (i, j) in enumerate((i, j) for i in range(3) for j in range(3)):
            xs = slabs[idx]
            dw[i, j] = np.tensordot(xs, g, axes=([0, 1], [0, 1]))
            dx[i:i + 2 * to:2, j:j + 2 * fo:2, :] += np.tensordot(g, w.data[i, j], axes=([2], [1]))
        _accum(x, dx)
        _accum(w, dw)
        _accum(b, g.sum(axis=(0, 1)))

    return _make(out_data, (x, w, b), backward)


def depthwise_conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-channel 1-D convolution over time with symmetric zero padding.

    x: (T, C), w: (K, C) with K odd, b: (C,) -> (T, C), length preserved.
    """
    T, C = x.shape
    K = w.shape[0]
    if K % 2 == 0:
        raise ShapeError(f"depthwise_conv1d: kernel size must be odd, got {K}")
    if w.shape[1] != C or b.shape != (C,):
        raise ShapeError(f"depthwise_conv1d: weight {w.shape}/bias {b.shape} do not match input {x.shape}")
    half = K // 2
    xp = np.zeros((T + 2 * half, C), dtype=np.float32)
    xp[half:half + T] = x.data
    out_data = np.broadcast_to(b.data, (T, C)).astype(np.float32).copy()
    for k in range(K):
        out_data += xp[k:k + T] * w.data[k]

    def backward(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.data)
        for k in range(K):
            dxp[k:k + T] += g * w.data[k]
            dw[k] = (xp[k:k + T] * g).sum(axis=0)
        _accum(x, dxp[half:half + T])
        _accum(w, dw)
        _accum(b, g.sum(axis=0))

    return _make(out_data, (x, w, b), backward)


# -- backward driver --------------------------------------------------------


def topo_order(root: Tensor) -> list[Tensor]:
    """Reverse-execution ordering of the graph below ``root``; each node once."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("backward on a tensor with no recorded graph")
    order = topo_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()
