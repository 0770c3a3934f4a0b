"""Neural building blocks: feed-forward, attention, convolution module,
layer norm, positional encoding, LSTM, and the convolutional subsampling
frontend. All layers are stateless given their parameters; training-mode
dropout draws from an explicitly passed generator so runs are reproducible.
"""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nm
from .numerics import ShapeError, Tensor


class Module:
    """Parameter container. Parameters are discovered by attribute walk, in
    attribute insertion order, which fixes both init and checkpoint order."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


def xavier(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-a, a, size=(d_in, d_out)).astype(np.float32)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.w = Tensor(xavier(rng, d_in, d_out), requires_grad=True)
        self.b = Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.w.shape[0]:
            raise ShapeError(f"linear: input dim {x.shape[-1]} != weight dim {self.w.shape[0]}")
        return nm.matmul(x, self.w) + self.b


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return nm.layer_norm(x, self.gamma, self.beta, self.eps)


class FeedForward(Module):
    """Position-wise two-layer network with swish nonlinearity.

    (T, d_model) -> (T, d_model); dropout after the activation, train mode only.
    """

    def __init__(self, d_model: int, d_ff: int, dropout: float, rng: np.random.Generator):
        self.w1 = Linear(d_model, d_ff, rng)
        self.w2 = Linear(d_ff, d_model, rng)
        self.dropout = dropout

    def forward(self, x: Tensor, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        h = nm.swish(self.w1.forward(x))
        if train:
            h = nm.dropout(h, self.dropout, rng)
        return self.w2.forward(h)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with per-head scale 1/sqrt(d_model/n_heads).

    Serves self-attention (queries == keys/values source) and decoder
    cross-attention (separate sources). ``mask`` is an additive (T_q, T_k)
    array; masked positions carry a large negative value.
    """

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads != 0:
            raise ShapeError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)
        self.n_heads = n_heads
        self.d_head = d_model // n_heads

    def forward(self, query: Tensor, kv: Tensor, mask: np.ndarray | None = None,
                return_weights: bool = False):
        q = self.wq.forward(query)
        k = self.wk.forward(kv)
        v = self.wv.forward(kv)
        scale = 1.0 / math.sqrt(self.d_head)
        heads = []
        weights = []
        for h in range(self.n_heads):
            lo = h * self.d_head
            qh = nm.narrow(q, 1, lo, self.d_head)
            kh = nm.narrow(k, 1, lo, self.d_head)
            vh = nm.narrow(v, 1, lo, self.d_head)
            scores = nm.mul(nm.matmul(qh, nm.transpose(kh)), scale)
            if mask is not None:
                scores = scores + Tensor(mask)
            attn = nm.softmax(scores, axis=-1)
            weights.append(attn)
            heads.append(nm.matmul(attn, vh))
        out = self.wo.forward(nm.concat(heads, axis=1))
        if return_weights:
            return out, weights
        return out


def causal_mask(T: int) -> np.ndarray:
    """Additive mask: position i may attend to positions <= i."""
    m = np.zeros((T, T), dtype=np.float32)
    m[np.triu_indices(T, k=1)] = nm.NEG_INF
    return m


class ConvModule(Module):
    """Pointwise conv -> GLU -> depthwise conv -> layer norm -> swish ->
    pointwise conv. Depthwise kernel is odd so sequence length is preserved.
    The normalization is per-frame (batch-independent)."""

    def __init__(self, d_model: int, kernel_size: int, rng: np.random.Generator):
        if kernel_size % 2 == 0:
            raise ShapeError(f"depthwise kernel size must be odd, got {kernel_size}")
        self.pw1 = Linear(d_model, 2 * d_model, rng)
        self.dw_w = Tensor(xavier(rng, kernel_size, d_model), requires_grad=True)
        self.dw_b = Tensor(np.zeros(d_model, dtype=np.float32), requires_grad=True)
        self.norm = LayerNorm(d_model)
        self.pw2 = Linear(d_model, d_model, rng)
        self.d_model = d_model

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_model:
            raise ShapeError(f"conv module: input dim {x.shape[-1]} != d_model {self.d_model}")
        h = self.pw1.forward(x)
        a = nm.narrow(h, 1, 0, self.d_model)
        b = nm.narrow(h, 1, self.d_model, self.d_model)
        h = nm.mul(a, nm.sigmoid(b))
        h = nm.depthwise_conv1d(h, self.dw_w, self.dw_b)
        h = self.norm.forward(h)
        h = nm.swish(h)
        return self.pw2.forward(h)


class LSTM(Module):
    """Stacked LSTM returning the full output sequence; zero initial state.

    Gate layout along the 4h axis: input, forget, cell, output.
    """

    def __init__(self, d_in: int, hidden: int, n_layers: int, rng: np.random.Generator):
        self.wx = []
        self.wh = []
        self.b = []
        for layer in range(n_layers):
            din = d_in if layer == 0 else hidden
            self.wx.append(Tensor(xavier(rng, din, 4 * hidden), requires_grad=True))
            self.wh.append(Tensor(xavier(rng, hidden, 4 * hidden), requires_grad=True))
            self.b.append(Tensor(np.zeros(4 * hidden, dtype=np.float32), requires_grad=True))
        self.hidden = hidden
        self.n_layers = n_layers
        self.d_in = d_in

    def named_parameters(self, prefix: str = ""):
        for layer in range(self.n_layers):
            base = f"{prefix}.l{layer}" if prefix else f"l{layer}"
            yield f"{base}.wx", self.wx[layer]
            yield f"{base}.wh", self.wh[layer]
            yield f"{base}.b", self.b[layer]

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"lstm: input dim {x.shape[-1]} != expected {self.d_in}")
        T = x.shape[0]
        hdim = self.hidden
        seq = x
        for layer in range(self.n_layers):
            h = Tensor(np.zeros((1, hdim), dtype=np.float32))
            c = Tensor(np.zeros((1, hdim), dtype=np.float32))
            outs = []
            for t in range(T):
                xt = nm.narrow(seq, 0, t, 1)
                gates = nm.matmul(xt, self.wx[layer]) + nm.matmul(h, self.wh[layer]) + self.b[layer]
                i = nm.sigmoid(nm.narrow(gates, 1, 0, hdim))
                f = nm.sigmoid(nm.narrow(gates, 1, hdim, hdim))
                g = nm.tanh(nm.narrow(gates, 1, 2 * hdim, hdim))
                o = nm.sigmoid(nm.narrow(gates, 1, 3 * hdim, hdim))
                c = nm.mul(f, c) + nm.mul(i, g)
                h = nm.mul(o, nm.tanh(c))
                outs.append(h)
            seq = nm.concat(outs, axis=0)
        return seq


class Conv2dSubsampling(Module):
    """Two 3x3 stride-2 valid convolutions over (time, feature), then a linear
    projection to d_model. Output length: T -> ((T-3)//2+1 -3)//2 + 1, i.e.
    floor((floor((T-1)/2) - 1)/2); roughly T/4.
    """

    MIN_FRAMES = 7  # smallest T with a nonempty output

    def __init__(self, feat_dim: int, d_model: int, channels: int, rng: np.random.Generator):
        if feat_dim < 7:
            raise ShapeError(f"feature dim {feat_dim} too small for two 3x3 stride-2 convs (need >= 7)")
        self.w1 = Tensor(xavier(rng, 9, channels).reshape(3, 3, 1, channels), requires_grad=True)
        self.b1 = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        self.w2 = Tensor((xavier(rng, 9 * channels, channels)).reshape(3, 3, channels, channels),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True)
        f1 = (feat_dim - 3) // 2 + 1
        self.f2 = (f1 - 3) // 2 + 1
        self.proj = Linear(self.f2 * channels, d_model, rng)
        self.feat_dim = feat_dim
        self.channels = channels

    @staticmethod
    def output_length(T: int) -> int:
        t1 = (T - 3) // 2 + 1
        return (t1 - 3) // 2 + 1

    def forward(self, x: Tensor) -> Tensor:
        T, f = x.shape
        if f != self.feat_dim:
            raise ShapeError(f"subsample: feature dim {f} != configured {self.feat_dim}")
        if T < self.MIN_FRAMES:
            raise ShapeError(f"subsample: {T} frames < minimum {self.MIN_FRAMES}")
        h = nm.reshape(x, (T, f, 1))
        h = nm.relu(nm.conv2d_stride2(h, self.w1, self.b1))
        h = nm.relu(nm.conv2d_stride2(h, self.w2, self.b2))
        tp = h.shape[0]
        h = nm.reshape(h, (tp, self.f2 * self.channels))
        return self.proj.forward(h)


def positional_encoding(T: int, d: int) -> Tensor:
    """Absolute sinusoidal encoding: entry (t, 2i) = sin(t / 10000^(2i/d)),
    entry (t, 2i+1) = cos of the same argument. Deterministic, not learned."""
    if T < 1 or d < 1:
        raise ShapeError(f"positional_encoding: T={T}, d={d} must be >= 1")
    pe = np.zeros((T, d), dtype=np.float32)
    pos = np.arange(T, dtype=np.float64)[:, None]
    i2 = np.arange(0, d, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / d)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)[:, : pe[:, 1::2].shape[1]]
    return Tensor(pe)
