"""General (Conformer) and accent encoders.

Both encoders consume the same subsampled, positionally-encoded frontend
output and must produce sequences of identical shape: that is the contract
every fusion operator relies on. The accent encoder is deliberately the
smaller network of the two.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .layers import FeedForward, LayerNorm, Module, MultiHeadAttention, ConvModule, LSTM, Linear
from .numerics import ShapeError, Tensor


class ConformerBlock(Module):
    """One Conformer block:

        x1 = x  + 1/2 FFN1(x)
        x2 = x1 + MHSA(x1)
        x3 = x2 + Conv(x2)
        x4 = x3 + 1/2 FFN2(x3)
        y  = Layernorm(x4)

    The half-step coefficients on both feed-forward residuals are part of the
    contract (see tests). With all sublayer parameters zero, every residual
    passes x through unchanged and y == Layernorm(x).
    """

    def __init__(self, d_model: int, n_heads: int, d_ff: int, conv_kernel: int,
                 dropout: float, rng: np.random.Generator):
        self.ffn1 = FeedForward(d_model, d_ff, dropout, rng)
        self.mhsa = MultiHeadAttention(d_model, n_heads, rng)
        self.conv = ConvModule(d_model, conv_kernel, rng)
        self.ffn2 = FeedForward(d_model, d_ff, dropout, rng)
        self.norm = LayerNorm(d_model)
        self.dropout = dropout
        self.d_model = d_model

    def forward(self, x: Tensor, train: bool = False, rng: np.random.Generator | None = None,
                return_prenorm: bool = False):
        if x.shape[-1] != self.d_model:
            raise ShapeError(f"conformer block: input dim {x.shape[-1]} != d_model {self.d_model}")

        def drop(t):
            return nm.dropout(t, self.dropout, rng) if train else t

        x1 = x + nm.mul(drop(self.ffn1.forward(x, train, rng)), 0.5)
        x2 = x1 + drop(self.mhsa.forward(x1, x1))
        x3 = x2 + drop(self.conv.forward(x2))
        x4 = x3 + nm.mul(drop(self.ffn2.forward(x3, train, rng)), 0.5)
        y = self.norm.forward(x4)
        if return_prenorm:
            return y, x4
        return y


class GeneralEncoder(Module):
    """Stack of Conformer blocks; the accent-invariant context encoder."""

    def __init__(self, n_blocks: int, d_model: int, n_heads: int, d_ff: int,
                 conv_kernel: int, dropout: float, rng: np.random.Generator):
        self.blocks = [ConformerBlock(d_model, n_heads, d_ff, conv_kernel, dropout, rng)
                       for _ in range(n_blocks)]
        self.d_model = d_model

    def forward(self, x: Tensor, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        for block in self.blocks:
            x = block.forward(x, train, rng)
        return x


class TransformerEncoderLayer(Module):
    """Plain post-norm transformer encoder layer (MHSA + FFN)."""

    def __init__(self, d_model: int, n_heads: int, d_ff: int, dropout: float,
                 rng: np.random.Generator):
        self.mhsa = MultiHeadAttention(d_model, n_heads, rng)
        self.norm1 = LayerNorm(d_model)
        self.ffn = FeedForward(d_model, d_ff, dropout, rng)
        self.norm2 = LayerNorm(d_model)
        self.dropout = dropout

    def forward(self, x: Tensor, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        def drop(t):
            return nm.dropout(t, self.dropout, rng) if train else t

        x = self.norm1.forward(x + drop(self.mhsa.forward(x, x)))
        x = self.norm2.forward(x + drop(self.ffn.forward(x, train, rng)))
        return x


class TransformerAccentEncoder(Module):
    """Accent encoder, transformer kind: N plain encoder layers."""

    kind = "transformer"

    def __init__(self, n_layers: int, d_model: int, n_heads: int, d_ff: int,
                 dropout: float, rng: np.random.Generator):
        self.layers = [TransformerEncoderLayer(d_model, n_heads, d_ff, dropout, rng)
                       for _ in range(n_layers)]
        self.d_model = d_model

    def forward(self, x: Tensor, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x, train, rng)
        return x


class RecurrentAccentEncoder(Module):
    """Accent encoder, recurrent kind: stacked LSTM plus a linear projection
    back to d_model so the fusion shape contract holds for any hidden size."""

    kind = "recurrent"

    def __init__(self, n_layers: int, d_model: int, hidden: int, rng: np.random.Generator):
        self.lstm = LSTM(d_model, hidden, n_layers, rng)
        self.proj = Linear(hidden, d_model, rng)
        self.d_model = d_model

    def forward(self, x: Tensor, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return self.proj.forward(self.lstm.forward(x))


def build_accent_encoder(kind: str, depth: int, d_model: int, n_heads: int,
                         d_ff: int, lstm_hidden: int, dropout: float,
                         rng: np.random.Generator) -> Module:
    if kind == "transformer":
        return TransformerAccentEncoder(depth, d_model, n_heads, d_ff, dropout, rng)
    if kind == "lstm":
        return RecurrentAccentEncoder(depth, d_model, lstm_hidden, rng)
    raise ValueError(f"unknown accent encoder kind: {kind!r} (expected 'transformer' or 'lstm')")
