"""Cross-information fusion: combine the general and accent encoder output
sequences into one sequence of the same shape.

Three operators are provided: elementwise addition, feature-axis
concatenation followed by a learned projection back to d_model, and a
two-layer cross-attention. The cross-attention layer 1 takes queries from the
accent sequence against general keys/values; layer 2 takes queries from that
intermediate against accent keys/values. Each layer applies a ReLU after the
attention-weighted value sum, with logits scaled by exactly 1/sqrt(d_att).
"""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nm
from .layers import Linear, Module, xavier
from .numerics import ShapeError, Tensor

FUSION_KINDS = ("add", "concat", "cross_attention")


def _check_pair(xg: Tensor, xa: Tensor):
    if xg.shape != xa.shape:
        raise ShapeError(f"fusion inputs must have identical shapes, got {xg.shape} and {xa.shape}")


class AddFusion(Module):
    kind = "add"

    def forward(self, xg: Tensor, xa: Tensor) -> Tensor:
        _check_pair(xg, xa)
        return xg + xa


class ConcatFusion(Module):
    """Concatenate along the feature axis, then project 2*d_model -> d_model.

    Special weights recover the other fusions: projection [I; 0] selects the
    general sequence, [I; I] reduces to addition.
    """

    kind = "concat"

    def __init__(self, d_model: int, rng: np.random.Generator):
        self.proj = Linear(2 * d_model, d_model, rng)
        self.d_model = d_model

    def forward(self, xg: Tensor, xa: Tensor) -> Tensor:
        _check_pair(xg, xa)
        return self.proj.forward(nm.concat([xg, xa], axis=1))


class CrossAttentionLayer(Module):
    """Single-head cross-attention: Relu(Softmax(Q Kᵀ / sqrt(d_att)) V).

    Query/key projections map d_model -> d_att; the value projection maps to
    d_model so the output feeds the decoder directly. Projections are bare
    matrices (no bias).
    """

    def __init__(self, d_model: int, d_att: int, rng: np.random.Generator):
        if d_att <= 0:
            raise ShapeError(f"d_att must be positive, got {d_att}")
        self.wq = Tensor(xavier(rng, d_model, d_att), requires_grad=True)
        self.wk = Tensor(xavier(rng, d_model, d_att), requires_grad=True)
        self.wv = Tensor(xavier(rng, d_model, d_model), requires_grad=True)
        self.d_att = d_att

    def forward(self, query_src: Tensor, kv_src: Tensor, return_weights: bool = False):
        q = nm.matmul(query_src, self.wq)
        k = nm.matmul(kv_src, self.wk)
        v = nm.matmul(kv_src, self.wv)
        scores = nm.mul(nm.matmul(q, nm.transpose(k)), 1.0 / math.sqrt(self.d_att))
        weights = nm.softmax(scores, axis=-1)
        out = nm.relu(nm.matmul(weights, v))
        if return_weights:
            return out, weights
        return out


class CrossAttentionFusion(Module):
    kind = "cross_attention"

    def __init__(self, d_model: int, d_att: int, rng: np.random.Generator):
        self.layer1 = CrossAttentionLayer(d_model, d_att, rng)
        self.layer2 = CrossAttentionLayer(d_model, d_att, rng)

    def forward(self, xg: Tensor, xa: Tensor, return_weights: bool = False):
        _check_pair(xg, xa)
        xm, w1 = self.layer1.forward(xa, xg, return_weights=True)
        xf, w2 = self.layer2.forward(xm, xa, return_weights=True)
        if return_weights:
            return xf, (w1, w2)
        return xf


def build_fusion(kind: str, d_model: int, d_att: int, rng: np.random.Generator) -> Module:
    if kind == "add":
        return AddFusion()
    if kind == "concat":
        return ConcatFusion(d_model, rng)
    if kind == "cross_attention":
        return CrossAttentionFusion(d_model, d_att, rng)
    raise ValueError(f"unknown fusion kind: {kind!r} (expected one of {FUSION_KINDS})")
