"""The four attention mechanisms: feature-level, scaled dot-product multi-head
(with optional causal mask), and the intra-modal / inter-modal / masked /
target-modal block wiring they compose into.

All functions are pure over tensors and accept either single sequences
[T x d] or batches [B x T x d]; masks broadcast over leading axes. An
optional `sink` callback receives detached attention matrices for export.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import DimensionError, MaskingError
from .numerics import Tensor

# Additive logit for disallowed positions. Large enough that exp() underflows
# to exactly 0 after max subtraction, without producing inf/NaN in softmax.
MASK_LOGIT = -1e9


@dataclass
class FeatureAttentionParams:
    """Pointwise feature map (square kernel over the feature axis) plus bias."""

    kernel: Tensor  # [d x d]
    bias: Tensor  # [d]

    @property
    def dim(self):
        return self.kernel.shape[0]


@dataclass
class MHAParams:
    """Per-head projection matrices and the shared output projection.

    wq/wk/wv hold one [d_model x d_head] matrix per head; wo maps the
    concatenated head outputs [h*d_v] back to d_model.
    """

    wq: list
    wk: list
    wv: list
    wo: Tensor

    @property
    def heads(self):
        return len(self.wq)


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class FFNParams:
    """Two-layer position-wise network with ReLU between."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class AttentionOutput:
    values: Tensor  # [.. x L_q x d_model]
    weights: Tensor  # detached post-softmax matrices, [.. x h x L_q x L_kv]


def feature_level_attention(x, params: FeatureAttentionParams):
    """Per-timestep softmax over the feature axis of a pointwise map of x.

    Returns (weights, weighted) where weighted = weights * x elementwise.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    d = params.dim
    if x.shape[-1] != d:
        raise DimensionError(
            f"feature attention kernel is {params.kernel.shape} but input has {x.shape[-1]} features ({x.shape})"
        )
    logits = nm.matmul(x, params.kernel) + params.bias
    weights = nm.softmax(logits, axis=-1)
    weighted = weights * x
    return weights, weighted


def causal_mask(length: int) -> np.ndarray:
    """Boolean [L x L] mask, True where a query may attend (no future keys)."""
    return np.tril(np.ones((length, length), dtype=bool))


def scaled_dot_product(q, k, v, mask=None, dropout_rng=None, dropout_rate=0.0):
    """softmax(Q K^T / sqrt(d_k) + mask) V.

    mask is boolean with True marking attendable positions; masked entries get
    an additive -1e9 logit, which yields exactly-zero weight after softmax.
    Raises MaskingError if any query row is left with no attendable key.
    """
    q = q if isinstance(q, Tensor) else Tensor(q)
    k = k if isinstance(k, Tensor) else Tensor(k)
    v = v if isinstance(v, Tensor) else Tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query dim {q.shape} does not match key dim {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key length {k.shape} does not match value length {v.shape}")
    d_k = q.shape[-1]
    logits = nm.matmul(q, nm.transpose_last(k)) * (1.0 / math.sqrt(d_k))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any(axis=-1).all():
            raise MaskingError("attention mask leaves at least one query row fully masked")
        logits = logits + Tensor(np.where(mask, 0.0, MASK_LOGIT).astype(np.float32))
    attn = nm.softmax(logits, axis=-1)
    attn_used = nm.dropout(attn, dropout_rate, dropout_rng)
    out = nm.matmul(attn_used, v)
    return out, attn


def multi_head(q_in, k_in, v_in, params: MHAParams, mask=None, dropout_rng=None, dropout_rate=0.0):
    """Project into each head, run scaled dot-product attention, concatenate.

    Query length may differ from key/value length; key and value lengths must
    agree. Returns AttentionOutput with values [.. x L_q x d_model] and the
    per-head post-softmax weights stacked on a new axis before the query axis.
    """
    q_in = q_in if isinstance(q_in, Tensor) else Tensor(q_in)
    k_in = k_in if isinstance(k_in, Tensor) else Tensor(k_in)
    v_in = v_in if isinstance(v_in, Tensor) else Tensor(v_in)
    if not (q_in.shape[-1] == k_in.shape[-1] == v_in.shape[-1]):
        raise DimensionError(
            f"multi_head inputs must share d_model: {q_in.shape}, {k_in.shape}, {v_in.shape}"
        )
    outs = []
    attns = []
    for wq, wk, wv in zip(params.wq, params.wk, params.wv):
        out_p, attn_p = scaled_dot_product(
            nm.matmul(q_in, wq),
            nm.matmul(k_in, wk),
            nm.matmul(v_in, wv),
            mask=mask,
            dropout_rng=dropout_rng,
            dropout_rate=dropout_rate,
        )
        outs.append(out_p)
        attns.append(attn_p.data)
    values = nm.matmul(nm.concat(outs, axis=-1), params.wo)
    weights = Tensor(np.stack(attns, axis=-3))
    return AttentionOutput(values=values, weights=weights)


def _record(sink, key, attention_output):
    if sink is not None:
        sink(key, attention_output.weights.data)


def intra_modal_block(x, mha: MHAParams, ln: LayerNormParams, dropout_rng=None,
                      dropout_rate=0.0, sink=None, key=None):
    """Self-attention within one stream, residual, then layer norm."""
    att = multi_head(x, x, x, mha, dropout_rng=dropout_rng, dropout_rate=dropout_rate)
    _record(sink, key, att)
    return nm.layer_norm(x + att.values, ln.gain, ln.bias)


def apply_ffn(x, ffn: FFNParams, dropout_rng=None, dropout_rate=0.0):
    hidden = nm.relu(nm.matmul(x, ffn.w1) + ffn.b1)
    hidden = nm.dropout(hidden, dropout_rate, dropout_rng)
    return nm.matmul(hidden, ffn.w2) + ffn.b2


def inter_modal_block(z_kv, z_q, mha: MHAParams, ln_attn: LayerNormParams, ffn: FFNParams,
                      ln_ffn: LayerNormParams, dropout_rng=None, dropout_rate=0.0,
                      sink=None, key=None):
    """Cross-stream exchange: queries from the other stream, keys/values local.

    Output length follows the query stream. The attention residual is taken
    against the query stream (the only shape-consistent choice when the two
    streams have different lengths), then a two-layer ReLU FFN with its own
    residual and layer norm.
    """
    att = multi_head(z_q, z_kv, z_kv, mha, dropout_rng=dropout_rng, dropout_rate=dropout_rate)
    _record(sink, key, att)
    z = nm.layer_norm(z_q + att.values, ln_attn.gain, ln_attn.bias)
    out = nm.layer_norm(z + apply_ffn(z, ffn, dropout_rng, dropout_rate), ln_ffn.gain, ln_ffn.bias)
    return out


def masked_self_block(y, mha: MHAParams, ln: LayerNormParams, dropout_rng=None,
                      dropout_rate=0.0, sink=None, key=None):
    """Causally masked self-attention with residual and layer norm."""
    length = y.shape[-2]
    att = multi_head(y, y, y, mha, mask=causal_mask(length),
                     dropout_rng=dropout_rng, dropout_rate=dropout_rate)
    _record(sink, key, att)
    return nm.layer_norm(y + att.values, ln.gain, ln.bias)


def target_modal_block(q_state, enc_out, feat_params: FeatureAttentionParams, mha: MHAParams,
                       dropout_rng=None, dropout_rate=0.0, sink=None, key=None):
    """Cross-attention from the target stream onto one encoder stream.

    The encoder output is first feature-weighted (its own feature-level
    attention), then attended with queries from the decoder state.
    """
    _, weighted = feature_level_attention(enc_out, feat_params)
    att = multi_head(q_state, weighted, weighted, mha,
                     dropout_rng=dropout_rng, dropout_rate=dropout_rate)
    _record(sink, key, att)
    return att
