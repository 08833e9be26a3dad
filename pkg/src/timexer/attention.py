"""Multi-head attention sublayers and the TimeXer block.

Block parameters under ``blocks.<l>``::

    self_attn.{wq,wk,wv,wo}   [D, D]
    cross_attn.{wq,wk,wv,wo}  [D, D]
    ffn.w1 [D, D_ff], ffn.b1 [D_ff], ffn.w2 [D_ff, D], ffn.b2 [D]
    ln1, ln2, ln3 .{gamma,beta} [D]

Attention projections carry no bias. All sublayers are post-norm
(residual add, then LayerNorm).
"""

import math

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError


def _split_heads(x, heads):
    *lead, t, d = x.shape
    x = ad.reshape(x, tuple(lead) + (t, heads, d // heads))
    return ad.swapaxes(x, -2, -3)


def _merge_heads(x):
    x = ad.swapaxes(x, -2, -3)
    *lead, t, h, hd = x.shape
    return ad.reshape(x, tuple(lead) + (t, h * hd))


def multi_head_attention(queries, keys_values, params, prefix, heads, dropout=0.0, rng=None):
    """Scaled dot-product attention with ``heads`` heads.

    ``queries [..., Tq, D]``, ``keys_values [..., Tk, D]``. Returns the output
    ``[..., Tq, D]`` and the attention weights ``[..., H, Tq, Tk]`` (a numpy
    array, before dropout).
    """
    queries, keys_values = ad._as_tensor(queries), ad._as_tensor(keys_values)
    wq, wk, wv, wo = (params[f"{prefix}.{k}"] for k in ("wq", "wk", "wv", "wo"))
    d = wq.shape[0]
    if queries.shape[-1] != d or keys_values.shape[-1] != d:
        raise ShapeError(
            f"attention width {d} does not match queries {list(queries.shape)} "
            f"/ keys {list(keys_values.shape)}"
        )
    if d % heads:
        raise ConfigError(f"model dim {d} is not divisible by {heads} heads")
    q = _split_heads(queries @ wq, heads)
    k = _split_heads(keys_values @ wk, heads)
    v = _split_heads(keys_values @ wv, heads)
    scores = (q @ ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d // heads))
    weights = ad.softmax_lastdim(scores)
    attended = ad.dropout(weights, dropout, rng) @ v
    return _merge_heads(attended) @ wo, weights.data


def multi_head_self_attention(tokens, params, prefix, heads, dropout=0.0, rng=None):
    """Full bidirectional attention among the endogenous tokens."""
    return multi_head_attention(tokens, tokens, params, prefix, heads, dropout, rng)


def multi_head_cross_attention(query, keys_values, params, prefix, heads, dropout=0.0, rng=None):
    """Endogenous variate token ``[..., 1, D]`` attending over exogenous tokens ``[..., C, D]``."""
    if np.shape(keys_values)[-2] == 0:
        raise ConfigError("forecasting with exogenous variables requires >=1 exogenous series")
    return multi_head_attention(query, keys_values, params, prefix, heads, dropout, rng)


def feed_forward(tokens, params, prefix, dropout=0.0, rng=None):
    tokens = ad._as_tensor(tokens)
    hidden = ad.gelu(tokens @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"])
    return ad.dropout(hidden, dropout, rng) @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]


def _norm(x, params, prefix):
    return ad.layer_norm(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"])


def timexer_block(
    endo_tokens,
    exo_tokens,
    params,
    prefix,
    heads,
    dropout=0.0,
    rng=None,
    use_ffn=True,
    variate_token=True,
    capture=None,
):
    """One block over ``endo_tokens [..., T, D]`` with exogenous ``exo_tokens [..., C, D]``.

    With ``variate_token`` (the default layout) the last row is the endogenous
    variate token: self-attention runs over all rows, cross-attention updates
    only the last row, then the feed-forward runs over all rows. Without it
    (the "w/o V" ablation) the mean patch token is the cross-attention query
    and the attended vector is added to every row.

    When ``capture`` is a dict, the attention weights of this block are stored
    under ``"self"`` and ``"cross"``; ``"post_self"`` and ``"post_cross"``
    hold the token states around the cross-attention sublayer.
    """
    endo_tokens, exo_tokens = ad._as_tensor(endo_tokens), ad._as_tensor(exo_tokens)
    attn, self_w = multi_head_self_attention(
        endo_tokens, params, f"{prefix}.self_attn", heads, dropout, rng
    )
    h = _norm(endo_tokens + attn, params, f"{prefix}.ln1")

    if variate_token:
        n = h.shape[-2] - 1
        patches, query = h[..., :n, :], h[..., n:, :]
        attn, cross_w = multi_head_cross_attention(
            query, exo_tokens, params, f"{prefix}.cross_attn", heads, dropout, rng
        )
        query = _norm(query + attn, params, f"{prefix}.ln2")
        h2 = ad.concat([patches, query], axis=-2)
    else:
        query = ad.mean(h, axis=-2, keepdims=True)
        attn, cross_w = multi_head_cross_attention(
            query, exo_tokens, params, f"{prefix}.cross_attn", heads, dropout, rng
        )
        h2 = _norm(h + attn, params, f"{prefix}.ln2")

    if capture is not None:
        capture.update(self=self_w, cross=cross_w, post_self=h.data, post_cross=h2.data)

    if not use_ffn:
        return h2
    return _norm(h2 + feed_forward(h2, params, f"{prefix}.ffn", dropout, rng), params, f"{prefix}.ln3")
