"""
Parameterised building blocks shared by the tabular encoder and the fusion block:
masked multi-head attention, the GELU feed-forward block and layer norm.
Parameters live in a ParameterStore under a name prefix; the forward functions
take the dict returned by ParameterStore.bind().
"""
import math

import numpy as np

from services import tensor_engine as te


def init_linear(params, name, d_in, d_out, rng):
    params.add(name + 'W', te.uniform_init(rng, (d_in, d_out), d_in))
    params.add(name + 'b', np.zeros(d_out))


def init_layer_norm(params, name, d):
    params.add(name + 'g', np.ones(d))
    params.add(name + 'b', np.zeros(d))


def init_attention(params, prefix, d, rng):
    for part in ('q', 'k', 'v', 'o'):
        init_linear(params, f"{prefix}{part}.", d, d, rng)


def init_ffn(params, prefix, d, d_ff, rng):
    init_linear(params, prefix + 'fc1.', d, d_ff, rng)
    init_linear(params, prefix + 'fc2.', d_ff, d, rng)


def layer_norm(p, name, x, eps):
    return te.layer_norm(x, p[name + 'g'], p[name + 'b'], eps)


def dense(p, name, x):
    return te.linear(x, p[name + 'W'], p[name + 'b'])


def ffn(p, prefix, x):
    return dense(p, prefix + 'fc2.', te.gelu(dense(p, prefix + 'fc1.', x)))


def _split_heads(x, heads):
    b, t, d = x.shape
    return te.transpose(te.reshape(x, (b, t, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, t, dh = x.shape
    return te.reshape(te.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def multi_head_attention(p, prefix, queries, keys, valid, heads, allow_all_masked=False):
    """
    Scaled dot-product attention of queries (B, Tq, d) over keys (B, Tk, d).

    valid (B, Tk) marks the keys that may be attended to. Invalid keys get
    exactly zero weight and their value rows are zeroed before mixing, so they
    cannot reach any output. Returns (output Tensor, attention weights array).
    """
    valid = np.asarray(valid, dtype=bool)
    b, _, d = queries.shape
    dh = d // heads
    q = _split_heads(dense(p, prefix + 'q.', queries), heads)
    k = _split_heads(dense(p, prefix + 'k.', keys), heads)
    v = dense(p, prefix + 'v.', keys) * valid[:, :, None].astype(np.float64)
    v = _split_heads(v, heads)

    scores = te.matmul(q, te.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = te.softmax_masked(scores, valid[:, None, None, :], allow_all_masked=allow_all_masked)
    out = _merge_heads(te.matmul(attn, v))
    return dense(p, prefix + 'o.', out), attn.data
