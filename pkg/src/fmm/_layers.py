"""Forward/backward kernels for the encoder.

Every ``*_forward`` returns ``(output, cache)`` and the matching
``*_backward`` consumes the upstream gradient and the cache, returning the
gradient with respect to the input plus a dict of parameter gradients.
Arrays are float64 throughout.
"""

import math

import numpy as np
from scipy.special import ndtr

LN_EPS = 1e-5
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def layer_norm_forward(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv_std
    return xhat * gain + bias, (xhat, inv_std, gain)


def layer_norm_backward(dy, cache):
    xhat, inv_std, gain = cache
    axes = tuple(range(dy.ndim - 1))
    dgain = (dy * xhat).sum(axis=axes)
    dbias = dy.sum(axis=axes)
    dxhat = dy * gain
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, {"g": dgain, "b": dbias}


def linear_forward(x, weight, bias):
    return x @ weight + bias, (x, weight)


def linear_backward(dy, cache):
    x, weight = cache
    h_in = x.shape[-1]
    dweight = x.reshape(-1, h_in).T @ dy.reshape(-1, dy.shape[-1])
    dbias = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    return dy @ weight.T, {"w": dweight, "b": dbias}


def gelu_forward(u):
    """Exact GELU, ``u * Phi(u)``."""
    cdf = ndtr(u)
    return u * cdf, (u, cdf)


def gelu_backward(dy, cache):
    u, cdf = cache
    return dy * (cdf + u * np.exp(-0.5 * u * u) * _INV_SQRT_2PI)


def attention_forward(x, p, num_heads, key_valid, queries=None):
    """Multi-head self-attention; ``key_valid`` is (n, T) and hides padding keys.

    ``queries`` (n, Tq, H) restricts the output rows to those query vectors;
    only the full form (``queries is None``) supports the backward pass.
    """
    n, T, H = x.shape
    dh = H // num_heads
    q, cq = linear_forward(x if queries is None else queries, p["wq"], p["bq"])
    k, ck = linear_forward(x, p["wk"], p["bk"])
    v, cv = linear_forward(x, p["wv"], p["bv"])

    def split(t):
        return t.reshape(n, t.shape[1], num_heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = split(q), split(k), split(v)
    scale = 1.0 / math.sqrt(dh)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    scores = np.where(key_valid[:, None, None, :], scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    ctx = (weights @ vh).transpose(0, 2, 1, 3).reshape(n, q.shape[1], H)
    out, co = linear_forward(ctx, p["wo"], p["bo"])
    return out, (cq, ck, cv, co, qh, kh, vh, weights, scale, num_heads)


def attention_backward(dy, cache):
    cq, ck, cv, co, qh, kh, vh, weights, scale, num_heads = cache
    n, T, H = dy.shape
    dh = H // num_heads
    dctx, go = linear_backward(dy, co)
    dctx = dctx.reshape(n, T, num_heads, dh).transpose(0, 2, 1, 3)
    dweights = dctx @ vh.transpose(0, 1, 3, 2)
    dvh = weights.transpose(0, 1, 3, 2) @ dctx
    dscores = weights * (dweights - (dweights * weights).sum(axis=-1, keepdims=True))
    dscores *= scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh

    def merge(t):
        return t.transpose(0, 2, 1, 3).reshape(n, T, H)

    dx_q, gq = linear_backward(merge(dqh), cq)
    dx_k, gk = linear_backward(merge(dkh), ck)
    dx_v, gv = linear_backward(merge(dvh), cv)
    grads = {
        "wq": gq["w"], "bq": gq["b"],
        "wk": gk["w"], "bk": gk["b"],
        "wv": gv["w"], "bv": gv["b"],
        "wo": go["w"], "bo": go["b"],
    }
    return dx_q + dx_k + dx_v, grads


def mlp_forward(x, p):
    u, c1 = linear_forward(x, p["w1"], p["b1"])
    g, cg = gelu_forward(u)
    out, c2 = linear_forward(g, p["w2"], p["b2"])
    return out, (c1, cg, c2)


def mlp_backward(dy, cache):
    c1, cg, c2 = cache
    dg, g2 = linear_backward(dy, c2)
    du = gelu_backward(dg, cg)
    dx, g1 = linear_backward(du, c1)
    return dx, {"w1": g1["w"], "b1": g1["b"], "w2": g2["w"], "b2": g2["b"]}


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)
