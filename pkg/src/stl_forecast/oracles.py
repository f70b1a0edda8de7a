"""Straight-line reference implementations.

Plain Python loops over numpy scalars, sharing no code with the tensor
engine. Tests and ``selfcheck`` compare the layers against these.
"""
from __future__ import annotations

import math

import numpy as np


def linear(x, weight, bias):
    """Rows of x (..., in) mapped by weight (out, in) and bias (out,)."""
    x = np.asarray(x, dtype=float)
    flat = x.reshape(-1, x.shape[-1])
    out = np.zeros((flat.shape[0], weight.shape[0]))
    for r in range(flat.shape[0]):
        for o in range(weight.shape[0]):
            acc = bias[o]
            for i in range(weight.shape[1]):
                acc += flat[r, i] * weight[o, i]
            out[r, o] = acc
    return out.reshape(x.shape[:-1] + (weight.shape[0],))


def silu(v):
    return v / (1.0 + math.exp(-v)) if v >= 0 else v * math.exp(v) / (1.0 + math.exp(v))


def leaky_relu(v, alpha=0.01):
    return v if v > 0 else alpha * v


def res_l(x, p, activation="silu", alpha=0.01):
    """p maps l1/l2/l3 to (weight, bias)."""
    act = silu if activation == "silu" else (lambda v: leaky_relu(v, alpha))
    skip = linear(x, *p["l1"])
    h = linear(x, *p["l2"])
    h = np.vectorize(act)(h)
    return skip + linear(h, *p["l3"])


def positional_encoding(T, C):
    pe = np.zeros((T, C))
    for p in range(T):
        for i in range((C + 1) // 2):
            div = 10000.0 ** (2 * i / C)
            pe[p, 2 * i] = math.sin(p / div)
            if 2 * i + 1 < C:
                pe[p, 2 * i + 1] = math.cos(p / div)
    return pe


def datetime_features(tables, reducer_w, reducer_b, stamps, components):
    """One scalar per step: reducer applied to concatenated table rows."""
    stamps = np.asarray(stamps)
    out = np.zeros(stamps.shape[0])
    for t in range(stamps.shape[0]):
        vec = []
        for k, comp in enumerate(components):
            vec.extend(tables[comp][int(stamps[t, k])])
        acc = reducer_b[0]
        for j, v in enumerate(vec):
            acc += reducer_w[0, j] * v
        out[t] = acc
    return out


def minmax(v):
    v = np.asarray(v, dtype=float)
    lo, hi = min(v), max(v)
    if hi == lo:
        return np.zeros_like(v)
    return np.array([(a - lo) / (hi - lo) for a in v])


def spatial_attention(x, axis="rows"):
    """x (C, tau): x + sum_i W[i, :]^T x[i] with W = softmax(tanh(x) tanh(x)^T)."""
    x = np.asarray(x, dtype=float)
    C, tau = x.shape
    s = [[math.tanh(x[c, t]) for t in range(tau)] for c in range(C)]
    inter = [[sum(s[i][t] * s[j][t] for t in range(tau)) for j in range(C)] for i in range(C)]
    w = [[0.0] * C for _ in range(C)]
    if axis == "rows":
        for i in range(C):
            m = max(inter[i])
            e = [math.exp(v - m) for v in inter[i]]
            z = sum(e)
            for j in range(C):
                w[i][j] = e[j] / z
    else:
        for j in range(C):
            col = [inter[i][j] for i in range(C)]
            m = max(col)
            e = [math.exp(v - m) for v in col]
            z = sum(e)
            for i in range(C):
                w[i][j] = e[i] / z
    out = x.copy()
    for i in range(C):
        for j in range(C):
            for t in range(tau):
                out[j, t] += w[i][j] * x[i, t]
    return out


def moving_average(x, kernel):
    """Centered moving average of a 1-D series with replicated end values."""
    x = list(np.asarray(x, dtype=float))
    half = (kernel - 1) // 2
    padded = [x[0]] * half + x + [x[-1]] * half
    return np.array([sum(padded[t : t + kernel]) / kernel for t in range(len(x))])


def _block(params, prefix):
    return {k: (params[f"{prefix}.{k}.weight"], params[f"{prefix}.{k}.bias"]) for k in ("l1", "l2", "l3")}


def stl(params, config, x, obs_stamps=None, target_stamps=None):
    """Single-window STL forward from a flat name -> array parameter dict.

    x is (T, C); returns (tau, C). Eval mode, shared-weight linears only.
    """
    x = np.asarray(x, dtype=float)
    xt = x.T  # (C, T)
    act = config.activation
    total = np.zeros((config.C, config.tau))
    pe = positional_encoding(config.T, config.C).T
    if "core" in config.routes:
        total += res_l(xt, _block(params, "core"), act)
    if "temporal" in config.routes and config.T <= config.theta_T:
        comps = config.datetime_components
        tables = {c: params[f"dt_embed.tables.{c}"] for c in comps}
        rw, rb = params["dt_embed.reducer.weight"], params["dt_embed.reducer.bias"]

        def coder(h, stamps, prefix):
            f = minmax(datetime_features(tables, rw, rb, stamps, comps))
            m = params[f"{prefix}.m"][0]
            gated = np.array([[h[c, t] + m * f[t] for t in range(h.shape[1])] for c in range(h.shape[0])])
            return res_l(gated, _block(params, f"{prefix}.inner"), act)

        h = coder(xt + pe, obs_stamps, "encoder")
        h = res_l(h, _block(params, "mid1"), act)
        h = res_l(h, _block(params, "mid2"), act)
        total += coder(h, target_stamps, "decoder")
    if "spatial" in config.routes:
        h = res_l(xt + pe, _block(params, "pre1"), act)
        h = res_l(h, _block(params, "pre2"), act)
        h = spatial_attention(h, config.attn_axis)
        total += res_l(h, _block(params, "post"), act)
    return total.T
