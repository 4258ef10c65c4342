"""Pure numpy implementations of the hot kernels.

These are the reference versions; the compiled module ``_ckernels`` must
agree with them exactly.
"""
import numpy as np


def segment_sum(values, segment_of, n_segments):
    values = np.ascontiguousarray(values, dtype=np.float64)
    seg = np.ascontiguousarray(segment_of, dtype=np.int64)
    out = np.zeros((n_segments,) + values.shape[1:], dtype=np.float64)
    np.add.at(out, seg, values)
    return out


def segment_max(values, segment_of, n_segments):
    """Per-segment maximum; empty segments are filled with 0."""
    values = np.ascontiguousarray(values, dtype=np.float64)
    seg = np.ascontiguousarray(segment_of, dtype=np.int64)
    out = np.full((n_segments,) + values.shape[1:], -np.inf)
    np.maximum.at(out, seg, values)
    out[np.isneginf(out)] = 0.0
    return out


def knn(points, k, chunk=512):
    """Indices of the k nearest neighbours of every point (self excluded).

    Ties in distance go to the lower index. Returns an (N, k) int64 array,
    each row ordered by increasing (distance, index).
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    n = pts.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    idx = np.arange(n)
    for start in range(0, n, chunk):
        block = pts[start:start + chunk]
        d2 = ((block[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        rows = np.arange(block.shape[0])
        d2[rows, idx[start:start + chunk]] = np.inf
        # stable sort keeps lower index first among equal distances
        order = np.argsort(d2, axis=1, kind="stable")
        out[start:start + chunk] = order[:, :k]
    return out


def _per_head(x, n_heads):
    return x.reshape(x.shape[0], n_heads, -1)


def attention_forward(q, k, v, etab, etype, src, dst, n_heads):
    """Edge-featured scaled dot-product attention aggregated at destinations.

    Edge a = (j -> i) carries the vector ``e_a = etab[etype[a]]``.
    ``out[i] = sum_a alpha_a (v[j] + e_a)`` with ``alpha_a`` the softmax over
    edges into i of ``q[i].(k[j] + e_a) / sqrt(d_head)``, per head.
    Returns (out, alpha) with alpha of shape (E, n_heads).
    """
    n, d = q.shape
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    e = etab[np.asarray(etype, dtype=np.int64)]
    scale = 1.0 / np.sqrt(d // n_heads)
    key = _per_head(k[src] + e, n_heads)
    logits = (_per_head(q[dst], n_heads) * key).sum(axis=2) * scale
    shifted = logits - segment_max(logits, dst, n)[dst]
    w = np.exp(shifted)
    alpha = w / segment_sum(w, dst, n)[dst]
    msg = _per_head(v[src] + e, n_heads) * alpha[:, :, None]
    return segment_sum(msg.reshape(len(src), d), dst, n), alpha


def attention_backward(g, q, k, v, etab, etype, alpha, src, dst, n_heads):
    """Gradients (dq, dk, dv, detab) of ``attention_forward`` given d out = g."""
    n, d = q.shape
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    etype = np.asarray(etype, dtype=np.int64)
    e = etab[etype]
    scale = 1.0 / np.sqrt(d // n_heads)
    g_e = _per_head(g[dst], n_heads)
    val = _per_head(v[src] + e, n_heads)
    d_val = (g_e * alpha[:, :, None]).reshape(len(src), d)
    d_alpha = (g_e * val).sum(axis=2)
    dot = segment_sum(alpha * d_alpha, dst, n)[dst]
    d_logit = alpha * (d_alpha - dot) * scale
    key = _per_head(k[src] + e, n_heads)
    d_q_e = (key * d_logit[:, :, None]).reshape(len(src), d)
    d_key = (_per_head(q[dst], n_heads) * d_logit[:, :, None]).reshape(len(src), d)
    dq = segment_sum(d_q_e, dst, n)
    dk = segment_sum(d_key, src, n)
    dv = segment_sum(d_val, src, n)
    detab = segment_sum(d_val + d_key, etype, etab.shape[0])
    return dq, dk, dv, detab
