"""Dense float64 kernels with a fixed left-to-right reduction order.

Every reduction here runs strictly left to right, so results are
bit-reproducible and each output row depends only on its own input row.
BLAS-backed matmul guarantees neither property, and the bitwise
prefix-isolation invariants elsewhere in the package rely on both.
No kernel uses fastmath; float semantics are strict IEEE-754 binary64.
"""

from __future__ import annotations

import numpy as np
from numba import njit

__all__ = [
    "matmul",
    "masked_softmax_rows",
    "rmsnorm",
    "argmax_tiebreak_low",
    "gelu",
]

# tanh-approximation GELU constants: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))
GELU_C = 0.7978845608028654  # sqrt(2/pi)
GELU_A = 0.044715


def _as_matrix(a, name: str) -> np.ndarray:
    m = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    return m


@njit(cache=True)
def _matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for t in range(k):
            ait = a[i, t]
            for j in range(n):
                out[i, j] += ait * b[t, j]
    return out


@njit(cache=True)
def _linear_routed(x, w_main, w_alt, route):
    r, din = x.shape
    dout = w_main.shape[1]
    out = np.zeros((r, dout), dtype=np.float64)
    for i in range(r):
        if route[i] == 0:
            w = w_main
        else:
            w = w_alt
        for t in range(din):
            xv = x[i, t]
            for j in range(dout):
                out[i, j] += xv * w[t, j]
    return out


@njit(cache=True)
def _rmsnorm_rows(x, gain, eps):
    r, d = x.shape
    out = np.empty((r, d), dtype=np.float64)
    inv = np.empty(r, dtype=np.float64)
    for i in range(r):
        s = 0.0
        for j in range(d):
            s += x[i, j] * x[i, j]
        ir = 1.0 / np.sqrt(s / d + eps)
        inv[i] = ir
        for j in range(d):
            out[i, j] = x[i, j] * ir * gain[j]
    return out, inv


@njit(cache=True)
def _gelu_rows(x):
    r, d = x.shape
    out = np.empty((r, d), dtype=np.float64)
    for i in range(r):
        for j in range(d):
            v = x[i, j]
            u = GELU_C * (v + GELU_A * v * v * v)
            out[i, j] = 0.5 * v * (1.0 + np.tanh(u))
    return out


@njit(cache=True)
def _rope_rows(x, pos, inv_freq):
    # x: (rows, heads, head_dim); rotates adjacent pairs (2j, 2j+1) by pos*inv_freq[j]
    r, h, hd = x.shape
    half = hd // 2
    out = np.empty((r, h, hd), dtype=np.float64)
    for i in range(r):
        p = pos[i]
        for j in range(half):
            ang = p * inv_freq[j]
            c = np.cos(ang)
            s = np.sin(ang)
            for q in range(h):
                a = x[i, q, 2 * j]
                b = x[i, q, 2 * j + 1]
                out[i, q, 2 * j] = a * c - b * s
                out[i, q, 2 * j + 1] = a * s + b * c
    return out


@njit(cache=True)
def _attention_rows(q, kc, vc, kf, vf, vis_cache, vis_rows, scale):
    """Per-row gathered attention over [cache positions, in-forward rows].

    Accumulation order per query row is: cache entries ascending, then
    in-forward rows ascending. Invisible entries are never touched, so a
    row's output is bit-identical whatever other rows exist in the forward.
    Returns (out, probs, n_empty) where probs holds the normalized weights
    laid out as [cache | rows] and n_empty counts fully-masked query rows.
    """
    r, h, hd = q.shape
    c = kc.shape[0]
    out = np.zeros((r, h, hd), dtype=np.float64)
    probs = np.zeros((r, h, c + r), dtype=np.float64)
    n_empty = 0
    for i in range(r):
        row_empty = True
        for j in range(c):
            if vis_cache[i, j]:
                row_empty = False
                break
        if row_empty:
            for j in range(r):
                if vis_rows[i, j]:
                    row_empty = False
                    break
        if row_empty:
            n_empty += 1
            continue
        for hh in range(h):
            m = -np.inf
            for j in range(c):
                if vis_cache[i, j]:
                    s = 0.0
                    for t in range(hd):
                        s += q[i, hh, t] * kc[j, hh, t]
                    s *= scale
                    probs[i, hh, j] = s
                    if s > m:
                        m = s
            for j in range(r):
                if vis_rows[i, j]:
                    s = 0.0
                    for t in range(hd):
                        s += q[i, hh, t] * kf[j, hh, t]
                    s *= scale
                    probs[i, hh, c + j] = s
                    if s > m:
                        m = s
            den = 0.0
            for j in range(c):
                if vis_cache[i, j]:
                    e = np.exp(probs[i, hh, j] - m)
                    probs[i, hh, j] = e
                    den += e
            for j in range(r):
                if vis_rows[i, j]:
                    e = np.exp(probs[i, hh, c + j] - m)
                    probs[i, hh, c + j] = e
                    den += e
            for j in range(c):
                if vis_cache[i, j]:
                    p = probs[i, hh, j] / den
                    probs[i, hh, j] = p
                    for t in range(hd):
                        out[i, hh, t] += p * vc[j, hh, t]
            for j in range(r):
                if vis_rows[i, j]:
                    p = probs[i, hh, c + j] / den
                    probs[i, hh, c + j] = p
                    for t in range(hd):
                        out[i, hh, t] += p * vf[j, hh, t]
    return out, probs, n_empty


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed reduction order.

    Row i of the result depends only on row i of `a`; the contraction runs
    left to right over the shared dimension.
    """
    am = _as_matrix(a, "a")
    bm = _as_matrix(b, "b")
    if am.shape[1] != bm.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {am.shape} x {bm.shape}")
    out = _matmul(am, bm)
    if not np.isfinite(out).all():
        raise FloatingPointError("matmul produced non-finite entries")
    return out


def masked_softmax_rows(scores, visible) -> np.ndarray:
    """Row-wise softmax restricted to visible entries.

    Invisible entries are exactly zero in the output; each row is shifted by
    its visible maximum before exponentiation. A fully masked row is an error.
    """
    s = _as_matrix(scores, "scores")
    v = np.asarray(visible, dtype=bool)
    if v.shape != s.shape:
        raise ValueError(f"visibility shape {v.shape} != scores shape {s.shape}")
    counts = v.sum(axis=1)
    if (counts == 0).any():
        bad = int(np.argmax(counts == 0))
        raise ValueError(f"fully masked row {bad} in masked_softmax_rows")
    shifted = np.where(v, s, -np.inf)
    m = shifted.max(axis=1, keepdims=True)
    e = np.zeros_like(s)
    e[v] = np.exp((s - m)[v])
    out = e / e.sum(axis=1, keepdims=True)
    if not np.isfinite(out).all():
        raise FloatingPointError("masked_softmax_rows produced non-finite entries")
    return out


def rmsnorm(row, gain, eps: float) -> np.ndarray:
    """x / sqrt(mean(x^2) + eps) * gain, elementwise over one vector."""
    x = np.ascontiguousarray(np.asarray(row, dtype=np.float64)).reshape(1, -1)
    g = np.ascontiguousarray(np.asarray(gain, dtype=np.float64))
    if g.shape != (x.shape[1],):
        raise ValueError("rmsnorm gain length mismatch")
    if not eps > 0:
        raise ValueError("rmsnorm eps must be > 0")
    out, _ = _rmsnorm_rows(x, g, float(eps))
    if not np.isfinite(out).all():
        raise FloatingPointError("rmsnorm produced non-finite entries")
    return out[0]


def argmax_tiebreak_low(v) -> int:
    """Smallest index attaining the maximum (np.argmax's documented rule)."""
    a = np.asarray(v, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise ValueError("argmax_tiebreak_low of empty vector")
    return int(np.argmax(a))


def gelu(x) -> np.ndarray:
    """tanh-approximation GELU over a 2-D array."""
    return _gelu_rows(_as_matrix(x, "x"))
