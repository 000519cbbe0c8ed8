"""Independent straight-line reference forward.

Written directly from the architecture equations in vectorized numpy (BLAS
matmuls, additive -inf masks, dense softmax), sharing no kernel code with
the package; agreement with the packaged forward is checked to 1e-12, not
bitwise. Only supports layouts with an empty cache.
"""

import numpy as np

RMS_EPS = 1e-6
GELU_C = 0.7978845608028654
GELU_A = 0.044715


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + GELU_A * x**3)))


def _rms(x, gain):
    return x / np.sqrt((x**2).mean(axis=-1, keepdims=True) + RMS_EPS) * gain


def _rope(x, pos, base):
    r, h, hd = x.shape
    half = hd // 2
    inv = base ** (-2.0 * np.arange(half) / hd)
    ang = pos[:, None] * inv[None, :]
    c, s = np.cos(ang)[:, None, :], np.sin(ang)[:, None, :]
    out = np.empty_like(x)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out[..., 0::2] = x1 * c - x2 * s
    out[..., 1::2] = x1 * s + x2 * c
    return out


def reference_forward(cfg, frozen, draft, layout, tokens):
    """Returns (hidden, logits) for every layout row; cache must be empty."""
    assert layout.cached_len == 0, "reference handles fresh forwards only"
    d, nh, hd = cfg.d_model, cfg.n_heads, cfg.head_dim
    scale = 1.0 / np.sqrt(hd)
    fi = layout.frozen_indices
    ls = cfg.first_draft_layer

    def block(h, idx, layer, routed):
        pos = layout.positions_f[idx]
        vis = layout.vis_rows[np.ix_(idx, idx)]
        x = _rms(h, frozen.attn_gain[layer])

        def project(w_f, w_d):
            yf = x @ w_f
            if not routed:
                return yf
            yd = x @ w_d
            sel = layout.routes[idx][:, None] == 0
            return np.where(sel, yf, yd)

        dl = layer - ls
        q = project(frozen.wq[layer], draft.wq[dl] if routed else None).reshape(-1, nh, hd)
        k = project(frozen.wk[layer], draft.wk[dl] if routed else None).reshape(-1, nh, hd)
        v = project(frozen.wv[layer], draft.wv[dl] if routed else None).reshape(-1, nh, hd)
        q, k = _rope(q, pos, cfg.rope_base), _rope(k, pos, cfg.rope_base)
        scores = np.einsum("ihd,jhd->hij", q, k) * scale
        scores = np.where(vis[None, :, :], scores, -np.inf)
        scores -= scores.max(axis=2, keepdims=True)
        e = np.exp(scores)
        probs = e / e.sum(axis=2, keepdims=True)
        attn = np.einsum("hij,jhd->ihd", probs, v).reshape(len(idx), d)
        o = attn @ frozen.wo[layer]
        if routed:
            od = attn @ draft.wo[dl]
            o = np.where(layout.routes[idx][:, None] == 0, o, od)
        h = h + o
        x2 = _rms(h, frozen.ffn_gain[layer])
        return h + _gelu(x2 @ frozen.ffn_w1[layer]) @ frozen.ffn_w2[layer]

    h_f = frozen.embed[np.asarray(tokens, dtype=np.int64)]
    for layer in range(ls):
        h_f = block(h_f, fi, layer, routed=False)

    n = layout.n_rows
    if layout.mask_indices.size:
        h = np.zeros((n, d))
        h[fi] = h_f
        h[layout.mask_indices] = draft.mask_embed
        idx = np.arange(n)
    else:
        h = h_f
        idx = fi
    for layer in range(ls, cfg.n_layers):
        h = block(h, idx, layer, routed=layout.mask_indices.size > 0)

    hidden = _rms(h, frozen.final_gain)
    return hidden, hidden @ frozen.head
