"""Fixture-grade pretraining of the toy target model.

Gives the frozen target learnable structure on a corpus so drafter-efficacy
experiments have something to align with. This full-parameter AR trainer is
a test fixture, not part of the decoding surface; it shares the backward
primitives with the drafter trainer but touches every parameter.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .kernels import _attention_rows, _gelu_rows, _matmul, _rmsnorm_rows, _rope_rows
from .model import RMS_EPS, FrozenWeights, ModelConfig, init_frozen
from .trainer import (
    AdamState,
    _attention_backward,
    _gelu_grad,
    _log_softmax,
    _mm,
    _rms_backward,
    _rms_gain_grad,
    _rope_backward,
)


def _causal_trace(config: ModelConfig, w: FrozenWeights, tokens: np.ndarray) -> dict:
    t = len(tokens)
    nh, hd, d = config.n_heads, config.head_dim, config.d_model
    inv_freq = config.rope_inv_freq()
    pos = np.arange(t, dtype=np.float64)
    visr = np.tril(np.ones((t, t), dtype=bool))
    visc = np.zeros((t, 0), dtype=bool)
    kc = np.zeros((0, nh, hd))
    vc = np.zeros((0, nh, hd))

    h = np.ascontiguousarray(w.embed[tokens])
    h0 = h
    layers = []
    for layer in range(config.n_layers):
        x, inv1 = _rmsnorm_rows(h, w.attn_gain[layer], RMS_EPS)
        q = _matmul(x, w.wq[layer]).reshape(t, nh, hd)
        k = _matmul(x, w.wk[layer]).reshape(t, nh, hd)
        v = _matmul(x, w.wv[layer]).reshape(t, nh, hd)
        qr = _rope_rows(q, pos, inv_freq)
        kr = _rope_rows(k, pos, inv_freq)
        attn, probs, _ = _attention_rows(qr, kc, vc, kr, v, visc, visr, config.attn_scale)
        attn_flat = attn.reshape(t, d)
        o = _matmul(attn_flat, w.wo[layer])
        h_mid = h + o
        x2, inv2 = _rmsnorm_rows(h_mid, w.ffn_gain[layer], RMS_EPS)
        f1 = _matmul(x2, w.ffn_w1[layer])
        g = _gelu_rows(f1)
        f2 = _matmul(g, w.ffn_w2[layer])
        layers.append(dict(layer=layer, h_in=h, x=x, inv1=inv1, qr=qr, kr=kr, v=v,
                           probs=probs, attn_flat=attn_flat, h_mid=h_mid,
                           x2=x2, inv2=inv2, f1=f1, g=g))
        h = h_mid + f2
    xf, invf = _rmsnorm_rows(h, w.final_gain, RMS_EPS)
    logits = _matmul(xf, w.head)
    return dict(tokens=tokens, pos=pos, h0=h0, layers=layers, h_last=h, xf=xf,
                invf=invf, logits=logits)


def _causal_backward(trace: dict, config: ModelConfig, w: FrozenWeights,
                     grads: dict, upstream: float) -> float:
    tokens = trace["tokens"]
    t = len(tokens)
    d = config.d_model
    logits = trace["logits"]
    lp = _log_softmax(logits[:-1])
    targets = tokens[1:]
    loss = float(-lp[np.arange(t - 1), targets].mean())

    dlogits = np.zeros_like(logits)
    dlogits[:-1] = np.exp(lp)
    dlogits[np.arange(t - 1), targets] -= 1.0
    dlogits[:-1] *= upstream / (t - 1)

    grads["head"] += _mm(trace["xf"].T, dlogits)
    dxf = _mm(dlogits, w.head.T)
    grads["final_gain"] += _rms_gain_grad(dxf, trace["h_last"], trace["invf"])
    dh = _rms_backward(dxf, trace["h_last"], trace["invf"], w.final_gain)

    inv_freq = config.rope_inv_freq()
    for s in reversed(trace["layers"]):
        layer = s["layer"]
        dh_mid = dh.copy()
        dg = _mm(dh, w.ffn_w2[layer].T)
        grads[f"layer{layer}.ffn_w2"] += _mm(s["g"].T, dh)
        df1 = dg * _gelu_grad(s["f1"])
        grads[f"layer{layer}.ffn_w1"] += _mm(s["x2"].T, df1)
        dx2 = _mm(df1, w.ffn_w1[layer].T)
        grads[f"layer{layer}.ffn_gain"] += _rms_gain_grad(dx2, s["h_mid"], s["inv2"])
        dh_mid += _rms_backward(dx2, s["h_mid"], s["inv2"], w.ffn_gain[layer])

        dh_in = dh_mid.copy()
        grads[f"layer{layer}.wo"] += _mm(s["attn_flat"].T, dh_mid)
        dattn = _mm(dh_mid, w.wo[layer].T).reshape(t, config.n_heads, config.head_dim)
        dqr, dkr, dv = _attention_backward(
            dattn, s["probs"], s["qr"], s["kr"], s["v"], config.attn_scale, 0
        )
        dq = _rope_backward(dqr, trace["pos"], inv_freq).reshape(t, d)
        dk = _rope_backward(dkr, trace["pos"], inv_freq).reshape(t, d)
        dv = dv.reshape(t, d)
        grads[f"layer{layer}.wq"] += _mm(s["x"].T, dq)
        grads[f"layer{layer}.wk"] += _mm(s["x"].T, dk)
        grads[f"layer{layer}.wv"] += _mm(s["x"].T, dv)
        dx = _mm(dq, w.wq[layer].T) + _mm(dk, w.wk[layer].T) + _mm(dv, w.wv[layer].T)
        grads[f"layer{layer}.attn_gain"] += _rms_gain_grad(dx, s["h_in"], s["inv1"])
        dh_in += _rms_backward(dx, s["h_in"], s["inv1"], w.attn_gain[layer])
        dh = dh_in

    np.add.at(grads["embed"], tokens, dh)
    return loss


def pretrain_target(
    config: ModelConfig,
    sequences: Sequence[Sequence[int]],
    steps: int,
    lr: float = 3e-3,
    batch_seqs: int = 8,
    seed: int = 0,
    log_every: int = 0,
) -> FrozenWeights:
    """Train a fresh toy target AR model on the corpus; batches cycle through
    the sequences deterministically."""
    frozen = init_frozen(config, seed)
    params = frozen.param_items()
    adam = AdamState(params)
    n = len(sequences)
    for step in range(steps):
        grads = {name: np.zeros_like(a) for name, a in params}
        batch = [sequences[(step * batch_seqs + j) % n] for j in range(batch_seqs)]
        loss = 0.0
        for seq in batch:
            trace = _causal_trace(config, frozen, np.asarray(seq, dtype=np.int64))
            loss += _causal_backward(trace, config, frozen, grads, upstream=1.0 / batch_seqs)
        adam.update(params, grads, lr)
        if log_every and (step + 1) % log_every == 0:
            print(f"pretrain step {step + 1}: ce={loss / batch_seqs:.4f}")
    return frozen
