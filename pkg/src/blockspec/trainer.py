"""Packed training of the mask projectors, mask embedding, and calibration
MLP against a frozen target: slot-decayed cross entropy on the raw draft
logits plus the same objective on bonus-calibrated logits, with exact
reverse-accumulation gradients over the trainable subset only.

The forward reuses the inference kernels verbatim (clean prefixes go through
`model.forward`, mask blocks through the same attention/matmul kernels), so
trained behavior and deployed behavior are the same function. Gradients of
frozen parameters are identically zero by construction: no buffers exist
for them and no backward rule writes to them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .kernels import GELU_A, GELU_C, _attention_rows, _gelu_rows, _matmul, _rmsnorm_rows, _rope_rows
from .layout import build_causal_layout
from .model import RMS_EPS, DraftWeights, FrozenWeights, KVStore, ModelConfig, forward
from .sampler import PURPOSE_ANCHOR, RngStream


@dataclass(frozen=True)
class TrainConfig:
    decay: float = 7.0  # slot-weight decay; weight of slot i is exp(-decay*(i-1))
    lr: float = 1e-3
    steps: int = 1000
    anchors_per_seq: int = 4
    batch_seqs: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.decay < 0:
            raise ValueError("decay must be >= 0")


class GradStore:
    """Gradient buffers mirroring DraftWeights; frozen parameters have none."""

    def __init__(self, draft: DraftWeights):
        self.data = {name: np.zeros_like(arr) for name, arr in draft.param_items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.data[name]

    def __setitem__(self, name: str, value: np.ndarray):
        if name not in self.data:
            raise KeyError(f"no gradient buffer for {name} (frozen parameters have none)")
        self.data[name] = value

    def check_finite(self):
        for name, g in self.data.items():
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient in {name}")


class AdamState:
    """Adam moments over a named parameter list; updates are in place."""

    def __init__(self, params: list[tuple[str, np.ndarray]], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.m = {name: np.zeros_like(a) for name, a in params}
        self.v = {name: np.zeros_like(a) for name, a in params}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def update(self, params: list[tuple[str, np.ndarray]], grads, lr: float):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, arr in params:
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            arr -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def decay_weights(n_slots: int, decay: float) -> np.ndarray:
    """Slot weights exp(-decay*(i-1)) for i = 1..n_slots."""
    if n_slots < 1:
        raise ValueError("need at least one slot")
    return np.exp(-decay * np.arange(n_slots, dtype=np.float64))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    s = logits - logits.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def draft_loss(
    logits_blocks: Sequence[np.ndarray], targets_blocks: Sequence[Sequence[int]], decay: float
) -> float:
    """Decayed cross entropy on raw slot logits, averaged over anchors."""
    vals = []
    for lg, tg in zip(logits_blocks, targets_blocks):
        tg = np.asarray(tg, dtype=np.int64)
        w = decay_weights(len(tg), decay)
        lp = _log_softmax(np.asarray(lg, dtype=np.float64))
        vals.append(-(w * lp[np.arange(len(tg)), tg]).sum() / w.sum())
    return float(np.mean(vals))


def calib_loss(
    logits_blocks: Sequence[np.ndarray],
    hidden_blocks: Sequence[np.ndarray],
    proxy_embeds: Sequence[np.ndarray],
    targets_blocks: Sequence[Sequence[int]],
    draft: DraftWeights,
    decay: float,
) -> float:
    """Same decayed cross entropy on calibrated logits for slots 1..M-1,
    with the slot-0 ground-truth embedding standing in for the bonus."""
    from .engine import calibrate

    vals = []
    for lg, h, eb, tg in zip(logits_blocks, hidden_blocks, proxy_embeds, targets_blocks):
        tg = np.asarray(tg, dtype=np.int64)
        lt = calibrate(np.asarray(lg)[1:], np.asarray(h)[1:], eb, draft)
        w = decay_weights(len(tg) - 1, decay)
        lp = _log_softmax(lt)
        vals.append(-(w * lp[np.arange(len(tg) - 1), tg[1:]]).sum() / w.sum())
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# shared backward primitives (also used by the target pretraining fixture)


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    u = GELU_C * (x + GELU_A * x**3)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)


def _rms_backward(dy: np.ndarray, x: np.ndarray, inv: np.ndarray, gain: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    gd = dy * gain
    s = np.einsum("ij,ij->i", gd, x)
    return gd * inv[:, None] - x * (inv**3 / d)[:, None] * s[:, None]


def _rms_gain_grad(dy: np.ndarray, x: np.ndarray, inv: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->j", dy, x * inv[:, None])


def _attention_backward(dattn, probs, qr, keys_all, vals_all, scale, n_const):
    """VJP of gathered softmax attention. Keys/values with index < n_const are
    constants (cached clean rows); only the tail rows receive gradients."""
    dprobs = np.einsum("iht,jht->ihj", dattn, vals_all)
    dvals = np.einsum("ihj,iht->jht", probs, dattn)
    dot = np.einsum("ihj,ihj->ih", dprobs, probs)
    dscores = probs * (dprobs - dot[:, :, None])
    dqr = np.einsum("ihj,jht->iht", dscores, keys_all) * scale
    dkeys = np.einsum("ihj,iht->jht", dscores, qr) * scale
    return dqr, dkeys[n_const:], dvals[n_const:]


def _rope_backward(dy: np.ndarray, pos: np.ndarray, inv_freq: np.ndarray) -> np.ndarray:
    # rotation is orthogonal per pair; the VJP is the inverse rotation
    return _rope_rows(dy, -pos, inv_freq)


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("ij,jk->ik", a, b)


# ---------------------------------------------------------------------------
# mask-block forward with taped intermediates, and its backward


def _block_forward(
    config: ModelConfig,
    frozen: FrozenWeights,
    draft: DraftWeights,
    kv: KVStore,
    anchor: int,
    proxy_embed: np.ndarray,
) -> dict:
    """Run one anchor's mask block through the draft layers, saving every
    intermediate needed for reverse accumulation."""
    m = config.block_slots
    nh, hd, d = config.n_heads, config.head_dim, config.d_model
    inv_freq = config.rope_inv_freq()
    scale = config.attn_scale
    pos = np.arange(anchor + 1, anchor + 1 + m, dtype=np.float64)
    visc = np.ones((m, anchor + 1), dtype=bool)
    visr = np.ones((m, m), dtype=bool)

    h = np.ascontiguousarray(np.tile(draft.mask_embed, (m, 1)))
    layers = []
    for dl in range(config.n_draft_layers):
        layer = config.first_draft_layer + dl
        x, inv1 = _rmsnorm_rows(h, frozen.attn_gain[layer], RMS_EPS)
        q = _matmul(x, draft.wq[dl]).reshape(m, nh, hd)
        k = _matmul(x, draft.wk[dl]).reshape(m, nh, hd)
        v = _matmul(x, draft.wv[dl]).reshape(m, nh, hd)
        qr = _rope_rows(q, pos, inv_freq)
        kr = _rope_rows(k, pos, inv_freq)
        kc = kv.keys(layer)[: anchor + 1]
        vc = kv.vals(layer)[: anchor + 1]
        attn, probs, n_empty = _attention_rows(qr, kc, vc, kr, v, visc, visr, scale)
        if n_empty:
            raise RuntimeError("empty attention row in training block")
        attn_flat = attn.reshape(m, d)
        o = _matmul(attn_flat, draft.wo[dl])
        h_mid = h + o
        x2, inv2 = _rmsnorm_rows(h_mid, frozen.ffn_gain[layer], RMS_EPS)
        f1 = _matmul(x2, frozen.ffn_w1[layer])
        g = _gelu_rows(f1)
        f2 = _matmul(g, frozen.ffn_w2[layer])
        layers.append(
            dict(
                layer=layer, dl=dl, h_in=h, x=x, inv1=inv1, qr=qr, kr=kr, v=v,
                kc=kc, vc=vc, probs=probs, attn_flat=attn_flat, h_mid=h_mid,
                x2=x2, inv2=inv2, f1=f1, g=g,
            )
        )
        h = h_mid + f2

    xf, invf = _rmsnorm_rows(h, frozen.final_gain, RMS_EPS)
    logits = _matmul(xf, frozen.head)

    eb = np.broadcast_to(proxy_embed, (m - 1, d))
    cin = np.ascontiguousarray(np.concatenate([eb, xf[1:]], axis=1))
    z1 = _matmul(cin, draft.calib_w1) + draft.calib_b1
    a1 = _gelu_rows(z1)
    calib_logits = logits[1:] + (_matmul(a1, draft.calib_w2) + draft.calib_b2)
    return dict(
        anchor=anchor, pos=pos, layers=layers, h_last=h, xf=xf, invf=invf,
        logits=logits, cin=cin, z1=z1, a1=a1, calib_logits=calib_logits,
    )


def _block_backward(
    trace: dict,
    targets: np.ndarray,
    config: ModelConfig,
    frozen: FrozenWeights,
    draft: DraftWeights,
    grads: GradStore,
    decay: float,
    upstream_draft: float,
    upstream_calib: float,
) -> None:
    m = config.block_slots
    d = config.d_model
    scale = config.attn_scale
    inv_freq = config.rope_inv_freq()
    idx = np.arange(m)

    w = decay_weights(m, decay)
    p = np.exp(_log_softmax(trace["logits"]))
    dlogits = p.copy()
    dlogits[idx, targets] -= 1.0
    dlogits *= (w / w.sum())[:, None] * upstream_draft

    wc = decay_weights(m - 1, decay)
    pc = np.exp(_log_softmax(trace["calib_logits"]))
    dlt = pc.copy()
    dlt[np.arange(m - 1), targets[1:]] -= 1.0
    dlt *= (wc / wc.sum())[:, None] * upstream_calib

    # calibration MLP
    grads["calib.w2"] += _mm(trace["a1"].T, dlt)
    grads["calib.b2"] += dlt.sum(axis=0)
    da1 = _mm(dlt, draft.calib_w2.T)
    dz1 = da1 * _gelu_grad(trace["z1"])
    grads["calib.w1"] += _mm(trace["cin"].T, dz1)
    grads["calib.b1"] += dz1.sum(axis=0)
    dcin = _mm(dz1, draft.calib_w1.T)

    dxf = np.zeros((m, d))
    dxf[1:] += dcin[:, d:]  # proxy-embedding half is frozen
    dlogits[1:] += dlt
    dxf += _mm(dlogits, frozen.head.T)
    dh = _rms_backward(dxf, trace["h_last"], trace["invf"], frozen.final_gain)

    for s in reversed(trace["layers"]):
        layer, dl = s["layer"], s["dl"]
        # h_out = h_mid + ffn(rms(h_mid)); FFN matrices are frozen
        dh_mid = dh.copy()
        dg = _mm(dh, frozen.ffn_w2[layer].T)
        df1 = dg * _gelu_grad(s["f1"])
        dx2 = _mm(df1, frozen.ffn_w1[layer].T)
        dh_mid += _rms_backward(dx2, s["h_mid"], s["inv2"], frozen.ffn_gain[layer])

        # h_mid = h_in + wo(attention(...))
        dh_in = dh_mid.copy()
        dattn_flat = _mm(dh_mid, draft.wo[dl].T)
        grads[f"draft{dl}.wo"] += _mm(s["attn_flat"].T, dh_mid)
        dattn = dattn_flat.reshape(m, config.n_heads, config.head_dim)
        keys_all = np.concatenate([s["kc"], s["kr"]], axis=0)
        vals_all = np.concatenate([s["vc"], s["v"]], axis=0)
        dqr, dkr, dv = _attention_backward(
            dattn, s["probs"], s["qr"], keys_all, vals_all, scale, s["kc"].shape[0]
        )
        dq = _rope_backward(dqr, trace["pos"], inv_freq).reshape(m, d)
        dk = _rope_backward(dkr, trace["pos"], inv_freq).reshape(m, d)
        dv = dv.reshape(m, d)
        grads[f"draft{dl}.wq"] += _mm(s["x"].T, dq)
        grads[f"draft{dl}.wk"] += _mm(s["x"].T, dk)
        grads[f"draft{dl}.wv"] += _mm(s["x"].T, dv)
        dx = _mm(dq, draft.wq[dl].T) + _mm(dk, draft.wk[dl].T) + _mm(dv, draft.wv[dl].T)
        dh_in += _rms_backward(dx, s["h_in"], s["inv1"], frozen.attn_gain[layer])
        dh = dh_in

    grads["mask_embed"] += dh.sum(axis=0)


# ---------------------------------------------------------------------------
# batched loss / gradients over (sequence, anchor) pairs


def prepare_clean_caches(
    config: ModelConfig, frozen: FrozenWeights, sequences: Sequence[Sequence[int]]
) -> list[KVStore]:
    """Causal forward per sequence; the resulting caches are reused by every
    anchor (and by finite differencing — they do not depend on the drafter)."""
    caches = []
    for seq in sequences:
        kv = KVStore(config.n_layers, config.n_heads, config.head_dim, capacity=len(seq))
        forward(config, frozen, None, kv, build_causal_layout(0, len(seq)), list(seq))
        caches.append(kv)
    return caches


def batch_loss(
    config: ModelConfig,
    frozen: FrozenWeights,
    draft: DraftWeights,
    sequences: Sequence[Sequence[int]],
    clean_kvs: Sequence[KVStore],
    anchors: Sequence[Sequence[int]],
    decay: float,
    grads: Optional[GradStore] = None,
) -> dict:
    """Total packed loss (draft + calibration CE, both anchor-averaged) with
    optional gradient accumulation. Also reports slot-wise top-1 accuracy."""
    m = config.block_slots
    n_total = sum(len(a) for a in anchors)
    if n_total == 0:
        raise ValueError("no anchors")
    d_losses, c_losses = [], []
    slot_hits = np.zeros(m)
    for seq, kv, seq_anchors in zip(sequences, clean_kvs, anchors):
        seq = np.asarray(seq, dtype=np.int64)
        for a in seq_anchors:
            targets = seq[a + 1 : a + 1 + m]
            proxy = frozen.embed[targets[0]]
            trace = _block_forward(config, frozen, draft, kv, int(a), proxy)
            w = decay_weights(m, decay)
            lp = _log_softmax(trace["logits"])
            d_losses.append(-(w * lp[np.arange(m), targets]).sum() / w.sum())
            wc = decay_weights(m - 1, decay)
            lpc = _log_softmax(trace["calib_logits"])
            c_losses.append(-(wc * lpc[np.arange(m - 1), targets[1:]]).sum() / wc.sum())
            slot_hits += np.argmax(trace["logits"], axis=1) == targets
            if grads is not None:
                _block_backward(
                    trace, targets, config, frozen, draft, grads, decay,
                    upstream_draft=1.0 / n_total, upstream_calib=1.0 / n_total,
                )
    if grads is not None:
        grads.check_finite()
    return {
        "draft_loss": float(np.mean(d_losses)),
        "calib_loss": float(np.mean(c_losses)),
        "slot_accuracy": (slot_hits / n_total).tolist(),
        "n_anchors": n_total,
    }


def heldout_slot_ce(
    config: ModelConfig,
    frozen: FrozenWeights,
    draft: DraftWeights,
    sequences: Sequence[Sequence[int]],
    anchors: Sequence[Sequence[int]],
) -> tuple[float, float]:
    """Mean cross entropy over slots >= 1: (raw logits, calibrated logits).

    With a zero-initialized calibration output layer the two are equal
    bitwise; a trained calibrator should not be worse than the raw path."""
    clean_kvs = prepare_clean_caches(config, frozen, sequences)
    m = config.block_slots
    raw, cal = [], []
    for seq, kv, seq_anchors in zip(sequences, clean_kvs, anchors):
        seq = np.asarray(seq, dtype=np.int64)
        for a in seq_anchors:
            targets = seq[a + 1 : a + 1 + m]
            trace = _block_forward(config, frozen, draft, kv, int(a), frozen.embed[targets[0]])
            lp = _log_softmax(trace["logits"][1:])
            lpc = _log_softmax(trace["calib_logits"])
            idx = np.arange(m - 1)
            raw.extend((-lp[idx, targets[1:]]).tolist())
            cal.extend((-lpc[idx, targets[1:]]).tolist())
    return float(np.mean(raw)), float(np.mean(cal))


def sample_anchors(
    seq_len: int, block_slots: int, count: int, rng: RngStream, step: int, seq_index: int
) -> list[int]:
    """Uniform draw without replacement over anchor positions with targets."""
    avail = list(range(0, seq_len - block_slots))
    chosen = []
    for j in range(min(count, len(avail))):
        u = rng.uniform(step, seq_index * 4096 + j, PURPOSE_ANCHOR)
        idx = min(int(u * len(avail)), len(avail) - 1)
        chosen.append(avail.pop(idx))
    return sorted(chosen)


def train_step(
    config: ModelConfig,
    frozen: FrozenWeights,
    draft: DraftWeights,
    sequences: Sequence[Sequence[int]],
    train_cfg: TrainConfig,
    rng: RngStream,
    step: int,
    adam: AdamState,
) -> dict:
    """One Adam update of the draft weights on a batch of sequences."""
    anchors = [
        sample_anchors(len(seq), config.block_slots, train_cfg.anchors_per_seq, rng, step, si)
        for si, seq in enumerate(sequences)
    ]
    clean_kvs = prepare_clean_caches(config, frozen, sequences)
    grads = GradStore(draft)
    metrics = batch_loss(config, frozen, draft, sequences, clean_kvs, anchors, train_cfg.decay, grads)
    adam.update(draft.param_items(), grads, train_cfg.lr)
    metrics["step"] = step
    return metrics


def gradient_check(
    config: ModelConfig,
    frozen: FrozenWeights,
    draft: DraftWeights,
    sequences: Sequence[Sequence[int]],
    anchors: Sequence[Sequence[int]],
    decay: float = 7.0,
    rel_step: float = 1e-5,
) -> float:
    """Max relative error between reverse-accumulation gradients and central
    finite differences over every trainable scalar."""
    clean_kvs = prepare_clean_caches(config, frozen, sequences)

    def total_loss() -> float:
        out = batch_loss(config, frozen, draft, sequences, clean_kvs, anchors, decay)
        return out["draft_loss"] + out["calib_loss"]

    grads = GradStore(draft)
    batch_loss(config, frozen, draft, sequences, clean_kvs, anchors, decay, grads)
    worst = 0.0
    for name, arr in draft.param_items():
        g = grads[name]
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = rel_step * max(1.0, abs(orig))
            flat[i] = orig + h
            lp = total_loss()
            flat[i] = orig - h
            lm = total_loss()
            flat[i] = orig
            fd = (lp - lm) / (2.0 * h)
            err = abs(gflat[i] - fd) / max(1.0, abs(gflat[i]))
            worst = max(worst, err)
    return worst
