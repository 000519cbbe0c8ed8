"""Toy decoder-only transformer with a frozen autoregressive path and
trainable mask-specific attention projectors in the last few layers.

Non-mask ("frozen") rows run all layers through the original projectors and
append their key/value rows to the persistent cache. Mask rows exist only in
the last `n_draft_layers` layers: they enter as the learned mask embedding,
ride the trainable projectors, share the frozen FFN, and write nothing
persistent. All arithmetic is IEEE-754 binary64 with fixed reduction order,
so a row's outputs are bit-identical regardless of which other rows share
the forward pass.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .kernels import _attention_rows, _gelu_rows, _linear_routed, _matmul, _rmsnorm_rows, _rope_rows
from .layout import ROUTE_MASK, AttentionLayout

RMS_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 6
    n_draft_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 64
    block_slots: int = 5
    rope_base: float = 10000.0
    calib_hidden: int = 32

    def __post_init__(self):
        if not (1 <= self.n_draft_layers <= self.n_layers):
            raise ValueError("need 1 <= n_draft_layers <= n_layers")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ValueError("head dimension must be even for rotary pairs")
        if self.block_slots < 2:
            raise ValueError("block_slots must be >= 2")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.calib_hidden < 1 or self.d_ff < 1 or self.rope_base <= 0:
            raise ValueError("invalid config")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def first_draft_layer(self) -> int:
        """0-indexed first layer in which mask rows exist."""
        return self.n_layers - self.n_draft_layers

    @property
    def attn_scale(self) -> float:
        return 1.0 / np.sqrt(float(self.head_dim))

    def rope_inv_freq(self) -> np.ndarray:
        half = self.head_dim // 2
        return self.rope_base ** (-2.0 * np.arange(half, dtype=np.float64) / self.head_dim)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class FrozenWeights:
    """Target-model parameters; never mutated after construction."""

    embed: np.ndarray  # (V, d)
    wq: list[np.ndarray]  # per layer (d, d)
    wk: list[np.ndarray]
    wv: list[np.ndarray]
    wo: list[np.ndarray]
    ffn_w1: list[np.ndarray]  # (d, d_ff)
    ffn_w2: list[np.ndarray]  # (d_ff, d)
    attn_gain: list[np.ndarray]  # (d,)
    ffn_gain: list[np.ndarray]
    final_gain: np.ndarray
    head: np.ndarray  # (d, V), untied

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        items = [("embed", self.embed)]
        for l in range(len(self.wq)):
            items += [
                (f"layer{l}.wq", self.wq[l]),
                (f"layer{l}.wk", self.wk[l]),
                (f"layer{l}.wv", self.wv[l]),
                (f"layer{l}.wo", self.wo[l]),
                (f"layer{l}.ffn_w1", self.ffn_w1[l]),
                (f"layer{l}.ffn_w2", self.ffn_w2[l]),
                (f"layer{l}.attn_gain", self.attn_gain[l]),
                (f"layer{l}.ffn_gain", self.ffn_gain[l]),
            ]
        items += [("final_gain", self.final_gain), ("head", self.head)]
        return items


@dataclass
class DraftWeights:
    """Trainable parameters: mask projectors for the last N layers, the mask
    embedding, and the bonus-conditioned calibration MLP."""

    wq: list[np.ndarray]  # per draft layer (d, d), index 0 = first draft layer
    wk: list[np.ndarray]
    wv: list[np.ndarray]
    wo: list[np.ndarray]
    mask_embed: np.ndarray  # (d,)
    calib_w1: np.ndarray  # (2d, calib_hidden)
    calib_b1: np.ndarray  # (calib_hidden,)
    calib_w2: np.ndarray  # (calib_hidden, V)
    calib_b2: np.ndarray  # (V,)

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        items = []
        for l in range(len(self.wq)):
            items += [
                (f"draft{l}.wq", self.wq[l]),
                (f"draft{l}.wk", self.wk[l]),
                (f"draft{l}.wv", self.wv[l]),
                (f"draft{l}.wo", self.wo[l]),
            ]
        items += [
            ("mask_embed", self.mask_embed),
            ("calib.w1", self.calib_w1),
            ("calib.b1", self.calib_b1),
            ("calib.w2", self.calib_w2),
            ("calib.b2", self.calib_b2),
        ]
        return items

    def n_params(self) -> int:
        return sum(int(a.size) for _, a in self.param_items())


def init_frozen(config: ModelConfig, seed: int, logit_scale: float = 2.5) -> FrozenWeights:
    """Random target weights. `logit_scale` sets the LM-head magnitude so a
    random target still yields usefully peaked next-token distributions."""
    rng = np.random.Generator(np.random.PCG64(seed))
    d, dff, v = config.d_model, config.d_ff, config.vocab_size
    sd = 1.0 / np.sqrt(d)

    def mat(rows, cols, scale):
        return rng.normal(0.0, scale, size=(rows, cols)).astype(np.float64)

    return FrozenWeights(
        embed=mat(v, d, 1.0),
        wq=[mat(d, d, sd) for _ in range(config.n_layers)],
        wk=[mat(d, d, sd) for _ in range(config.n_layers)],
        wv=[mat(d, d, sd) for _ in range(config.n_layers)],
        wo=[mat(d, d, sd) for _ in range(config.n_layers)],
        ffn_w1=[mat(d, dff, sd) for _ in range(config.n_layers)],
        ffn_w2=[mat(dff, d, 1.0 / np.sqrt(dff)) for _ in range(config.n_layers)],
        attn_gain=[np.ones(d) for _ in range(config.n_layers)],
        ffn_gain=[np.ones(d) for _ in range(config.n_layers)],
        final_gain=np.ones(d),
        head=mat(d, v, logit_scale * sd),
    )


def init_draft(config: ModelConfig, frozen: FrozenWeights, seed: int) -> DraftWeights:
    """Drafter init that starts at autoregressive behavior: projector copies,
    mean-embedding mask vector, zero-initialized calibration output layer."""
    rng = np.random.Generator(np.random.PCG64(seed))
    d, v, dc = config.d_model, config.vocab_size, config.calib_hidden
    ls = config.first_draft_layer
    return DraftWeights(
        wq=[frozen.wq[ls + i].copy() for i in range(config.n_draft_layers)],
        wk=[frozen.wk[ls + i].copy() for i in range(config.n_draft_layers)],
        wv=[frozen.wv[ls + i].copy() for i in range(config.n_draft_layers)],
        wo=[frozen.wo[ls + i].copy() for i in range(config.n_draft_layers)],
        mask_embed=frozen.embed.mean(axis=0),
        calib_w1=rng.normal(0.0, 1.0 / np.sqrt(2 * d), size=(2 * d, dc)),
        calib_b1=np.zeros(dc),
        calib_w2=np.zeros((dc, v)),
        calib_b2=np.zeros(v),
    )


def random_draft(config: ModelConfig, seed: int) -> DraftWeights:
    """Fully random drafter (no relation to the target); losslessness must
    hold regardless, which several oracle checks exercise with this init."""
    rng = np.random.Generator(np.random.PCG64(seed))
    d, v, dc, n = config.d_model, config.vocab_size, config.calib_hidden, config.n_draft_layers
    sd = 1.0 / np.sqrt(d)
    return DraftWeights(
        wq=[rng.normal(0.0, sd, size=(d, d)) for _ in range(n)],
        wk=[rng.normal(0.0, sd, size=(d, d)) for _ in range(n)],
        wv=[rng.normal(0.0, sd, size=(d, d)) for _ in range(n)],
        wo=[rng.normal(0.0, sd, size=(d, d)) for _ in range(n)],
        mask_embed=rng.normal(0.0, 1.0, size=d),
        calib_w1=rng.normal(0.0, 1.0 / np.sqrt(2 * d), size=(2 * d, dc)),
        calib_b1=rng.normal(0.0, 0.1, size=dc),
        calib_w2=rng.normal(0.0, 1.0 / np.sqrt(dc), size=(dc, v)),
        calib_b2=rng.normal(0.0, 0.1, size=v),
    )


def trainable_fraction(config: ModelConfig, frozen: FrozenWeights, draft: DraftWeights) -> float:
    frozen_n = sum(int(a.size) for _, a in frozen.param_items())
    return draft.n_params() / float(frozen_n)


class KVStore:
    """Per-stream persistent key/value cache.

    The committed region only grows by append or shrinks by truncation; mask
    rows never touch it (their per-forward scratch lives inside `forward`).
    """

    def __init__(self, n_layers: int, n_heads: int, head_dim: int, capacity: int = 64):
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.length = 0
        cap = max(int(capacity), 1)
        self._keys = [np.zeros((cap, n_heads, head_dim)) for _ in range(n_layers)]
        self._vals = [np.zeros((cap, n_heads, head_dim)) for _ in range(n_layers)]

    def _ensure(self, extra: int):
        need = self.length + extra
        cap = self._keys[0].shape[0]
        if need <= cap:
            return
        new_cap = cap
        while new_cap < need:
            new_cap *= 2
        for l in range(self.n_layers):
            nk = np.zeros((new_cap, self.n_heads, self.head_dim))
            nv = np.zeros((new_cap, self.n_heads, self.head_dim))
            nk[: self.length] = self._keys[l][: self.length]
            nv[: self.length] = self._vals[l][: self.length]
            self._keys[l] = nk
            self._vals[l] = nv

    def keys(self, layer: int) -> np.ndarray:
        return self._keys[layer][: self.length]

    def vals(self, layer: int) -> np.ndarray:
        return self._vals[layer][: self.length]

    def append(self, staged_keys: Sequence[np.ndarray], staged_vals: Sequence[np.ndarray]):
        n = staged_keys[0].shape[0]
        self._ensure(n)
        for l in range(self.n_layers):
            self._keys[l][self.length : self.length + n] = staged_keys[l]
            self._vals[l][self.length : self.length + n] = staged_vals[l]
        self.length += n

    def truncate(self, new_len: int):
        if new_len > self.length or new_len < 0:
            raise ValueError(f"truncate to {new_len} exceeds current length {self.length}")
        self.length = new_len


def truncate_kv(kv: KVStore, new_len: int) -> None:
    kv.truncate(new_len)


@dataclass
class ForwardOutput:
    hidden: np.ndarray  # (n_rows, d), post final norm — the vectors fed to the LM head
    logits: np.ndarray  # (n_rows, V)
    appended_rows: list[int]  # layout row indices that wrote persistent KV
    captured: Optional[np.ndarray] = None  # hidden states entering `capture_layer`


def _apply_layer(
    h: np.ndarray,
    pos_f: np.ndarray,
    route: np.ndarray,
    layer: int,
    config: ModelConfig,
    frozen: FrozenWeights,
    draft: Optional[DraftWeights],
    kc: np.ndarray,
    vc: np.ndarray,
    vis_cache: np.ndarray,
    vis_rows: np.ndarray,
    inv_freq: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One pre-norm block over the given rows; returns (h, rotated K, V)."""
    r = h.shape[0]
    nh, hd = config.n_heads, config.head_dim
    dl = layer - config.first_draft_layer
    use_draft = draft is not None and dl >= 0
    wq_alt = draft.wq[dl] if use_draft else frozen.wq[layer]
    wk_alt = draft.wk[dl] if use_draft else frozen.wk[layer]
    wv_alt = draft.wv[dl] if use_draft else frozen.wv[layer]
    wo_alt = draft.wo[dl] if use_draft else frozen.wo[layer]

    x, _ = _rmsnorm_rows(h, frozen.attn_gain[layer], RMS_EPS)
    q = _linear_routed(x, frozen.wq[layer], wq_alt, route).reshape(r, nh, hd)
    k = _linear_routed(x, frozen.wk[layer], wk_alt, route).reshape(r, nh, hd)
    v = _linear_routed(x, frozen.wv[layer], wv_alt, route).reshape(r, nh, hd)
    qr = _rope_rows(q, pos_f, inv_freq)
    kr = _rope_rows(k, pos_f, inv_freq)
    attn, _, n_empty = _attention_rows(qr, kc, vc, kr, v, vis_cache, vis_rows, config.attn_scale)
    if n_empty:
        raise ValueError(f"{n_empty} fully-masked attention rows in layer {layer}")
    o = _linear_routed(attn.reshape(r, config.d_model), frozen.wo[layer], wo_alt, route)
    h = h + o
    x2, _ = _rmsnorm_rows(h, frozen.ffn_gain[layer], RMS_EPS)
    f = _matmul(_gelu_rows(_matmul(x2, frozen.ffn_w1[layer])), frozen.ffn_w2[layer])
    return h + f, kr, v


def forward(
    config: ModelConfig,
    frozen: FrozenWeights,
    draft: Optional[DraftWeights],
    kv: KVStore,
    layout: AttentionLayout,
    tokens: Sequence[int],
    mask_init: Optional[np.ndarray] = None,
    capture_layer: Optional[int] = None,
) -> ForwardOutput:
    """Run one forward pass described by `layout`.

    `tokens` supplies ids for the frozen rows in row order. Mask rows start
    from the learned mask embedding (or `mask_init`, a testing hook) at the
    first draft layer. Frozen rows append their per-layer K/V to `kv`; the
    append is committed only after the whole pass is finite.
    """
    if layout.cached_len != kv.length:
        raise ValueError(f"layout expects cache length {layout.cached_len}, KV store has {kv.length}")
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape != (layout.n_frozen,):
        raise ValueError(f"need {layout.n_frozen} token ids, got {tokens.shape}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ValueError("token id out of range")
    if layout.n_mask > 0 and draft is None:
        raise ValueError("layout has mask rows but no draft weights given")

    inv_freq = config.rope_inv_freq()
    ls = config.first_draft_layer
    fi = layout.frozen_indices
    mi = layout.mask_indices
    n_rows = layout.n_rows
    captured = None

    h_f = np.ascontiguousarray(frozen.embed[tokens])
    pos_frozen = np.ascontiguousarray(layout.positions_f[fi])
    route_frozen = np.zeros(fi.size, dtype=np.uint8)
    staged_k: list[np.ndarray] = []
    staged_v: list[np.ndarray] = []

    for layer in range(ls):
        if capture_layer == layer:
            captured = h_f.copy()
        h_f, kr, v = _apply_layer(
            h_f, pos_frozen, route_frozen, layer, config, frozen, None,
            kv.keys(layer), kv.vals(layer), layout.vis_cache_frozen, layout.vis_rows_frozen, inv_freq,
        )
        staged_k.append(kr)
        staged_v.append(v)

    if mi.size:
        h = np.zeros((n_rows, config.d_model))
        h[fi] = h_f
        h[mi] = draft.mask_embed if mask_init is None else np.asarray(mask_init, dtype=np.float64)
        pos_all = np.ascontiguousarray(layout.positions_f)
        route_all = layout.routes
    else:
        h = h_f
        pos_all = pos_frozen
        route_all = route_frozen

    vis_cache = layout.vis_cache if mi.size else layout.vis_cache_frozen
    vis_rows = layout.vis_rows if mi.size else layout.vis_rows_frozen
    for layer in range(ls, config.n_layers):
        if capture_layer == layer:
            captured = h.copy()
        h, kr, v = _apply_layer(
            h, pos_all, route_all, layer, config, frozen, draft if mi.size else None,
            kv.keys(layer), kv.vals(layer), vis_cache, vis_rows, inv_freq,
        )
        staged_k.append(np.ascontiguousarray(kr[fi]) if mi.size else kr)
        staged_v.append(np.ascontiguousarray(v[fi]) if mi.size else v)

    hidden, _ = _rmsnorm_rows(h, frozen.final_gain, RMS_EPS)
    logits = _matmul(hidden, frozen.head)
    if not (np.isfinite(hidden).all() and np.isfinite(logits).all()):
        raise FloatingPointError("non-finite activations in forward pass")
    kv.append(staged_k, staged_v)
    return ForwardOutput(hidden=hidden, logits=logits, appended_rows=[int(i) for i in fi], captured=captured)


def lm_head(frozen: FrozenWeights, h: np.ndarray) -> np.ndarray:
    """Project hidden states to vocabulary logits (no bias)."""
    arr = np.asarray(h, dtype=np.float64)
    squeeze = arr.ndim == 1
    out = _matmul(np.ascontiguousarray(arr.reshape(1, -1) if squeeze else arr), frozen.head)
    return out[0] if squeeze else out
