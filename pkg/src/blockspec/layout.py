"""Attention layouts: row specs plus explicit visibility matrices.

A layout describes one forward pass: which rows exist, their sequence
positions, whether they ride the frozen or the mask projector route, and
exactly which cache positions / other rows each row may attend to.

Visibility rules:
  * frozen rows are causal: they see every cached position and every frozen
    row with position <= their own; they never see mask rows;
  * mask rows belong to a block with a hypothetical prefix boundary P: they
    see cached positions and frozen rows with position <= P, plus every mask
    row of their own block (bidirectional); blocks are mutually invisible.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Optional, Sequence

import numpy as np

ROUTE_FROZEN = 0
ROUTE_MASK = 1


@dataclass(frozen=True)
class Row:
    position: int
    route: int  # ROUTE_FROZEN | ROUTE_MASK
    block: Optional[int] = None


@dataclass(frozen=True)
class BlockSpec:
    block_id: int
    prefix_end: int  # highest sequence position in the block's hypothetical prefix
    positions: tuple[int, ...]


@dataclass(frozen=True)
class LayoutViolation:
    rule: str
    row_i: int
    row_j: Optional[int]
    detail: str


class AttentionLayout:
    """Immutable row/visibility description of one forward pass."""

    def __init__(
        self,
        rows: Sequence[Row],
        cached_len: int,
        vis_rows: np.ndarray,
        vis_cache: np.ndarray,
        block_prefix_end: dict[int, int],
    ):
        self.rows = tuple(rows)
        self.cached_len = int(cached_len)
        self.vis_rows = vis_rows
        self.vis_cache = vis_cache
        self.block_prefix_end = dict(block_prefix_end)

        n = len(self.rows)
        self.routes = np.array([r.route for r in self.rows], dtype=np.uint8)
        self.positions = np.array([r.position for r in self.rows], dtype=np.int64)
        self.positions_f = self.positions.astype(np.float64)
        self.frozen_indices = np.nonzero(self.routes == ROUTE_FROZEN)[0]
        self.mask_indices = np.nonzero(self.routes == ROUTE_MASK)[0]
        # frozen-subset views used by the shallow phase of a forward pass
        fi = self.frozen_indices
        self.vis_cache_frozen = np.ascontiguousarray(vis_cache[fi])
        self.vis_rows_frozen = np.ascontiguousarray(vis_rows[np.ix_(fi, fi)])
        self.vis_rows.setflags(write=False)
        self.vis_cache.setflags(write=False)
        assert n == vis_rows.shape[0] == vis_rows.shape[1]
        assert vis_cache.shape == (n, self.cached_len)

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def n_frozen(self) -> int:
        return int(self.frozen_indices.size)

    @property
    def n_mask(self) -> int:
        return int(self.mask_indices.size)

    def block_row_indices(self, block_id: int) -> np.ndarray:
        return np.array(
            [i for i, r in enumerate(self.rows) if r.route == ROUTE_MASK and r.block == block_id],
            dtype=np.int64,
        )

    def to_text(self) -> str:
        """Human-diffable grid: one line per row, cache then row visibility."""
        lines = []
        for i, row in enumerate(self.rows):
            tag = "F" if row.route == ROUTE_FROZEN else f"M{row.block}"
            cache_bits = "".join("x" if self.vis_cache[i, j] else "." for j in range(self.cached_len))
            row_bits = "".join("x" if self.vis_rows[i, j] else "." for j in range(self.n_rows))
            lines.append(f"{i:>3} {tag:<4} pos={row.position:<5} cache[{cache_bits}] rows[{row_bits}]")
        return "\n".join(lines)


def assemble_layout(
    cached_len: int,
    frozen_positions: Sequence[int],
    blocks: Sequence[BlockSpec] = (),
) -> AttentionLayout:
    """Build a layout from frozen row positions plus mask blocks.

    Frozen rows come first in ascending position order as given; each block's
    mask rows follow, also in the given order, so visibility gathers walk the
    sequence positions monotonically.
    """
    rows: list[Row] = [Row(int(p), ROUTE_FROZEN) for p in frozen_positions]
    prefix_end: dict[int, int] = {}
    for b in blocks:
        if b.block_id in prefix_end:
            raise ValueError(f"duplicate block id {b.block_id}")
        prefix_end[b.block_id] = int(b.prefix_end)
        rows.extend(Row(int(p), ROUTE_MASK, b.block_id) for p in b.positions)

    n = len(rows)
    vis_rows = np.zeros((n, n), dtype=bool)
    vis_cache = np.zeros((n, cached_len), dtype=bool)
    cache_positions = np.arange(cached_len)
    for i, r in enumerate(rows):
        if r.route == ROUTE_FROZEN:
            vis_cache[i, :] = True
            for j, s in enumerate(rows):
                vis_rows[i, j] = s.route == ROUTE_FROZEN and s.position <= r.position
        else:
            p = prefix_end[r.block]
            vis_cache[i, :] = cache_positions <= p
            for j, s in enumerate(rows):
                if s.route == ROUTE_FROZEN:
                    vis_rows[i, j] = s.position <= p
                else:
                    vis_rows[i, j] = s.block == r.block
    return AttentionLayout(rows, cached_len, vis_rows, vis_cache, prefix_end)


def build_training_layout(seq_len: int, anchors: Iterable[int], block_slots: int) -> AttentionLayout:
    """Packed training layout: causal clean rows plus one mask block per anchor.

    Anchor `a` (0-indexed) owns `block_slots` mask rows at positions
    a+1 .. a+block_slots whose prediction targets are the tokens at those
    positions, so every anchor must leave that many tokens after it.
    """
    anchors = sorted(int(a) for a in anchors)
    m = int(block_slots)
    for a in anchors:
        if a < 0 or a + m >= seq_len:
            raise ValueError(f"anchor {a} too close to sequence end (seq_len={seq_len}, slots={m})")
    if len(set(anchors)) != len(anchors):
        raise ValueError("duplicate anchors")
    blocks = [
        BlockSpec(block_id=a, prefix_end=a, positions=tuple(range(a + 1, a + 1 + m)))
        for a in anchors
    ]
    return assemble_layout(0, range(seq_len), blocks)


def build_parallel_layout(
    cached_len: int, k: int, kept: Iterable[int], block_slots: int
) -> AttentionLayout:
    """Combined verify-and-draft layout for one parallel decoding step.

    Frozen rows: the pending bonus token at position `cached_len` plus the k
    draft tokens after it. Each kept branch r hypothesizes that the first r
    drafts are accepted and carries `block_slots` mask rows whose first slot
    sits at the branch's next bonus position.
    """
    m = int(block_slots)
    if k != m - 1:
        raise ValueError(f"parallel layout requires k == block_slots-1, got k={k}, slots={m}")
    kept = sorted(int(r) for r in kept)
    if kept and (kept[0] < 0 or kept[-1] > k):
        raise ValueError(f"kept branch out of range 0..{k}: {kept}")
    frozen_positions = range(cached_len, cached_len + 1 + k)
    blocks = [
        BlockSpec(
            block_id=r,
            prefix_end=cached_len + r,
            positions=tuple(range(cached_len + r + 1, cached_len + r + 1 + m)),
        )
        for r in kept
    ]
    return assemble_layout(cached_len, frozen_positions, blocks)


def build_sequential_draft_layout(m_after: int, block_slots: int) -> AttentionLayout:
    """Decoupled draft pass: one full-depth bonus row plus one mask block.

    `m_after` is the committed length including the bonus token, which must be
    the last committed token; the bonus row persists its KV so the mask rows
    (and later steps) can read the complete committed prefix from cache.
    """
    m = int(block_slots)
    if m_after < 1:
        raise ValueError("m_after must be >= 1")
    cached = m_after - 1
    block = BlockSpec(block_id=0, prefix_end=m_after - 1, positions=tuple(range(m_after, m_after + m)))
    return assemble_layout(cached, [m_after - 1], [block])


def build_causal_layout(cached_len: int, n_tokens: int) -> AttentionLayout:
    """Plain causal extension: n_tokens frozen rows after the cache, no masks."""
    if n_tokens < 1:
        raise ValueError("need at least one row")
    return assemble_layout(cached_len, range(cached_len, cached_len + n_tokens))


def build_prefill_layout(prompt_len: int, block_slots: int, with_block: bool) -> AttentionLayout:
    """Prompt prefill; optionally carries one mask block anchored at the last
    prompt token so a pending draft exists immediately after prefill."""
    if prompt_len < 1:
        raise ValueError("empty prompt")
    if not with_block:
        return build_causal_layout(0, prompt_len)
    m = int(block_slots)
    block = BlockSpec(block_id=0, prefix_end=prompt_len - 1, positions=tuple(range(prompt_len, prompt_len + m)))
    return assemble_layout(0, range(prompt_len), [block])


@lru_cache(maxsize=8192)
def cached_parallel_layout(cached_len: int, k: int, kept: tuple[int, ...], block_slots: int) -> AttentionLayout:
    return build_parallel_layout(cached_len, k, kept, block_slots)


@lru_cache(maxsize=8192)
def cached_sequential_draft_layout(m_after: int, block_slots: int) -> AttentionLayout:
    return build_sequential_draft_layout(m_after, block_slots)


@lru_cache(maxsize=8192)
def cached_causal_layout(cached_len: int, n_tokens: int) -> AttentionLayout:
    return build_causal_layout(cached_len, n_tokens)


def validate_layout(layout: AttentionLayout) -> Optional[LayoutViolation]:
    """Check the four visibility invariants; returns the first violation.

    Reports rather than raises: builders are expected to pass, hand-built or
    corrupted layouts get a named rule plus the offending row indices.
    """
    rows = layout.rows
    n = len(rows)
    vr = layout.vis_rows
    vc = layout.vis_cache

    for i, r in enumerate(rows):
        if r.route == ROUTE_MASK:
            continue
        for j in range(layout.cached_len):
            if not vc[i, j]:
                return LayoutViolation("frozen-causal", i, None, f"frozen row {i} misses cache position {j}")
        for j, s in enumerate(rows):
            expected = s.route == ROUTE_FROZEN and s.position <= r.position
            if vr[i, j] != expected:
                if s.route == ROUTE_MASK and vr[i, j]:
                    return LayoutViolation(
                        "mask-visible-to-frozen", i, j, f"frozen row {i} sees mask row {j}"
                    )
                return LayoutViolation(
                    "frozen-causal", i, j, f"frozen row {i} vs row {j}: expected {expected}"
                )

    for i, r in enumerate(rows):
        if r.route == ROUTE_FROZEN:
            continue
        if r.block not in layout.block_prefix_end:
            return LayoutViolation("mask-prefix", i, None, f"mask row {i} has unknown block {r.block}")
        p = layout.block_prefix_end[r.block]
        for j in range(layout.cached_len):
            if vc[i, j] != (j <= p):
                return LayoutViolation(
                    "mask-prefix", i, None, f"mask row {i} cache position {j} vs prefix end {p}"
                )
        for j, s in enumerate(rows):
            if s.route == ROUTE_FROZEN:
                expected = s.position <= p
                if vr[i, j] != expected:
                    return LayoutViolation(
                        "mask-prefix", i, j, f"mask row {i} vs frozen row {j}: expected {expected}"
                    )
            else:
                expected = s.block == r.block
                if vr[i, j] != expected:
                    if s.block != r.block and vr[i, j]:
                        return LayoutViolation(
                            "cross-block", i, j, f"mask row {i} (block {r.block}) sees block {s.block}"
                        )
                    return LayoutViolation(
                        "block-bidirectional", i, j, f"mask row {i} misses block mate {j}"
                    )
    return None
