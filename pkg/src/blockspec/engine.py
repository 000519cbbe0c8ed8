"""Per-stream decoding: parallel draft-and-verify steps, sequential
decoupled steps with KV reuse, bonus-guided calibration, selective
verification of candidate branches, and exact KV rollback.

Either mode commits, per step, the accepted draft prefix plus one bonus
token sampled so that the committed-token distribution equals the frozen
target's autoregressive distribution exactly (greedy decoding at T=0 is
token-for-token identical to plain AR decoding).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .kernels import _gelu_rows, _matmul
from .layout import (
    build_prefill_layout,
    cached_causal_layout,
    cached_parallel_layout,
    cached_sequential_draft_layout,
)
from .model import DraftWeights, ForwardOutput, FrozenWeights, KVStore, ModelConfig, forward
from .sampler import (
    PURPOSE_BONUS,
    PURPOSE_DECOUPLED_DRAFT,
    PURPOSE_DRAFT,
    RngStream,
    apply_temperature,
    speculative_verify,
)


@dataclass(frozen=True)
class StepStats:
    """Per-step record consumed by the scheduler and the CLI reports.

    rows_full counts full-depth (frozen-route) rows across the step's
    forwards, rows_partial the mask rows that exist only in the draft layers.
    A fallback decoupled pass run at the start of a step is accounted
    separately so the parallel verify forward keeps its exact row formula.
    """

    step: int
    mode: str
    rows_full: int
    rows_partial: int
    committed: int
    kept_branches: int
    r_acc: int
    fallback: bool
    fallback_rows_full: int = 0
    fallback_rows_partial: int = 0

    def to_record(self) -> dict:
        return {
            "step": self.step,
            "mode": self.mode,
            "rows_forwarded": self.rows_full + self.rows_partial
            + self.fallback_rows_full + self.fallback_rows_partial,
            "rows_full": self.rows_full,
            "rows_partial": self.rows_partial,
            "kept_branches": self.kept_branches,
            "r_acc": self.r_acc,
            "committed": self.committed,
            "fallback": self.fallback,
        }


@dataclass
class DraftBlock:
    """Pending drafted tokens plus the distributions they were sampled from.

    `dists` keeps the full per-slot sampling distributions: verification needs
    the complete q_i to sample the residual at a rejection, not just the
    recorded scalar probabilities used for branch selection.
    """

    tokens: list[int]
    draft_probs: np.ndarray  # (k,) probability of each token under its sampling dist
    dists: np.ndarray  # (k, V)
    origin_branch: int
    calibrated: bool
    slot_logits: Optional[np.ndarray] = None  # (k, V) pre-temperature, diagnostic


@dataclass
class CandidateGroup:
    """Per kept branch: final hidden states and raw logits of its mask slots,
    stored uncalibrated because the bonus token is unknown until verification."""

    branches: dict[int, tuple[np.ndarray, np.ndarray]]  # r -> (hidden (M,d), logits (M,V))


@dataclass
class StreamState:
    committed: list[int]
    kv: KVStore
    pending: Optional[DraftBlock]
    mode: str  # "parallel" | "sequential"
    step_count: int
    temperature: float
    theta: float
    rng: RngStream
    prompt_len: int = 0
    fallback_pending: bool = False
    prefill_forwards: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class DecodeResult:
    committed: list[int]
    response: list[int]
    steps: list[StepStats]
    prefill_forwards: list[tuple[int, int]]


def select_branches(pending: DraftBlock, theta: float) -> list[int]:
    """Selective verification: keep branch r >= 1 iff the cumulative draft
    confidence prod_{j<=r} q(d_j) stays at or above theta. Branch 0 (immediate
    rejection) is always kept; the result is a prefix of 0..k because the
    running product is nonincreasing."""
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")
    kept = [0]
    prod = 1.0
    for j, p in enumerate(pending.draft_probs, start=1):
        prod *= float(p)
        if prod >= theta:
            kept.append(j)
        else:
            break
    return kept


def calibrate(
    logits: np.ndarray, hidden: np.ndarray, bonus_embed: np.ndarray, draft: DraftWeights
) -> np.ndarray:
    """Additive vocabulary bias from a two-layer MLP over concat(e_b, h_i)."""
    lg = np.asarray(logits, dtype=np.float64)
    h = np.asarray(hidden, dtype=np.float64)
    squeeze = lg.ndim == 1
    lg2 = lg.reshape(1, -1) if squeeze else lg
    h2 = h.reshape(1, -1) if squeeze else h
    eb = np.broadcast_to(np.asarray(bonus_embed, dtype=np.float64), h2.shape)
    z = np.ascontiguousarray(np.concatenate([eb, h2], axis=1))
    a = _gelu_rows(_matmul(z, draft.calib_w1) + draft.calib_b1)
    bias = _matmul(a, draft.calib_w2) + draft.calib_b2
    out = lg2 + bias
    return out[0] if squeeze else out


class DecodeEngine:
    """Owns the weights; streams carry all mutable per-decode state."""

    def __init__(self, config: ModelConfig, frozen: FrozenWeights, draft: DraftWeights):
        self.config = config
        self.frozen = frozen
        self.draft = draft

    @property
    def block_slots(self) -> int:
        return self.config.block_slots

    def new_stream(
        self,
        rng: RngStream,
        mode: str = "parallel",
        temperature: float = 0.0,
        theta: float = 0.05,
    ) -> StreamState:
        if mode not in ("parallel", "sequential"):
            raise ValueError(f"unknown mode {mode!r}")
        cfg = self.config
        return StreamState(
            committed=[],
            kv=KVStore(cfg.n_layers, cfg.n_heads, cfg.head_dim),
            pending=None,
            mode=mode,
            step_count=0,
            temperature=temperature,
            theta=theta,
            rng=rng,
        )

    def _forward(self, state: StreamState, layout, tokens) -> ForwardOutput:
        return forward(self.config, self.frozen, self.draft, state.kv, layout, tokens)

    def _sample_block(
        self,
        state: StreamState,
        raw_logits: np.ndarray,
        n_tokens: int,
        step: int,
        purpose: int,
        position_base: int,
        origin_branch: int,
        calibrated: bool,
    ) -> DraftBlock:
        raw = np.asarray(raw_logits[:n_tokens], dtype=np.float64)
        dists = apply_temperature(raw, state.temperature)
        tokens: list[int] = []
        probs: list[float] = []
        for slot in range(n_tokens):
            t = state.rng.categorical(dists[slot], step, position_base + slot, purpose)
            tokens.append(int(t))
            probs.append(float(dists[slot, t]))
        return DraftBlock(
            tokens=tokens,
            draft_probs=np.asarray(probs),
            dists=dists,
            origin_branch=origin_branch,
            calibrated=calibrated,
            slot_logits=raw,
        )

    def _draft_from_branch(
        self, state: StreamState, branch_logits: np.ndarray, branch_hidden: np.ndarray,
        bonus: int, branch: int, step: int,
    ) -> DraftBlock:
        """Next pending block from a verified branch's mask slots: slot 0 is
        superseded by the resolved bonus, slots 1..M-1 are calibrated against
        its embedding and sampled."""
        calibrated = calibrate(branch_logits[1:], branch_hidden[1:], self.frozen.embed[bonus], self.draft)
        return self._sample_block(
            state, calibrated, self.block_slots - 1, step, PURPOSE_DRAFT,
            position_base=1, origin_branch=branch, calibrated=True,
        )

    def _decoupled_draft(self, state: StreamState, n_tokens: int, step: int) -> tuple[DraftBlock, tuple[int, int]]:
        """Draft-only pass over the committed prefix: the bonus row runs full
        depth (persisting its KV), the mask block reads the deep-layer cache."""
        m = len(state.committed)
        if state.kv.length != m - 1:
            raise RuntimeError(f"decoupled draft expects cache {m - 1}, have {state.kv.length}")
        layout = cached_sequential_draft_layout(m, self.block_slots)
        out = self._forward(state, layout, [state.committed[-1]])
        slots = layout.block_row_indices(0)
        block = self._sample_block(
            state, out.logits[slots], n_tokens, step, PURPOSE_DECOUPLED_DRAFT,
            position_base=0, origin_branch=0, calibrated=False,
        )
        return block, (1, self.block_slots)

    def prefill(self, state: StreamState, prompt: list[int]) -> None:
        """Forward the prompt, commit the first bonus token (a pure target
        sample), and leave a pending draft block ready for the first step."""
        if len(prompt) == 0:
            raise ValueError("empty prompt")
        if state.committed:
            raise RuntimeError("prefill on a non-empty stream")
        state.prompt_len = len(prompt)
        with_block = state.mode == "parallel"
        layout = build_prefill_layout(len(prompt), self.block_slots, with_block)
        out = self._forward(state, layout, prompt)
        first_dist = apply_temperature(out.logits[len(prompt) - 1], state.temperature)
        bonus = state.rng.categorical(first_dist, 0, 0, PURPOSE_BONUS)
        state.committed = list(prompt) + [int(bonus)]
        if with_block:
            slots = layout.block_row_indices(0)
            state.pending = self._draft_from_branch(
                state, out.logits[slots], out.hidden[slots], int(bonus), 0, step=0
            )
            state.prefill_forwards.append((len(prompt), self.block_slots))
        else:
            state.prefill_forwards.append((len(prompt), 0))
            block, counts = self._decoupled_draft(state, self.block_slots, step=0)
            state.pending = block
            state.prefill_forwards.append(counts)

    def parallel_step(self, state: StreamState) -> StepStats:
        """One combined verify-and-draft forward (plus a decoupled draft pass
        first if the previous step's accepted branch had been pruned)."""
        if state.pending is None and not state.fallback_pending:
            raise RuntimeError("parallel step without a pending draft")
        step = state.step_count + 1
        fb_full = fb_partial = 0
        if state.fallback_pending:
            block, (fb_full, fb_partial) = self._decoupled_draft(state, self.block_slots - 1, step)
            state.pending = block
            state.fallback_pending = False
            # the decoupled pass cached the bonus row; drop it so the verify
            # forward recomputes it (replay-exact) with the spec'd row layout
            state.kv.truncate(len(state.committed) - 1)

        m = len(state.committed)
        if state.kv.length != m - 1:
            raise RuntimeError(f"parallel step expects cache {m - 1}, have {state.kv.length}")
        pending = state.pending
        k = len(pending.tokens)
        kept = select_branches(pending, state.theta)
        layout = cached_parallel_layout(m - 1, k, tuple(kept), self.block_slots)
        out = self._forward(state, layout, [state.committed[-1], *pending.tokens])

        targets = apply_temperature(out.logits[: k + 1], state.temperature)
        outcome = speculative_verify(targets, pending.tokens, pending.dists, state.rng, step)
        state.committed.extend(outcome.committed)
        state.kv.truncate(m + outcome.r_acc)

        candidates = CandidateGroup(
            branches={
                r: (out.hidden[layout.block_row_indices(r)], out.logits[layout.block_row_indices(r)])
                for r in kept
            }
        )
        fallback = outcome.r_acc not in candidates.branches
        if fallback:
            state.pending = None
            state.fallback_pending = True
        else:
            hidden, logits = candidates.branches[outcome.r_acc]
            state.pending = self._draft_from_branch(
                state, logits, hidden, outcome.bonus, outcome.r_acc, step
            )
        state.step_count = step
        return StepStats(
            step=step,
            mode="parallel",
            rows_full=1 + k,
            rows_partial=len(kept) * self.block_slots,
            committed=outcome.r_acc + 1,
            kept_branches=len(kept),
            r_acc=outcome.r_acc,
            fallback=fallback,
            fallback_rows_full=fb_full,
            fallback_rows_partial=fb_partial,
        )

    def sequential_step(self, state: StreamState) -> StepStats:
        """Decoupled execution: a pure verify forward over [bonus, drafts],
        exact rollback, then a draft pass that reuses the verify KV."""
        if state.pending is None:
            raise RuntimeError("sequential step without a pending draft")
        step = state.step_count + 1
        m = len(state.committed)
        if state.kv.length == m:
            # the previous draft pass cached the bonus row; recompute it in the
            # verify forward so the executed rows match the cost formulas
            state.kv.truncate(m - 1)
        if state.kv.length != m - 1:
            raise RuntimeError(f"sequential step expects cache {m - 1}, have {state.kv.length}")
        pending = state.pending
        k = len(pending.tokens)
        layout = cached_causal_layout(m - 1, 1 + k)
        out = self._forward(state, layout, [state.committed[-1], *pending.tokens])
        targets = apply_temperature(out.logits, state.temperature)
        outcome = speculative_verify(targets, pending.tokens, pending.dists, state.rng, step)
        state.committed.extend(outcome.committed)
        state.kv.truncate(m + outcome.r_acc)

        block, (draft_full, draft_partial) = self._decoupled_draft(state, self.block_slots, step)
        state.pending = block
        state.step_count = step
        return StepStats(
            step=step,
            mode="sequential",
            rows_full=(1 + k) + draft_full,
            rows_partial=draft_partial,
            committed=outcome.r_acc + 1,
            kept_branches=0,
            r_acc=outcome.r_acc,
            fallback=False,
        )

    def step(self, state: StreamState) -> StepStats:
        if state.mode == "parallel":
            return self.parallel_step(state)
        return self.sequential_step(state)

    def decode(
        self,
        prompt: list[int],
        rng: RngStream,
        mode: str = "parallel",
        max_new_tokens: int = 32,
        temperature: float = 0.0,
        theta: float = 0.05,
        stop_token: Optional[int] = None,
    ) -> DecodeResult:
        state = self.new_stream(rng, mode=mode, temperature=temperature, theta=theta)
        self.prefill(state, prompt)
        steps: list[StepStats] = []
        while True:
            response = state.committed[state.prompt_len :]
            if len(response) >= max_new_tokens:
                break
            if stop_token is not None and stop_token in response:
                break
            steps.append(self.step(state))
        response = state.committed[state.prompt_len :]
        if stop_token is not None and stop_token in response:
            response = response[: response.index(stop_token) + 1]
        response = response[:max_new_tokens]
        return DecodeResult(
            committed=list(state.committed),
            response=response,
            steps=steps,
            prefill_forwards=list(state.prefill_forwards),
        )


def acceptance_length_tau(stats: list[StepStats]) -> float:
    """Average committed tokens per decode step."""
    if not stats:
        raise ValueError("acceptance length needs at least one step")
    return sum(s.committed for s in stats) / len(stats)
