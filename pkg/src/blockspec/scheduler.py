"""Batch-adaptive execution: mode selection by batch size, per-step forward
token accounting, and an analytic step-cost model.

The cost model is deliberately analytic, not measured. A forward pays a
fixed memory floor (weight read, amortized over the batch) plus a compute
term that only bites once the batch's token count exceeds the saturation
budget of the memory-bound regime. Parallel steps fuse drafting into the
verify pass (one floor, many rows); sequential steps pay two floors but far
fewer rows, which is what flips the preference at large batch sizes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Optional, Sequence

from .engine import DecodeEngine, StepStats, acceptance_length_tau
from .model import ModelConfig
from .sampler import RngStream


@dataclass(frozen=True)
class CostProfile:
    alpha: float = 1.0  # compute cost per layer-equivalent token beyond saturation
    beta: float = 200.0  # per-forward memory floor
    saturation: float = 64.0  # tokens per forward absorbed for free

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0 or self.saturation < 0:
            raise ValueError("need alpha, beta > 0 and saturation >= 0")


@dataclass(frozen=True)
class ForwardCounts:
    """(full-depth rows, partial-depth mask rows) per forward of one step."""

    forwards: tuple[tuple[int, int], ...]

    @property
    def full_depth(self) -> int:
        return sum(f for f, _ in self.forwards)

    @property
    def partial_depth(self) -> int:
        return sum(p for _, p in self.forwards)


def forward_token_count(mode: str, block_slots: int, kept: int = 0) -> ForwardCounts:
    """Row counts per step. Parallel: one forward with the bonus row, the
    k = M-1 draft rows, and M mask rows per kept branch. Sequential: a verify
    forward over [bonus, M drafts] plus a decoupled draft forward."""
    m = int(block_slots)
    if mode == "parallel":
        if not 0 <= kept <= m:
            raise ValueError(f"kept branches out of range 0..{m}")
        return ForwardCounts(((1 + (m - 1), kept * m),))
    if mode == "sequential":
        return ForwardCounts(((1 + m, 0), (1, m)))
    raise ValueError(f"unknown mode {mode!r}")


def forward_cost(full: int, partial: int, batch: int, profile: CostProfile, depth_ratio: float) -> float:
    """Per-stream cost of one fused forward across the batch."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    tokens = full + partial * depth_ratio
    compute = max(0.0, batch * tokens - profile.saturation)
    return profile.beta / batch + profile.alpha * compute / batch


def estimate_step_cost(
    counts: ForwardCounts, batch: int, profile: CostProfile, depth_ratio: float
) -> float:
    """Per-stream estimated time of one step (sums its forwards)."""
    return sum(forward_cost(f, p, batch, profile, depth_ratio) for f, p in counts.forwards)


def choose_mode(batch: int, threshold: int = 2) -> str:
    """Parallel through the threshold batch size, sequential above it."""
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    return "parallel" if batch <= threshold else "sequential"


def config_hash(config: ModelConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class RunReport:
    header: dict
    records: list[dict]

    def to_json_lines(self) -> str:
        lines = [json.dumps({"type": "header", **self.header}, sort_keys=True)]
        lines += [json.dumps(r, sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"


def _step_cost(stats: StepStats, block_slots: int, batch: int, profile: CostProfile, ratio: float) -> float:
    counts = forward_token_count(stats.mode, block_slots, stats.kept_branches)
    expected = (counts.full_depth, counts.partial_depth)
    if expected != (stats.rows_full, stats.rows_partial):
        raise RuntimeError(f"step rows {stats.rows_full, stats.rows_partial} != formula {expected}")
    cost = estimate_step_cost(counts, batch, profile, ratio)
    if stats.fallback_rows_full or stats.fallback_rows_partial:
        cost += forward_cost(stats.fallback_rows_full, stats.fallback_rows_partial, batch, profile, ratio)
    return cost


def run_batch(
    engine: DecodeEngine,
    prompts: Sequence[Sequence[int]],
    seed: int,
    mode: str = "auto",
    threshold: int = 2,
    theta: float = 0.05,
    temperature: float = 0.0,
    max_new_tokens: int = 32,
    profile: CostProfile = CostProfile(),
    stop_token: Optional[int] = None,
    stream_ids: Optional[Sequence[int]] = None,
) -> RunReport:
    """Decode every stream to its stop condition under the chosen mode and
    aggregate acceptance lengths, row counts, cost estimates, and the
    estimated speedup against a pure-AR baseline under the same profile."""
    if len(prompts) == 0:
        raise ValueError("run_batch needs at least one stream")
    batch = len(prompts)
    resolved = choose_mode(batch, threshold) if mode == "auto" else mode
    if resolved not in ("parallel", "sequential"):
        raise ValueError(f"unknown mode {mode!r}")
    cfg = engine.config
    ratio = cfg.n_draft_layers / cfg.n_layers
    ids = list(stream_ids) if stream_ids is not None else list(range(batch))

    records = []
    for sid, prompt in sorted(zip(ids, prompts)):
        rng = RngStream(seed=seed, stream_id=sid)
        result = engine.decode(
            list(prompt),
            rng,
            mode=resolved,
            max_new_tokens=max_new_tokens,
            temperature=temperature,
            theta=theta,
            stop_token=stop_token,
        )
        est_cost = sum(forward_cost(f, p, batch, profile, ratio) for f, p in result.prefill_forwards)
        est_cost += sum(_step_cost(s, cfg.block_slots, batch, profile, ratio) for s in result.steps)
        n_resp = len(result.response)
        ar_cost = forward_cost(len(prompt), 0, batch, profile, ratio)
        ar_cost += max(0, n_resp - 1) * forward_cost(1, 0, batch, profile, ratio)
        records.append(
            {
                "stream_id": sid,
                "steps": len(result.steps),
                "tokens": n_resp,
                "tau": acceptance_length_tau(result.steps) if result.steps else None,
                "rows_full": sum(s.rows_full + s.fallback_rows_full for s in result.steps)
                + sum(f for f, _ in result.prefill_forwards),
                "rows_partial": sum(s.rows_partial + s.fallback_rows_partial for s in result.steps)
                + sum(p for _, p in result.prefill_forwards),
                "est_cost": est_cost,
                "est_speedup": ar_cost / est_cost if est_cost > 0 else None,
                "mode": resolved,
                "fallbacks": sum(1 for s in result.steps if s.fallback),
            }
        )

    header = {
        "config_hash": config_hash(cfg),
        "seed": seed,
        "mode_policy": mode,
        "threshold": threshold,
        "theta": theta,
        "temperature": temperature,
        "block_slots": cfg.block_slots,
        "n_draft_layers": cfg.n_draft_layers,
        "n_layers": cfg.n_layers,
        "batch": batch,
        "max_new_tokens": max_new_tokens,
        "profile": {"alpha": profile.alpha, "beta": profile.beta, "saturation": profile.saturation},
    }
    return RunReport(header=header, records=records)
