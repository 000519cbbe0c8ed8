"""Probability utilities, keyed counter-based RNG, and the lossless
speculative verification rule (accept-by-ratio, residual bonus sampling).

Randomness is derived per (stream, step, position, purpose) key so that any
draw is reproducible regardless of call order across streams — batch
composition and scheduling mode cannot perturb sampled outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import argmax_tiebreak_low

MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15

# draw purposes — distinct purposes mean statistically independent draws
PURPOSE_ACCEPT = 0
PURPOSE_BONUS = 1
PURPOSE_DRAFT = 2
PURPOSE_DECOUPLED_DRAFT = 3
PURPOSE_ANCHOR = 4
PURPOSE_CORPUS = 5
PURPOSE_INIT = 6


def _mix64(x: int) -> int:
    # splitmix64 finalizer (Stafford mix13)
    x &= MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def _derive(seed: int, fields: tuple[int, ...]) -> int:
    h = _mix64(seed & MASK64)
    for f in fields:
        h = _mix64((h + _GOLDEN + (f & MASK64)) & MASK64)
    return h


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream keyed by (stream, step, position, purpose)."""

    seed: int
    stream_id: int = 0

    def uniform(self, step: int, position: int, purpose: int) -> float:
        h = _derive(self.seed, (self.stream_id, step, position, purpose))
        return (h >> 11) * 2.0**-53

    def categorical(self, probs: np.ndarray, step: int, position: int, purpose: int) -> int:
        """Inverse-CDF draw with a left-to-right cumulative sum."""
        u = self.uniform(step, position, purpose)
        acc = 0.0
        last_positive = -1
        for i, p in enumerate(probs):
            if p > 0.0:
                last_positive = i
            acc += p
            if u < acc:
                return i
        if last_positive < 0:
            raise ValueError("categorical draw from an all-zero distribution")
        return last_positive  # u landed in the rounding slack past the last mass


@dataclass(frozen=True)
class VerifyOutcome:
    r_acc: int
    bonus: int
    committed: tuple[int, ...]  # accepted drafts followed by the bonus token


def is_distribution(p: np.ndarray, tol: float = 1e-12) -> bool:
    p = np.asarray(p, dtype=np.float64)
    return bool((p >= 0).all() and abs(float(p.sum()) - 1.0) <= tol)


def apply_temperature(logits: np.ndarray, temperature: float) -> np.ndarray:
    """softmax(logits / T); T == 0 is exact greedy (one-hot, ties to the
    lowest index) so bitwise acceptance tests are possible."""
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    l = np.asarray(logits, dtype=np.float64)
    if temperature == 0.0:
        out = np.zeros_like(l)
        if l.ndim == 1:
            out[argmax_tiebreak_low(l)] = 1.0
        else:
            out[np.arange(l.shape[0]), np.argmax(l, axis=-1)] = 1.0
        return out
    s = l / temperature
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def residual(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """normalize(max(0, p - q)): the target's leftover mass after rejection."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    r = np.maximum(0.0, p - q)
    mass = float(r.sum())
    if mass <= 0.0:
        raise ValueError("zero residual mass requested (p <= q everywhere)")
    return r / mass


def speculative_verify(
    targets: np.ndarray,
    drafts: list[int] | tuple[int, ...],
    draft_dists: np.ndarray,
    rng: RngStream,
    step: int = 0,
) -> VerifyOutcome:
    """Sequentially accept draft i with probability min(1, p_i(d_i)/q_i(d_i)).

    At the first rejection the bonus token comes from the residual of that
    position's target distribution; if every draft survives it comes from the
    one-past-the-end target distribution. `targets` therefore holds k+1 rows
    for k drafts. The committed-token marginal equals the target distribution
    exactly at every position (see `committed_marginal_identity`).
    """
    targets = np.asarray(targets, dtype=np.float64)
    draft_dists = np.asarray(draft_dists, dtype=np.float64)
    k = len(drafts)
    if targets.shape[0] != k + 1:
        raise ValueError(f"need {k + 1} target distributions, got {targets.shape[0]}")
    if draft_dists.shape[0] != k:
        raise ValueError(f"need {k} draft distributions, got {draft_dists.shape[0]}")
    for i, d in enumerate(drafts):
        if draft_dists[i, d] <= 0.0:
            raise ValueError(f"draft token {d} at slot {i} has zero draft probability")

    accepted: list[int] = []
    for i, d in enumerate(drafts):
        p_i = targets[i, d]
        q_i = draft_dists[i, d]
        ratio = min(1.0, p_i / q_i)
        if rng.uniform(step, i, PURPOSE_ACCEPT) < ratio:
            accepted.append(int(d))
            continue
        bonus = rng.categorical(residual(targets[i], draft_dists[i]), step, i, PURPOSE_BONUS)
        return VerifyOutcome(r_acc=i, bonus=int(bonus), committed=tuple(accepted + [int(bonus)]))
    bonus = rng.categorical(targets[k], step, k, PURPOSE_BONUS)
    return VerifyOutcome(r_acc=k, bonus=int(bonus), committed=tuple(accepted + [int(bonus)]))


def greedy_verify(targets: np.ndarray, drafts: list[int] | tuple[int, ...]) -> VerifyOutcome:
    """Deterministic T=0 specialization: accept while the draft matches the
    target argmax; the bonus is the argmax at the first mismatch."""
    targets = np.asarray(targets, dtype=np.float64)
    accepted: list[int] = []
    for i, d in enumerate(drafts):
        best = argmax_tiebreak_low(targets[i])
        if int(d) != best:
            return VerifyOutcome(r_acc=i, bonus=best, committed=tuple(accepted + [best]))
        accepted.append(int(d))
    bonus = argmax_tiebreak_low(targets[len(drafts)])
    return VerifyOutcome(r_acc=len(drafts), bonus=bonus, committed=tuple(accepted + [bonus]))


def committed_marginal_identity(p: np.ndarray, q: np.ndarray) -> float:
    """Analytic losslessness oracle for one accept-or-resample round.

    Computes, per token v, q(v)*min(1, p(v)/q(v)) plus the rejection mass
    routed through the residual distribution, and returns the maximum
    absolute deviation from p(v). Zero (up to rounding) for every (p, q).
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    safe_q = np.where(q > 0, q, 1.0)
    acc = np.where(q > 0, q * np.minimum(1.0, p / safe_q), 0.0)
    reject_mass = 1.0 - float(acc.sum())
    resid_raw = np.maximum(0.0, p - q)
    resid_mass = float(resid_raw.sum())
    resid = resid_raw / resid_mass if resid_mass > 0 else np.zeros_like(p)
    committed = acc + reject_mass * resid
    return float(np.max(np.abs(committed - p)))
