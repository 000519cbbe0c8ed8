"""Seeded order-2 Markov corpus: a deterministic stand-in for real text.

Transition rows are softmaxed Gaussians (sharpness controls how peaked the
conditionals are), so a briefly trained toy target has real structure for a
drafter to align with. File format: one sequence per line, space-separated
decimal token ids; lines starting with '#' are ignored.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sampler import PURPOSE_CORPUS, RngStream


@dataclass(frozen=True)
class CorpusSpec:
    vocab_size: int = 64
    transition_seed: int = 0
    n_sequences: int = 256
    seq_len: int = 64
    sharpness: float = 3.0

    def __post_init__(self):
        if self.vocab_size < 2 or self.n_sequences < 1 or self.seq_len < 3:
            raise ValueError("invalid corpus spec")


def build_transition(spec: CorpusSpec) -> np.ndarray:
    """(V*V, V) matrix: row (a*V + b) is the distribution of the next token
    given the two previous tokens (a, b)."""
    rng = np.random.Generator(np.random.PCG64(spec.transition_seed))
    v = spec.vocab_size
    logits = spec.sharpness * rng.normal(size=(v * v, v))
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def sample_sequences(spec: CorpusSpec) -> list[list[int]]:
    trans = build_transition(spec)
    v = spec.vocab_size
    out = []
    for s in range(spec.n_sequences):
        rng = RngStream(seed=spec.transition_seed, stream_id=s)
        seq: list[int] = []
        for t in range(spec.seq_len):
            u = rng.uniform(0, t, PURPOSE_CORPUS)
            if t < 2:
                seq.append(min(int(u * v), v - 1))
            else:
                row = trans[seq[-2] * v + seq[-1]]
                acc = 0.0
                tok = v - 1
                for i, p in enumerate(row):
                    acc += p
                    if u < acc:
                        tok = i
                        break
                seq.append(tok)
        out.append(seq)
    return out


def gen_corpus(spec: CorpusSpec, path: str | Path) -> Path:
    """Write the corpus file; byte-identical for identical specs."""
    path = Path(path)
    seqs = sample_sequences(spec)
    lines = [
        f"# vocab={spec.vocab_size} seed={spec.transition_seed} "
        f"sequences={spec.n_sequences} len={spec.seq_len} sharpness={spec.sharpness}"
    ]
    lines += [" ".join(str(t) for t in seq) for seq in seqs]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_corpus(path: str | Path) -> list[list[int]]:
    seqs = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        seqs.append([int(t) for t in line.split()])
    return seqs
