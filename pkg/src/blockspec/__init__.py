"""Lossless speculative decoding with block-drafting mask projectors on a
frozen toy transformer: parallel draft-and-verify, decoupled sequential
execution with KV reuse, bonus-guided calibration, selective verification,
and batch-adaptive mode switching."""

from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import CorpusSpec, gen_corpus, load_corpus
from .engine import (
    CandidateGroup,
    DecodeEngine,
    DraftBlock,
    StepStats,
    StreamState,
    acceptance_length_tau,
    calibrate,
    select_branches,
)
from .kernels import argmax_tiebreak_low, masked_softmax_rows, matmul, rmsnorm
from .layout import (
    AttentionLayout,
    build_causal_layout,
    build_parallel_layout,
    build_prefill_layout,
    build_sequential_draft_layout,
    build_training_layout,
    validate_layout,
)
from .model import (
    DraftWeights,
    ForwardOutput,
    FrozenWeights,
    KVStore,
    ModelConfig,
    forward,
    init_draft,
    init_frozen,
    lm_head,
    random_draft,
    truncate_kv,
)
from .sampler import (
    RngStream,
    VerifyOutcome,
    apply_temperature,
    committed_marginal_identity,
    greedy_verify,
    residual,
    speculative_verify,
)
from .scheduler import CostProfile, RunReport, choose_mode, estimate_step_cost, forward_token_count, run_batch
from .trainer import AdamState, GradStore, TrainConfig, calib_loss, decay_weights, draft_loss, train_step

__version__ = "0.1.0"
