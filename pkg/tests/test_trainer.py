import copy
import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blockspec.layout import build_causal_layout, build_training_layout
from blockspec.model import KVStore, forward, init_draft, init_frozen, random_draft
from blockspec.sampler import RngStream
from blockspec.trainer import (
    AdamState,
    GradStore,
    TrainConfig,
    batch_loss,
    calib_loss,
    decay_weights,
    draft_loss,
    gradient_check,
    heldout_slot_ce,
    prepare_clean_caches,
    sample_anchors,
    train_step,
)
from conftest import SMALL, random_tokens


class TestDecayWeights:
    def test_zero_decay_uniform(self):
        assert np.array_equal(decay_weights(4, 0.0), np.ones(4))

    def test_default_decay_values(self):
        w = decay_weights(3, 7.0)
        assert w[0] == 1.0
        assert abs(w[1] - 9.1188e-4) < 1e-7
        assert abs(w[1] - np.exp(-7.0)) < 1e-18

    @given(st.floats(0.01, 10.0), st.integers(2, 8))
    @settings(max_examples=30, deadline=None)
    def test_strictly_decreasing(self, lam, m):
        w = decay_weights(m, lam)
        assert np.all(np.diff(w) < 0)


class TestDraftLoss:
    def test_perfect_predictions_zero(self):
        logits = np.full((3, 5), -1e9)
        targets = [1, 4, 0]
        for i, t in enumerate(targets):
            logits[i, t] = 0.0
        assert draft_loss([logits], [targets], 7.0) < 1e-12

    def test_uniform_predictions_log_vocab(self):
        logits = np.zeros((4, 64))
        for lam in (0.0, 7.0):  # weights normalize out under uniform slots
            assert abs(draft_loss([logits], [[1, 2, 3, 4]], lam) - np.log(64.0)) < 1e-12

    def test_matches_straight_line_formula(self):
        rng = np.random.Generator(np.random.PCG64(0))
        logits = rng.normal(size=(4, 9))
        targets = [2, 0, 7, 5]
        lam = 1.3
        w = np.exp(-lam * np.arange(4))
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        expect = -(w * np.log(probs[np.arange(4), targets])).sum() / w.sum()
        assert abs(draft_loss([logits], [targets], lam) - expect) < 1e-12


class TestCalibLoss:
    def test_zero_init_equals_restricted_draft_loss(self, small_config):
        frozen = init_frozen(small_config, 0)
        draft = init_draft(small_config, frozen, 1)  # calib output layer is zero
        rng = np.random.Generator(np.random.PCG64(2))
        m, v, d = small_config.block_slots, small_config.vocab_size, small_config.d_model
        logits = rng.normal(size=(m, v))
        hidden = rng.normal(size=(m, d))
        targets = random_tokens(rng, v, m)
        cl = calib_loss([logits], [hidden], [frozen.embed[targets[0]]], [targets], draft, 7.0)
        restricted = draft_loss([logits[1:]], [targets[1:]], 7.0)
        assert cl == restricted

    def test_perfect_calibrated_predictions_zero(self, small_config):
        frozen = init_frozen(small_config, 0)
        draft = init_draft(small_config, frozen, 1)
        m, v = small_config.block_slots, small_config.vocab_size
        targets = [3, 1, 4][:m]
        logits = np.full((m, v), -1e9)
        for i, t in enumerate(targets):
            logits[i, t] = 0.0
        hidden = np.zeros((m, small_config.d_model))
        cl = calib_loss([logits], [hidden], [frozen.embed[targets[0]]], [targets], draft, 7.0)
        assert cl < 1e-12


class TestBackward:
    def test_gradcheck_single_seed(self):
        frozen = init_frozen(SMALL, 1)
        draft = random_draft(SMALL, 2)
        rng = np.random.Generator(np.random.PCG64(3))
        seq = random_tokens(rng, SMALL.vocab_size, 9)
        err = gradient_check(SMALL, frozen, draft, [seq], [[1, 4]])
        assert err < 1e-5

    def test_frozen_parameters_have_no_buffers(self, small_config):
        frozen = init_frozen(small_config, 1)
        draft = random_draft(small_config, 2)
        grads = GradStore(draft)
        assert "head" not in grads.data and "embed" not in grads.data
        assert all(name.startswith(("draft", "mask_embed", "calib")) for name in grads.data)
        with pytest.raises(KeyError):
            grads["head"] = np.zeros(1)

    def test_perturbing_frozen_weight_changes_loss_only(self, small_config):
        frozen = init_frozen(small_config, 1)
        draft = random_draft(small_config, 2)
        rng = np.random.Generator(np.random.PCG64(4))
        seq = random_tokens(rng, small_config.vocab_size, 9)
        kvs = prepare_clean_caches(small_config, frozen, [seq])
        base = batch_loss(small_config, frozen, draft, [seq], kvs, [[2]], 7.0)
        head = frozen.head.copy()
        head[0, 1] += 0.05
        bumped = dataclasses.replace(frozen, head=head)
        kvs2 = prepare_clean_caches(small_config, bumped, [seq])
        moved = batch_loss(small_config, bumped, draft, [seq], kvs2, [[2]], 7.0)
        assert moved["draft_loss"] != base["draft_loss"]

    def test_perfect_predictions_give_zero_gradients(self, small_config):
        """Seed the backward with perfect slot predictions: every gradient
        buffer must come out (numerically) zero."""
        from blockspec.trainer import _block_backward, _block_forward

        frozen = init_frozen(small_config, 5)
        draft = random_draft(small_config, 6)
        rng = np.random.Generator(np.random.PCG64(7))
        seq = np.array(random_tokens(rng, small_config.vocab_size, 8), dtype=np.int64)
        kv = prepare_clean_caches(small_config, frozen, [seq])[0]
        m = small_config.block_slots
        targets = seq[3 : 3 + m]
        trace = _block_forward(small_config, frozen, draft, kv, 2, frozen.embed[targets[0]])
        perfect = np.full_like(trace["logits"], -1e9)
        perfect[np.arange(m), targets] = 1e9
        trace["logits"] = perfect
        trace["calib_logits"] = perfect[1:]
        grads = GradStore(draft)
        _block_backward(trace, targets, small_config, frozen, draft, grads, 7.0, 1.0, 1.0)
        assert max(np.max(np.abs(g)) for g in grads.data.values()) < 1e-12


class TestTrainStep:
    def test_zero_learning_rate_keeps_weights_bitwise(self, small_config):
        frozen = init_frozen(small_config, 1)
        draft = random_draft(small_config, 2)
        before = {name: a.copy() for name, a in draft.param_items()}
        rng = np.random.Generator(np.random.PCG64(3))
        seqs = [random_tokens(rng, small_config.vocab_size, 10) for _ in range(2)]
        cfg = TrainConfig(lr=0.0, anchors_per_seq=2)
        adam = AdamState(draft.param_items())
        train_step(small_config, frozen, draft, seqs, cfg, RngStream(seed=0), 0, adam)
        for name, a in draft.param_items():
            assert np.array_equal(a, before[name]), name

    def test_frozen_path_invariant_under_training(self, small_config):
        frozen = init_frozen(small_config, 1)
        draft = random_draft(small_config, 2)
        rng = np.random.Generator(np.random.PCG64(3))
        seqs = [random_tokens(rng, small_config.vocab_size, 10) for _ in range(2)]
        probe = random_tokens(rng, small_config.vocab_size, 6)

        def target_logits():
            kv = KVStore(small_config.n_layers, small_config.n_heads, small_config.head_dim)
            return forward(small_config, frozen, None, kv, build_causal_layout(0, 6), probe).logits

        before = target_logits()
        frozen_snapshot = {name: a.copy() for name, a in frozen.param_items()}
        adam = AdamState(draft.param_items())
        cfg = TrainConfig(lr=5e-3, anchors_per_seq=2)
        for step in range(5):
            train_step(small_config, frozen, draft, seqs, cfg, RngStream(seed=1), step, adam)
        assert np.array_equal(before, target_logits())
        for name, a in frozen.param_items():
            assert np.array_equal(a, frozen_snapshot[name]), name

    def test_copy_init_matches_deployed_forward_golden(self, small_config):
        """With the projectors initialized as copies, the first training
        forward equals the deployed forward on the packed layout, bitwise."""
        frozen = init_frozen(small_config, 9)
        draft = init_draft(small_config, frozen, 10)
        rng = np.random.Generator(np.random.PCG64(11))
        seq = random_tokens(rng, small_config.vocab_size, 10)
        anchors = [1, 5]
        layout = build_training_layout(len(seq), anchors, small_config.block_slots)
        kv = KVStore(small_config.n_layers, small_config.n_heads, small_config.head_dim)
        golden = forward(small_config, frozen, draft, kv, layout, seq)

        from blockspec.trainer import _block_forward

        clean = prepare_clean_caches(small_config, frozen, [seq])[0]
        for a in anchors:
            trace = _block_forward(small_config, frozen, draft, clean, a, frozen.embed[seq[a + 1]])
            rows = layout.block_row_indices(a)
            assert np.array_equal(trace["logits"], golden.logits[rows])
            assert np.array_equal(trace["xf"], golden.hidden[rows])

    def test_packed_batch_equivalence(self, small_config):
        frozen = init_frozen(small_config, 12)
        draft = random_draft(small_config, 13)
        rng = np.random.Generator(np.random.PCG64(14))
        seq = random_tokens(rng, small_config.vocab_size, 12)
        kvs = prepare_clean_caches(small_config, frozen, [seq])
        a, b = 1, 6
        both = batch_loss(small_config, frozen, draft, [seq], kvs, [[a, b]], 7.0)
        only_a = batch_loss(small_config, frozen, draft, [seq], kvs, [[a]], 7.0)
        only_b = batch_loss(small_config, frozen, draft, [seq], kvs, [[b]], 7.0)
        packed = both["draft_loss"] + both["calib_loss"]
        separate = 0.5 * (
            only_a["draft_loss"] + only_a["calib_loss"] + only_b["draft_loss"] + only_b["calib_loss"]
        )
        assert abs(packed - separate) < 1e-10


class TestAnchors:
    def test_without_replacement_and_in_range(self):
        rng = RngStream(seed=0)
        for step in range(20):
            anchors = sample_anchors(20, 4, 5, rng, step, 0)
            assert len(anchors) == len(set(anchors)) == 5
            assert all(0 <= a <= 20 - 4 - 1 for a in anchors)

    def test_deterministic(self):
        a = sample_anchors(30, 3, 4, RngStream(seed=5), 7, 2)
        b = sample_anchors(30, 3, 4, RngStream(seed=5), 7, 2)
        assert a == b

    def test_capped_by_valid_positions(self):
        anchors = sample_anchors(6, 3, 10, RngStream(seed=1), 0, 0)
        assert sorted(anchors) == [0, 1, 2]


class TestHeldoutCe:
    def test_zero_init_exactly_equal(self, small_config):
        frozen = init_frozen(small_config, 20)
        draft = init_draft(small_config, frozen, 21)
        rng = np.random.Generator(np.random.PCG64(22))
        seqs = [random_tokens(rng, small_config.vocab_size, 10) for _ in range(2)]
        raw, cal = heldout_slot_ce(small_config, frozen, draft, seqs, [[1, 4], [2]])
        assert raw == cal
