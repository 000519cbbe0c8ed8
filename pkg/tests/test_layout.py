import numpy as np
import pytest

from blockspec.layout import (
    ROUTE_FROZEN,
    ROUTE_MASK,
    build_causal_layout,
    build_parallel_layout,
    build_prefill_layout,
    build_sequential_draft_layout,
    build_training_layout,
    validate_layout,
)


def visible_positions(layout, row):
    rows = [layout.rows[j].position for j in np.nonzero(layout.vis_rows[row])[0]]
    cache = list(np.nonzero(layout.vis_cache[row])[0])
    return cache, sorted(rows)


class TestTrainingLayout:
    def test_zero_anchors_is_pure_causal(self):
        layout = build_training_layout(5, [], 2)
        assert layout.n_rows == 5 and layout.n_mask == 0
        assert validate_layout(layout) is None
        for i in range(5):
            assert list(np.nonzero(layout.vis_rows[i])[0]) == list(range(i + 1))

    def test_hand_enumerated_single_anchor(self):
        # seq_len=6, anchor 2, two slots: mask rows at positions 3 and 4,
        # seeing clean rows 0..2 and each other
        layout = build_training_layout(6, [2], 2)
        assert layout.n_rows == 8
        mask_rows = layout.block_row_indices(2)
        assert [layout.rows[i].position for i in mask_rows] == [3, 4]
        for i in mask_rows:
            _, seen = visible_positions(layout, i)
            assert seen == [0, 1, 2, 3, 4]
        # clean rows never see the mask rows
        for i in range(6):
            assert not layout.vis_rows[i, mask_rows].any()
        expected = np.zeros((8, 8), dtype=bool)
        for i in range(6):
            expected[i, : i + 1] = True
        expected[6, :3] = expected[7, :3] = True
        expected[6, 6:8] = expected[7, 6:8] = True
        assert np.array_equal(layout.vis_rows, expected)

    def test_cross_block_isolation(self):
        layout = build_training_layout(6, [1, 3], 2)
        a_rows = layout.block_row_indices(1)
        b_rows = layout.block_row_indices(3)
        assert not layout.vis_rows[np.ix_(a_rows, b_rows)].any()
        assert not layout.vis_rows[np.ix_(b_rows, a_rows)].any()

    def test_anchor_too_close_to_end(self):
        with pytest.raises(ValueError, match="too close"):
            build_training_layout(6, [4], 2)


class TestParallelLayout:
    def test_row_count_formula(self):
        layout = build_parallel_layout(10, 4, range(5), 5)
        assert layout.n_rows == 1 + 4 + 5 * 5 == 30
        assert validate_layout(layout) is None

    def test_branch_zero_sees_only_cache_and_bonus(self):
        layout = build_parallel_layout(10, 4, [0], 5)
        rows = layout.block_row_indices(0)
        for i in rows:
            cache, seen = visible_positions(layout, i)
            assert cache == list(range(10))
            # bonus row at 10 plus the block itself at 11..15; no draft rows
            assert seen == [10] + [layout.rows[j].position for j in rows]

    def test_branch_hypothesis_prefix(self):
        layout = build_parallel_layout(10, 4, [2], 5)
        rows = layout.block_row_indices(2)
        for i in rows:
            _, seen = visible_positions(layout, i)
            frozen_seen = [p for p in seen if p <= 12]
            assert frozen_seen == [10, 11, 12]  # bonus, d_1, d_2 but not d_3, d_4

    def test_positions(self):
        layout = build_parallel_layout(7, 2, [0, 1, 2], 3)
        assert [r.position for r in layout.rows if r.route == ROUTE_FROZEN] == [7, 8, 9]
        for r in (0, 1, 2):
            rows = layout.block_row_indices(r)
            assert [layout.rows[i].position for i in rows] == [7 + r + 1, 7 + r + 2, 7 + r + 3]

    def test_kept_out_of_range(self):
        with pytest.raises(ValueError):
            build_parallel_layout(5, 2, [0, 3], 3)

    def test_k_must_match_slots(self):
        with pytest.raises(ValueError):
            build_parallel_layout(5, 3, [0], 3)


class TestSequentialDraftLayout:
    def test_construction(self):
        layout = build_sequential_draft_layout(8, 5)
        assert layout.n_frozen == 1 and layout.n_mask == 5
        assert layout.rows[0].position == 7 and layout.cached_len == 7
        assert [r.position for r in layout.rows[1:]] == [8, 9, 10, 11, 12]
        assert validate_layout(layout) is None

    def test_matches_parallel_branch_visibility(self):
        # the single sequential block sees [cache, bonus, itself]; branch 0 of a
        # parallel layout restricted to its rows obeys the same rules
        seq = build_sequential_draft_layout(8, 3)
        par = build_parallel_layout(7, 2, [0], 3)
        seq_rows = seq.block_row_indices(0)
        par_rows = par.block_row_indices(0)
        sub_seq = seq.vis_rows[np.ix_(seq_rows, seq_rows)]
        sub_par = par.vis_rows[np.ix_(par_rows, par_rows)]
        assert np.array_equal(sub_seq, sub_par)
        assert np.array_equal(seq.vis_cache[seq_rows], par.vis_cache[par_rows])
        # both blocks see exactly one frozen row (their bonus row)
        assert seq.vis_rows[seq_rows][:, seq.frozen_indices].all()
        assert par.vis_rows[par_rows][:, par.frozen_indices[:1]].all()
        assert not par.vis_rows[par_rows][:, par.frozen_indices[1:]].any()


class TestValidate:
    @pytest.mark.parametrize(
        "layout",
        [
            build_training_layout(8, [1, 4], 3),
            build_parallel_layout(6, 4, [0, 1, 2, 3, 4], 5),
            build_sequential_draft_layout(5, 4),
            build_causal_layout(3, 4),
            build_prefill_layout(5, 3, True),
        ],
    )
    def test_builders_pass(self, layout):
        assert validate_layout(layout) is None

    def test_mask_visible_to_frozen_reported(self):
        layout = build_training_layout(6, [2], 2)
        vis = layout.vis_rows.copy()
        vis.setflags(write=True)
        mask_row = int(layout.block_row_indices(2)[0])
        vis[1, mask_row] = True
        bad = type(layout)(layout.rows, layout.cached_len, vis, layout.vis_cache.copy(), layout.block_prefix_end)
        v = validate_layout(bad)
        assert v is not None and v.rule == "mask-visible-to-frozen"
        assert (v.row_i, v.row_j) == (1, mask_row)

    def test_cross_block_edge_reported(self):
        layout = build_training_layout(8, [1, 4], 2)
        vis = layout.vis_rows.copy()
        vis.setflags(write=True)
        a = int(layout.block_row_indices(1)[0])
        b = int(layout.block_row_indices(4)[0])
        vis[a, b] = True
        bad = type(layout)(layout.rows, layout.cached_len, vis, layout.vis_cache.copy(), layout.block_prefix_end)
        v = validate_layout(bad)
        assert v is not None and v.rule == "cross-block"

    def test_broken_causality_reported(self):
        layout = build_causal_layout(0, 4)
        vis = layout.vis_rows.copy()
        vis.setflags(write=True)
        vis[0, 3] = True  # row 0 peeks at a later position
        bad = type(layout)(layout.rows, layout.cached_len, vis, layout.vis_cache.copy(), layout.block_prefix_end)
        v = validate_layout(bad)
        assert v is not None and v.rule == "frozen-causal"


GOLDEN_PARALLEL_GRID = """\
  0 F    pos=3     cache[xxx] rows[x........]
  1 F    pos=4     cache[xxx] rows[xx.......]
  2 F    pos=5     cache[xxx] rows[xxx......]
  3 M0   pos=4     cache[xxx] rows[x..xxx...]
  4 M0   pos=5     cache[xxx] rows[x..xxx...]
  5 M0   pos=6     cache[xxx] rows[x..xxx...]
  6 M2   pos=6     cache[xxx] rows[xxx...xxx]
  7 M2   pos=7     cache[xxx] rows[xxx...xxx]
  8 M2   pos=8     cache[xxx] rows[xxx...xxx]"""


def test_debug_grid_golden():
    layout = build_parallel_layout(3, 2, [0, 2], 3)
    assert layout.to_text() == GOLDEN_PARALLEL_GRID
