import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from gclbench.contrast import (
    ContrastBatch,
    ContrastError,
    ModeSpec,
    corrupt_shuffle,
    sample_cross_scale,
    sample_same_scale,
)
from gclbench.nn.tensor import Tensor


def emb(n, d=3, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal((n, d)))


def brute_same_scale(ids_u, ids_v, intra):
    """Pair-by-pair enumeration of the anchor-u batch."""
    anchors = [i for i, x in enumerate(ids_u) if x in set(ids_v)]
    cands = [("v", j, y) for j, y in enumerate(ids_v)]
    if intra:
        cands += [("u", j, y) for j, y in enumerate(ids_u)]
    pos = np.zeros((len(anchors), len(cands)), bool)
    neg = np.zeros_like(pos)
    for r, i in enumerate(anchors):
        for c, (side, _, y) in enumerate(cands):
            if side == "v":
                pos[r, c] = ids_u[i] == y
                neg[r, c] = ids_u[i] != y
            else:
                neg[r, c] = ids_u[i] != y
    return anchors, pos, neg


def brute_cross_scale(graph_ids, node_gid, branch, corrupt_gid):
    pos, neg = [], []
    for gi in graph_ids:
        p = [int(x == gi) for x in node_gid]
        q = [int(x != gi and branch == "dual") for x in node_gid]
        if corrupt_gid is not None:
            p += [0] * len(corrupt_gid)
            q += [int(x == gi) for x in corrupt_gid]
        pos.append(p)
        neg.append(q)
    pos, neg = np.array(pos, bool), np.array(neg, bool)
    keep = pos.any(axis=1)
    return pos[keep], neg[keep]


class TestModeSpec:
    def test_defaults(self):
        m = ModeSpec()
        assert (m.mode, m.branch, m.intra_view_negatives) == ("LL", "dual", False)

    @pytest.mark.parametrize("mode", ["LL", "GG"])
    def test_single_branch_only_with_gl(self, mode):
        with pytest.raises(ValueError, match="single-branch"):
            ModeSpec(mode, "single")
        ModeSpec("GL", "single")

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="mode"):
            ModeSpec("LG")


class TestContrastBatch:
    def test_overlap_rejected(self):
        m = np.eye(2, dtype=bool)
        with pytest.raises(ContrastError, match="both"):
            ContrastBatch(emb(2), emb(2), m, m)

    def test_anchor_without_positive_rejected(self):
        pos = np.array([[True, False], [False, False]])
        with pytest.raises(ContrastError, match="positive"):
            ContrastBatch(emb(2), emb(2), pos, ~pos)

    def test_shape_mismatch(self):
        with pytest.raises(ContrastError, match="shape"):
            ContrastBatch(emb(2), emb(3), np.eye(2, dtype=bool), ~np.eye(2, dtype=bool))


class TestSameScale:
    def test_full_alignment_identity(self):
        b1, b2 = sample_same_scale(emb(3), emb(3, seed=1))
        for b in (b1, b2):
            np.testing.assert_array_equal(b.pos_mask, np.eye(3, dtype=bool))
            np.testing.assert_array_equal(b.neg_mask, ~np.eye(3, dtype=bool))
            assert b.neg_mask.sum() == 6

    def test_dropped_node_excluded(self):
        # view 2 lost node 1 under node dropping
        u, v = emb(3), emb(2, seed=1)
        b1, b2 = sample_same_scale(u, v, np.arange(3), np.array([0, 2]))
        assert b1.pos_mask.shape == (2, 2)
        # the unaligned node stays a negative candidate for the other direction
        assert b2.pos_mask.shape == (2, 3) and b2.neg_mask[:, 1].all()
        np.testing.assert_array_equal(b1.anchors.data, u.data[[0, 2]])
        np.testing.assert_array_equal(b1.pos_mask, np.eye(2, dtype=bool))

    def test_no_alignment_errors(self):
        with pytest.raises(ContrastError, match="no aligned"):
            sample_same_scale(emb(2), emb(2), [0, 1], [2, 3])

    def test_symmetric_directions(self):
        ids_u, ids_v = np.array([0, 1, 3]), np.array([3, 0, 2, 1])
        b1, b2 = sample_same_scale(emb(3), emb(4), ids_u, ids_v)
        assert b1.pos_mask.sum() == b2.pos_mask.sum() == 3
        np.testing.assert_array_equal(b2.anchors.data, emb(4).data[[0, 1, 3]])

    def test_exhaustive_oracle(self):
        rng = np.random.default_rng(7)
        cases = 0
        for n in range(1, 9):
            for _ in range(25):
                pool = rng.permutation(n + 2)
                ids_u = rng.permutation(pool[: rng.integers(1, n + 1)])
                ids_v = rng.permutation(np.concatenate([ids_u[:1], pool[n: n + rng.integers(0, 3)]]))
                ids_v = np.unique(np.concatenate([ids_v, rng.choice(pool, rng.integers(0, n + 1))]))
                rng.shuffle(ids_v)
                for intra in (False, True):
                    u, v = emb(len(ids_u)), emb(len(ids_v), seed=1)
                    b_uv, b_vu = sample_same_scale(u, v, ids_u, ids_v, intra)
                    for b, a_ids, c_ids in ((b_uv, ids_u, ids_v), (b_vu, ids_v, ids_u)):
                        rows, pos, neg = brute_same_scale(list(a_ids), list(c_ids), intra)
                        np.testing.assert_array_equal(b.pos_mask, pos)
                        np.testing.assert_array_equal(b.neg_mask, neg)
                    cases += 1
        assert cases == 400

    def test_intra_view_excludes_self(self):
        b, _ = sample_same_scale(emb(3), emb(3, seed=1), intra_view_negatives=True)
        assert b.candidates.shape[0] == 6
        assert (b.neg_mask.sum(axis=1) == 4).all()
        assert not b.neg_mask[np.arange(3), 3 + np.arange(3)].any()


class TestCrossScale:
    def test_single_graph_single_branch(self):
        n = 5
        h, hc = emb(n), emb(n, seed=2)
        b = sample_cross_scale(emb(1), h, [0], None, "single", h_corrupt=hc)
        assert b.pos_mask.sum() == n and b.neg_mask.sum() == n
        assert not b.pos_mask[:, n:].any() and b.neg_mask[:, n:].all()

    def test_two_graphs_dual(self):
        gid = np.array([0, 0, 0, 1, 1, 1])
        b = sample_cross_scale(emb(2), emb(6), [0, 1], gid, "dual")
        np.testing.assert_array_equal(b.pos_mask.sum(axis=1), [3, 3])
        np.testing.assert_array_equal(b.neg_mask.sum(axis=1), [3, 3])

    def test_single_graph_dual_needs_negatives(self):
        with pytest.raises(ContrastError, match="no negatives"):
            sample_cross_scale(emb(1), emb(4), [0], None, "dual")

    def test_single_branch_requires_corruption(self):
        with pytest.raises(ContrastError, match="corrupted"):
            sample_cross_scale(emb(1), emb(4), [0], None, "single")

    def test_exhaustive_oracle(self):
        checked = 0
        for n_graphs in (1, 2, 3):
            for sizes in itertools.product(range(1, 5), repeat=n_graphs):
                gid = np.repeat(np.arange(n_graphs), sizes)
                for branch, corrupt in (("dual", False), ("dual", True), ("single", True)):
                    if branch == "dual" and not corrupt and n_graphs == 1:
                        continue
                    h = emb(gid.size)
                    hc = emb(gid.size, seed=3) if corrupt else None
                    b = sample_cross_scale(emb(n_graphs), h, np.arange(n_graphs), gid, branch, hc)
                    pos, neg = brute_cross_scale(list(range(n_graphs)), list(gid), branch,
                                                 list(gid) if corrupt else None)
                    np.testing.assert_array_equal(b.pos_mask, pos)
                    np.testing.assert_array_equal(b.neg_mask, neg)
                    checked += 1
        assert checked == 4 * 2 + 16 * 3 + 64 * 3

    def test_anchor_without_nodes_dropped(self):
        # graph 1 has no nodes left in the other view
        gid = np.array([0, 0, 2, 2])
        b = sample_cross_scale(emb(3), emb(4), [0, 1, 2], gid, "dual")
        assert b.num_anchors == 2


class TestCorruptShuffle:
    def test_single_row_errors(self):
        with pytest.raises(ContrastError):
            corrupt_shuffle(np.ones((1, 3)), np.random.default_rng(0))

    def test_two_rows_swap(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        for s in range(20):
            np.testing.assert_array_equal(corrupt_shuffle(x, np.random.default_rng(s)), x[::-1])

    def test_multiset_preserved(self):
        x = np.random.default_rng(0).standard_normal((9, 4))
        y = corrupt_shuffle(x, np.random.default_rng(1))
        assert sorted(map(tuple, x)) == sorted(map(tuple, y))
        assert not np.array_equal(x, y)

    def test_uniform_over_non_identity(self):
        x = np.arange(3.0)[:, None]
        rng = np.random.default_rng(2024)
        draws = 10_000
        counts = {}
        for _ in range(draws):
            key = tuple(corrupt_shuffle(x, rng)[:, 0].astype(int))
            counts[key] = counts.get(key, 0) + 1
        assert (0, 1, 2) not in counts and len(counts) == 5
        _, p = stats.chisquare(list(counts.values()))
        assert p > 1e-3


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_masks_disjoint_and_cover_anchors(data):
    mode = data.draw(st.sampled_from(["same", "cross"]))
    if mode == "same":
        ids_u = np.array(data.draw(st.lists(st.integers(0, 9), min_size=1, max_size=8, unique=True)))
        extra = data.draw(st.lists(st.integers(0, 9), max_size=8, unique=True))
        ids_v = np.array(list(dict.fromkeys([int(ids_u[0])] + extra)))
        intra = data.draw(st.booleans())
        batches = sample_same_scale(emb(len(ids_u)), emb(len(ids_v)), ids_u, ids_v, intra)
    else:
        gid = np.array(data.draw(st.lists(st.integers(0, 3), min_size=2, max_size=10)))
        gid = np.sort(gid)
        graphs = np.unique(gid)
        branch = data.draw(st.sampled_from(["dual", "single"]))
        hc = emb(gid.size, seed=5) if branch == "single" or data.draw(st.booleans()) else None
        if branch == "dual" and hc is None and graphs.size < 2:
            return
        batches = (sample_cross_scale(emb(graphs.size), emb(gid.size), graphs, gid, branch, hc),)
    for b in batches:
        assert not (b.pos_mask & b.neg_mask).any()
        assert b.pos_mask.any(axis=1).all()
