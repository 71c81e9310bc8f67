import math

import numpy as np
import pytest
from scipy import stats

from gclbench.augment import (
    SCHEMES,
    AugmentationError,
    Augmentor,
    Composite,
    apply,
    augmentor_from_dict,
    augmentor_to_dict,
    edge_adding,
    edge_flipping,
    edge_removing,
    feature_dropout,
    feature_masking,
    mdk_diffusion,
    mdk_matrix,
    node_dropping,
    ppr_diffusion,
    ppr_matrix,
    random_walk_with_restart,
    rw_subgraph,
    survivor_map,
)
from gclbench.graph import RW_TRANSITION, batch_graphs, derive, from_edges, gen_graph_dataset, gen_sbm, validate


def complete(n):
    iu, ju = np.triu_indices(n, 1)
    return from_edges(n, np.stack([iu, ju], 1), np.eye(n))


def graph_with_m_edges(m, n=40, seed=0):
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, 1)
    pick = rng.choice(iu.size, size=m, replace=False)
    return from_edges(n, np.stack([iu[pick], ju[pick]], 1), rng.standard_normal((n, 5)))


@pytest.fixture
def sbm():
    return gen_sbm(15, 2, 0.3, 0.05, feature_dim=6, noise_sigma=0.3, seed=11)


class TestEdgeSchemes:
    def test_er_zero_is_identity(self, sbm):
        assert edge_removing(sbm, 0.0, np.random.default_rng(0)) == sbm

    def test_er_full_removal(self):
        g = edge_removing(complete(3), 1.0, np.random.default_rng(0))
        assert g.num_nodes == 3 and g.num_arcs == 0

    def test_er_binomial_mean(self):
        # retained ~ Binomial(100, 0.5): mean 50, sd of the mean sqrt(25 / 1e4) = 0.05
        g = graph_with_m_edges(100)
        rng = np.random.default_rng(123)
        kept = [edge_removing(g, 0.5, rng).num_edges for _ in range(10_000)]
        assert abs(np.mean(kept) - 50) < 0.15

    def test_ea_on_complete_graph(self):
        g = complete(5)
        assert edge_adding(g, 0.7, np.random.default_rng(0)) == g

    def test_ea_count_binomial_mean(self):
        g = graph_with_m_edges(30, n=20)
        absent = 20 * 19 // 2 - 30
        p = 0.1
        rng = np.random.default_rng(5)
        added = [edge_adding(g, p, rng).num_edges - 30 for _ in range(4000)]
        se = math.sqrt(absent * p * (1 - p) / 4000)
        assert abs(np.mean(added) - absent * p) < 3 * se

    def test_ea_keeps_existing_edges(self, sbm):
        out = edge_adding(sbm, 0.3, np.random.default_rng(1))
        before = {tuple(e) for e in sbm.edge_list()[0].tolist()}
        after = {tuple(e) for e in out.edge_list()[0].tolist()}
        assert before <= after

    def test_ea_pairs_uniform(self):
        # path 0-1-2-3 has 3 absent pairs; with p forcing one addition, each is equally likely
        g = from_edges(4, [[0, 1], [1, 2], [2, 3]])
        rng = np.random.default_rng(9)
        counts = {}
        for _ in range(3000):
            out = edge_adding(g, 0.34, rng)
            for e in out.edge_list()[0].tolist():
                if tuple(e) not in {(0, 1), (1, 2), (2, 3)}:
                    counts[tuple(e)] = counts.get(tuple(e), 0) + 1
        assert set(counts) == {(0, 2), (0, 3), (1, 3)}
        assert stats.chisquare(list(counts.values())).pvalue > 0.01

    def test_ea_batch_stays_within_graphs(self):
        b = batch_graphs(gen_graph_dataset(6, seed=0, size_range=(4, 6)))
        out = edge_adding(b, 0.5, np.random.default_rng(0))
        validate(out)
        assert out.num_edges > b.num_edges

    def test_ef_is_ea_then_er(self, sbm):
        out = edge_flipping(sbm, 0.2, np.random.default_rng(3))
        rng = np.random.default_rng(3)
        assert out == edge_removing(edge_adding(sbm, 0.2, rng), 0.2, rng)

    def test_sparsity_monotone_in_probability(self, sbm):
        rng = np.random.default_rng(0)
        er = [np.mean([edge_removing(sbm, p, rng).num_edges for _ in range(200)]) for p in (0.0, 0.3, 0.6, 0.9)]
        ea = [np.mean([edge_adding(sbm, p, rng).num_edges for _ in range(200)]) for p in (0.0, 0.05, 0.1, 0.2)]
        assert all(a > b for a, b in zip(er, er[1:]))
        assert all(a < b for a, b in zip(ea, ea[1:]))


class TestNodeDropping:
    def test_zero_is_identity(self, sbm):
        out = node_dropping(sbm, 0.0, np.random.default_rng(0))
        assert out == sbm
        assert survivor_map(out) == {i: i for i in range(sbm.num_nodes)}

    def test_all_dropped(self, sbm):
        with pytest.raises(AugmentationError, match="ND"):
            node_dropping(sbm, 1.0, np.random.default_rng(0))

    def test_drop_middle_of_path(self):
        from gclbench.augment import induced_subgraph
        g = from_edges(3, [[0, 1], [1, 2]], np.arange(3.0)[:, None])
        out = induced_subgraph(g, np.array([True, False, True]))
        assert out.num_nodes == 2 and out.num_arcs == 0
        assert survivor_map(out) == {0: 0, 2: 1}
        np.testing.assert_array_equal(out.features.ravel(), [0.0, 2.0])

    def test_survivor_mean(self):
        g = from_edges(100, [[i, i + 1] for i in range(99)])
        rng = np.random.default_rng(7)
        n = [node_dropping(g, 0.3, rng).num_nodes for _ in range(10_000)]
        # sd of the mean: sqrt(100 * 0.3 * 0.7 / 1e4) ~= 0.0458
        assert abs(np.mean(n) - 70) < 0.14

    def test_features_follow_survivors(self, sbm):
        out = node_dropping(sbm, 0.4, np.random.default_rng(2))
        np.testing.assert_array_equal(out.features, sbm.features[out.node_ids])
        np.testing.assert_array_equal(out.labels, sbm.labels[out.node_ids])


class TestRandomWalk:
    def test_budget_one_is_start_only(self, sbm):
        out = rw_subgraph(sbm, 0.2, 1, np.random.default_rng(0))
        assert out.num_nodes == 1

    def test_always_restart(self, sbm):
        out = rw_subgraph(sbm, 1.0, 50, np.random.default_rng(0))
        assert out.num_nodes == 1

    def test_edgeless_rejected(self):
        with pytest.raises(AugmentationError, match="RWS"):
            rw_subgraph(from_edges(4, []), 0.2, 5, np.random.default_rng(0))

    def test_subgraph_is_induced_on_visited(self, sbm):
        out = rw_subgraph(sbm, 0.3, 20, np.random.default_rng(4))
        validate(out)
        idx = out.node_ids
        np.testing.assert_array_equal(out.adj.toarray(), sbm.adj.toarray()[np.ix_(idx, idx)])

    @pytest.mark.parametrize("start", [0, 2])
    def test_position_distribution_matches_chain(self, start):
        # star: centre 0, leaves 1..4. Compare the walk's position after
        # `steps` moves with the explicit restart chain pi_t = e_s P^t.
        g = from_edges(5, [[0, i] for i in range(1, 5)])
        p_e, steps = 0.3, 6
        t = derive(g, RW_TRANSITION).matrix.toarray()
        restart = np.zeros((5, 5))
        restart[:, start] = 1.0
        chain = (1 - p_e) * t + p_e * restart
        pi = np.linalg.matrix_power(chain, steps)[start]
        rng = np.random.default_rng(2024)
        ends = [random_walk_with_restart(g.adj, start, p_e, steps + 1, rng)[-1] for _ in range(10_000)]
        observed = np.bincount(ends, minlength=5)
        support = pi > 0
        assert observed[~support].sum() == 0
        assert stats.chisquare(observed[support], 10_000 * pi[support]).pvalue > 0.01


class TestDiffusion:
    def test_ppr_edgeless_fixed_point(self):
        g = from_edges(3, [])
        np.testing.assert_allclose(ppr_matrix(g, 0.3), np.eye(3), atol=1e-12)
        assert ppr_diffusion(g, 0.3, 0.0).num_arcs == 0

    @pytest.mark.parametrize("g", [
        from_edges(2, [[0, 1]]),
        from_edges(5, [[0, 1], [1, 2], [2, 3], [3, 4], [0, 2]], weights=[1, 2, 1, 0.5, 1]),
    ])
    def test_ppr_matches_power_series(self, g):
        alpha = 0.15
        t = derive(g, RW_TRANSITION).matrix.toarray()
        series = np.zeros_like(t)
        term = np.eye(t.shape[0])
        for k in range(1000):
            series += alpha * (1 - alpha) ** k * term
            term = term @ t
        np.testing.assert_allclose(ppr_matrix(g, alpha), series, atol=1e-8, rtol=0)

    def test_mdk_single_step_is_transition(self, sbm):
        t = derive(sbm, RW_TRANSITION).matrix.toarray()
        np.testing.assert_array_equal(mdk_matrix(sbm, 1), t)

    def test_mdk_matches_series(self, sbm):
        t = derive(sbm, RW_TRANSITION).matrix.toarray()
        expected = sum(np.linalg.matrix_power(t, k) for k in range(1, 5)) / 4
        np.testing.assert_allclose(mdk_matrix(sbm, 4), expected, atol=1e-12)

    def test_postprocessing(self, sbm):
        for out in (ppr_diffusion(sbm, 0.2, 1e-3), mdk_diffusion(sbm, 3, 1e-3)):
            validate(out)
            a = out.adj.toarray()
            assert np.all(np.diag(a) == 0)
            np.testing.assert_array_equal(a, a.T)

    def test_threshold_drops_small_entries(self, sbm):
        s = ppr_matrix(sbm, 0.2)
        out = ppr_diffusion(sbm, 0.2, 0.02).adj.toarray()
        strong = (s >= 0.02) & (s.T >= 0.02)
        np.fill_diagonal(strong, False)
        np.testing.assert_allclose(out[strong], 0.5 * (s + s.T)[strong])
        weak = (s < 0.02) & (s.T < 0.02)
        assert np.all(out[weak] == 0)

    def test_batch_diffusion_is_block_diagonal(self):
        graphs = gen_graph_dataset(3, seed=1, size_range=(4, 5))
        b = batch_graphs(graphs)
        out = ppr_diffusion(b, 0.2, 0.0)
        validate(out)
        np.testing.assert_allclose(ppr_matrix(b, 0.2)[:graphs[0].num_nodes, :graphs[0].num_nodes],
                                   ppr_matrix(graphs[0], 0.2), atol=1e-12)


class TestFeatureSchemes:
    def test_fm_zero_is_identity(self, sbm):
        assert feature_masking(sbm, 0.0, np.random.default_rng(0)) == sbm

    def test_fm_masks_whole_columns(self):
        rng = np.random.default_rng(0)
        g = from_edges(30, [], rng.uniform(1, 2, (30, 12)))
        for _ in range(50):
            x = feature_masking(g, 0.5, rng).features
            zero_cols = (x == 0).all(axis=0)
            untouched = (x == g.features).all(axis=0)
            assert np.all(zero_cols | untouched)

    def test_fm_rate(self):
        rng = np.random.default_rng(1)
        g = from_edges(2, [], np.ones((2, 10)))
        masked = np.mean([(feature_masking(g, 0.3, rng).features[0] == 0).mean() for _ in range(10_000)])
        assert abs(masked - 0.3) < 3 * math.sqrt(0.3 * 0.7 / 100_000)

    def test_fd_rate(self):
        rng = np.random.default_rng(2)
        g = from_edges(100, [], np.ones((100, 100)))
        frac = (feature_dropout(g, 0.5, rng).features == 0).mean()
        assert abs(frac - 0.5) < 0.015

    def test_no_rescaling(self, sbm):
        x = feature_dropout(sbm, 0.5, np.random.default_rng(0)).features
        kept = x != 0
        np.testing.assert_array_equal(x[kept], sbm.features[kept])


class TestApply:
    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_purity_and_validity(self, sbm, scheme):
        aug = Augmentor(scheme, prob=0.3, walk_budget=10)
        a = apply(aug, sbm, np.random.default_rng(42))
        b = apply(aug, sbm, np.random.default_rng(42))
        validate(a)
        assert a == b

    @pytest.mark.parametrize("scheme", SCHEMES)
    def test_input_untouched(self, sbm, scheme):
        before = (sbm.adj.copy(), sbm.features.copy())
        apply(Augmentor(scheme, prob=0.5), sbm, np.random.default_rng(0))
        assert (sbm.adj != before[0]).nnz == 0
        np.testing.assert_array_equal(sbm.features, before[1])

    def test_compose_replay(self, sbm):
        comp = Composite((Augmentor("ER", prob=0.2), Augmentor("FM", prob=0.3)))
        out = apply(comp, sbm, np.random.default_rng(77))
        streams = np.random.default_rng(77).spawn(2)
        manual = feature_masking(edge_removing(sbm, 0.2, streams[0]), 0.3, streams[1])
        assert out == manual

    def test_random_choice_applies_k(self, sbm):
        comp = Composite((Augmentor("ER", prob=1.0), Augmentor("FM", prob=1.0)), mode="random_choice", k=1)
        seen = set()
        for seed in range(30):
            out = apply(comp, sbm, np.random.default_rng(seed))
            edges_gone = out.num_arcs == 0
            feats_gone = not out.features.any()
            assert edges_gone != feats_gone
            seen.add(edges_gone)
        assert seen == {True, False}

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            Augmentor("ER", prob=1.5)
        with pytest.raises(ValueError):
            Augmentor("PPR", alpha=1.0)
        with pytest.raises(ValueError):
            Augmentor("XX")
        with pytest.raises(ValueError):
            Composite(())

    def test_config_round_trip(self):
        doc = {"compose": [{"scheme": "ER", "prob": 0.3}, {"random_choice": 1, "children": ["FM", {"scheme": "PPR", "alpha": 0.2}]}]}
        aug = augmentor_from_dict(doc)
        assert augmentor_from_dict(augmentor_to_dict(aug)) == aug
