import math

import numpy as np
import pytest

from gclbench.graph import SYM_NORM_SELFLOOP, batch_graphs, derive, from_edges, gen_graph_dataset, gen_sbm
from gclbench.nn import (
    BatchNorm,
    EncoderSpec,
    GCNEncoder,
    GINEncoder,
    Linear,
    MLP,
    Adam,
    AdamState,
    ShapeError,
    Tensor,
    adam_step,
    ema_update,
    gcn_layer,
    gin_layer,
    load_checkpoint,
    parameter,
    readout,
    save_checkpoint,
)
from gclbench.nn import tensor as T
from gclbench.nn.gradcheck import check_gradients


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class TestForwardOps:
    def test_softplus_zero(self):
        assert T.softplus(Tensor(0.0)).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_softplus_extremes_stable(self):
        out = T.softplus(Tensor([-800.0, 800.0])).data
        np.testing.assert_allclose(out, [0.0, 800.0])

    def test_sigmoid_extremes(self):
        np.testing.assert_allclose(T.sigmoid(Tensor([-800.0, 0.0, 800.0])).data, [0.0, 0.5, 1.0])

    def test_l2_row_normalize(self, rng):
        y = T.l2_row_normalize(Tensor(rng.standard_normal((7, 5)))).data
        np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-12)

    def test_batch_norm_standardizes(self, rng):
        bn = BatchNorm(4)
        y = bn(Tensor(rng.standard_normal((50, 4)) * 3 + 2)).data
        np.testing.assert_allclose(y.mean(0), 0.0, atol=1e-9)
        np.testing.assert_allclose(y.var(0), 1.0, atol=1e-6)

    def test_batch_norm_eval_uses_running_stats(self, rng):
        bn = BatchNorm(3)
        x = rng.standard_normal((40, 3)) + 5
        bn(Tensor(x))
        np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(0, keepdims=True))
        bn.eval()
        y = bn(Tensor(x)).data
        expected = (x - bn.running_mean) / np.sqrt(bn.running_var + bn.eps)
        np.testing.assert_allclose(y, expected)

    def test_shape_mismatch_lists_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))

    def test_non_finite_trips(self):
        with pytest.raises(FloatingPointError, match="log"):
            T.log(Tensor([0.0]))

    def test_masked_logsumexp(self, rng):
        x = rng.standard_normal((4, 6)) * 30
        mask = rng.random((4, 6)) < 0.5
        mask[:, 0] = True
        got = T.masked_logsumexp(Tensor(x), mask).data
        expected = [np.log(np.sum(np.exp(x[i][mask[i]].astype(np.longdouble)))) for i in range(4)]
        np.testing.assert_allclose(got, np.array(expected, dtype=float), rtol=1e-12)


class TestBackward:
    def test_sum(self, rng):
        w = parameter(rng.standard_normal((3, 4)))
        w.sum().backward()
        np.testing.assert_array_equal(w.grad, np.ones((3, 4)))

    def test_square(self, rng):
        w = parameter(rng.standard_normal((3, 4)))
        (w * w).sum().backward()
        np.testing.assert_allclose(w.grad, 2 * w.data)

    def test_fan_out_accumulates(self):
        w = parameter([2.0])
        (w * 3.0 + w * w).sum().backward()
        np.testing.assert_allclose(w.grad, [3.0 + 4.0])

    def test_twice_errors(self, rng):
        w = parameter(rng.standard_normal(3))
        loss = (w * w).sum()
        loss.backward()
        with pytest.raises(RuntimeError, match="twice"):
            loss.backward()

    def test_non_scalar(self, rng):
        w = parameter(rng.standard_normal(3))
        with pytest.raises(ShapeError):
            (w * 2.0).backward()

    def test_sparse_operand_constant(self, rng):
        g = gen_sbm(4, 2, 0.7, 0.2, seed=0)
        x = parameter(rng.standard_normal((8, 3)))
        T.spmm(g.adj, x).sum().backward()
        np.testing.assert_allclose(x.grad, np.asarray(g.adj.T @ np.ones((8, 3))))

    @pytest.mark.parametrize("op", [
        lambda a, b: (a * b).sum(),
        lambda a, b: (a / (b * b + 1.0)).sum(),
        lambda a, b: (a @ b.T).sum(),
        lambda a, b: T.softplus(a - b).mean(),
        lambda a, b: T.sigmoid(a * b).sum(),
        lambda a, b: T.log(T.exp(a) + 1.0).sum(),
        lambda a, b: T.sqrt(a * a + 1.0).sum(),
        lambda a, b: (T.l2_row_normalize(a) * b).sum(),
        lambda a, b: (T.concat([a, b], axis=0) ** 3).sum(),
        lambda a, b: (T.concat([a, b], axis=1).mean(axis=0) * T.tsum(b, axis=1).mean()).sum(),
        lambda a, b: T.masked_logsumexp(a @ b.T, np.eye(4, dtype=bool) | (np.arange(4)[:, None] < 2)).sum(),
        lambda a, b: T.row_distances(a, b * 2.0).sum(),
        lambda a, b: (T.take_rows(a, [0, 0, 3]) * T.take_rows(b, [1, 2, 2])).sum(),
        lambda a, b: (T.segment_sum(a, np.array([0, 1, 0, 1]), 2) ** 2).sum(),
        lambda a, b: (T.transpose(a) @ b).sum(),
        lambda a, b: T.maximum(a - b, 0.1).sum(),
        lambda a, b: (T.clamp(a, -0.5, 0.5) * b).sum(),
        lambda a, b: (T.relu(a) * b).sum(),
    ])
    def test_ops_match_finite_differences(self, op):
        r = np.random.default_rng(3)
        a = parameter(r.standard_normal((4, 3)))
        b = parameter(r.standard_normal((4, 3)))
        assert check_gradients(lambda: op(a, b), [a, b]) < 1e-6

    def test_prelu_gradient(self):
        r = np.random.default_rng(4)
        x = parameter(r.standard_normal((5, 3)))
        s = parameter(np.full((1, 3), 0.25))
        assert check_gradients(lambda: (T.prelu(x, s) ** 2).sum(), [x, s]) < 1e-6

    def test_batch_norm_gradient(self):
        r = np.random.default_rng(5)
        x = parameter(r.standard_normal((6, 3)))
        gamma = parameter(r.uniform(0.5, 1.5, (1, 3)))
        beta = parameter(r.standard_normal((1, 3)))
        w = r.standard_normal((6, 3))
        loss = lambda: (T.batch_norm(x, gamma, beta) * w).sum()
        assert check_gradients(loss, [x, gamma, beta]) < 1e-5


class TestLayers:
    def test_gcn_edgeless_is_rowwise(self, rng):
        g = from_edges(4, [], rng.standard_normal((4, 3)))
        w = parameter(rng.standard_normal((3, 2)))
        a_hat = derive(g, SYM_NORM_SELFLOOP).matrix
        out = gcn_layer(Tensor(g.features), a_hat, w).data
        np.testing.assert_allclose(out, np.maximum(g.features @ w.data, 0))

    def test_gcn_two_node_path(self, rng):
        g = from_edges(2, [[0, 1]], rng.standard_normal((2, 3)))
        w = rng.standard_normal((3, 2))
        # A + I = ones, degrees 2: A_hat = ones / 2
        dense = np.full((2, 2), 0.5) @ g.features @ w
        out = gcn_layer(Tensor(g.features), derive(g, SYM_NORM_SELFLOOP).matrix, Tensor(w), act=lambda t: t).data
        np.testing.assert_allclose(out, dense, atol=1e-14)

    def test_gin_isolated_node(self, rng):
        g = from_edges(3, [[0, 1]], rng.standard_normal((3, 2)))
        mlp = MLP(2, 4, 4, rng)
        out = gin_layer(Tensor(g.features), g.adj, mlp).data
        solo = mlp(Tensor(g.features[2:3])).data
        np.testing.assert_allclose(out[2:3], solo, atol=1e-14)

    @pytest.mark.parametrize("kind", ["GCN", "GIN"])
    @pytest.mark.parametrize("bn", [False, True])
    def test_permutation_equivariance(self, kind, bn):
        g = gen_sbm(6, 2, 0.6, 0.2, feature_dim=3, noise_sigma=0.5, seed=1)
        enc = (GCNEncoder if kind == "GCN" else GINEncoder)(3, EncoderSpec(kind, 2, 5, use_batchnorm=bn), np.random.default_rng(0))
        perm = np.random.default_rng(2).permutation(g.num_nodes)
        adj = g.adj[perm][:, perm].tocsr()
        adj.sort_indices()
        gp = from_edges(g.num_nodes, np.stack(adj.nonzero(), 1), g.features[perm], weights=adj.data)
        np.testing.assert_allclose(enc(gp).data, enc(g).data[perm], atol=1e-10)

    def test_readout_identities(self, rng):
        h = Tensor(rng.standard_normal((5, 3)))
        gid = np.array([0, 0, 1, 1, 1])
        mean = readout(h, gid, "mean").data
        total = readout(h, gid, "sum").data
        np.testing.assert_allclose(total, mean * np.array([[2], [3]]))
        one = Tensor(rng.standard_normal((1, 3)))
        np.testing.assert_array_equal(readout(one, [0], "mean").data, one.data)
        np.testing.assert_array_equal(readout(one, [0], "sum").data, one.data)
        same = Tensor(np.tile([[1.0, 2.0]], (4, 1)))
        np.testing.assert_allclose(readout(same, None, "mean").data, [[1.0, 2.0]])

    def test_readout_permutation_invariant(self, rng):
        h = rng.standard_normal((6, 3))
        gid = np.array([0, 1, 0, 1, 1, 0])
        perm = rng.permutation(6)
        np.testing.assert_allclose(readout(Tensor(h[perm]), gid[perm]).data, readout(Tensor(h), gid).data, atol=1e-14)

    def test_readout_empty_group(self, rng):
        with pytest.raises(ValueError, match="no nodes"):
            readout(Tensor(np.ones((2, 2))), [0, 2], num_graphs=3)

    @pytest.mark.parametrize("kind", ["GCN", "GIN"])
    def test_encoder_gradients(self, kind):
        r = np.random.default_rng(7)
        if kind == "GCN":
            g = gen_sbm(4, 2, 0.7, 0.2, feature_dim=3, noise_sigma=0.5, seed=3)
        else:
            g = batch_graphs(gen_graph_dataset(3, seed=0, size_range=(3, 4)))
        enc = (GCNEncoder if kind == "GCN" else GINEncoder)(g.features.shape[1], EncoderSpec(kind, 2, 4, activation="prelu", use_batchnorm=True), r)
        w = r.standard_normal((g.num_nodes, 4))
        err = check_gradients(lambda: (enc(g) * w).sum(), enc.parameters())
        assert err < 1e-4


class TestAdam:
    def test_zero_gradient_no_decay(self):
        p = [np.array([1.0, -2.0])]
        out = adam_step(p, [np.zeros(2)], lr=0.1, weight_decay=0.0, state=AdamState())
        np.testing.assert_array_equal(out[0], p[0])

    def test_first_step_is_lr(self):
        # m1 = 0.1 g, v1 = 0.001 g^2; bias-corrected ratio = g / |g| so the step is lr (minus eps slack)
        out = adam_step([np.array([0.0])], [np.array([3.0])], lr=0.01, weight_decay=0.0, state=AdamState())
        assert out[0][0] == pytest.approx(-0.01, rel=1e-7)

    def test_hand_unrolled_recurrence(self):
        state = AdamState()
        p = np.array([0.5])
        m = v = 0.0
        x = 0.5
        for t in range(1, 6):
            g = 2 * x
            p = adam_step([p], [np.array([g])], lr=0.05, weight_decay=0.0, state=state)[0]
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - 0.05 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            assert p[0] == pytest.approx(x, rel=1e-12)

    def test_decay_only_shrinks(self):
        state = AdamState()
        p = [np.array([3.0, -4.0])]
        norms = []
        for _ in range(10):
            p = adam_step(p, [np.zeros(2)], lr=0.1, weight_decay=0.5, state=state)
            norms.append(np.linalg.norm(p[0]))
        assert all(a > b for a, b in zip(norms, norms[1:]))

    def test_state_mismatch(self):
        state = AdamState()
        adam_step([np.zeros(2)], [np.zeros(2)], 0.1, 0.0, state)
        with pytest.raises(ValueError):
            adam_step([np.zeros(3)], [np.zeros(3)], 0.1, 0.0, state)

    def test_optimizer_minimizes(self, rng):
        w = parameter(rng.standard_normal(5))
        opt = Adam([w], lr=0.1)
        for _ in range(300):
            opt.zero_grad()
            ((w - 1.0) * (w - 1.0)).sum().backward()
            opt.step()
        np.testing.assert_allclose(w.data, 1.0, atol=1e-3)


def test_ema_decay_zero_copies():
    t, o = [Tensor(np.zeros(3))], [parameter(np.arange(3.0))]
    ema_update(t, o, 0.0)
    np.testing.assert_array_equal(t[0].data, o[0].data)


def test_frozen_copy_takes_no_gradient(rng):
    lin = Linear(3, 2, rng)
    target = lin.frozen_copy()
    assert all(not p.requires_grad for p in target.parameters())
    x = Tensor(rng.standard_normal((4, 3)))
    (lin(x) * target(x)).sum().backward()
    assert lin.weight.grad is not None and target.weight.grad is None


def test_checkpoint_round_trip(tmp_path, rng):
    enc = GINEncoder(3, EncoderSpec("GIN", 2, 4), rng)
    save_checkpoint(tmp_path, enc.state_dict())
    state = load_checkpoint(tmp_path)
    other = GINEncoder(3, EncoderSpec("GIN", 2, 4), np.random.default_rng(99))
    other.load_state_dict(state)
    for k, v in enc.state_dict().items():
        np.testing.assert_array_equal(other.state_dict()[k], v)
    manifest = (tmp_path / "manifest.json").read_text()
    assert "mlps.0.lin1.weight" in manifest
    assert (tmp_path / "params.bin").stat().st_size == 8 * sum(v.size for v in state.values())
