"""Network behavior: GAT dense oracle, permutation invariance, GRU bounds."""

import numpy as np
import pytest

from sgcnav import autodiff as ad
from sgcnav import models as M
from sgcnav.autodiff import Tensor
from sgcnav.scenegraph import SceneGraph, init_graph, update_graph
from sgcnav.sim import env as E
from sgcnav.sim.house import generate_house

from gradcheck import TOL, check_param_grads


def sample_graph(house_seed=0, steps=8, action_seed=5):
    house = generate_house(house_seed)
    cat = sorted({o.category for o in house.objects})[0]
    task = E.TaskSpec("ObjectNav", (cat,), steps + 1)
    state, _ = E.reset(house, task, action_seed)
    g = init_graph(state)
    rng = np.random.default_rng(action_seed)
    for _ in range(steps):
        state, _, _, done, _ = E.step(state, int(rng.integers(5)))
        if done:
            break
        g = update_graph(g, state)
    return g


class TestGATLayer:
    def test_matches_dense_oracle_on_line_graph(self):
        """3-node line 0 -> 1 -> 2, recomputed with plain numpy loops."""
        rng = np.random.default_rng(9)
        layer = M.GATLayer("t.gat", rng, 4, 3, heads=2)
        n = 3
        feats = rng.normal(size=(n, 4))
        in_mask = np.eye(n, dtype=bool)
        in_mask[1, 0] = True  # 0 feeds 1
        in_mask[2, 1] = True  # 1 feeds 2
        edge_vec = rng.normal(size=(n * n, M.EDGE_EMBED_DIM))

        out = layer(Tensor(feats), in_mask, Tensor(edge_vec)).data

        expected = np.zeros((n, 3))
        for k in range(layer.heads):
            w = layer.ws[k].data
            a1 = layer.a1[k].data[:, 0]
            a2 = layer.a2[k].data[:, 0]
            a3 = layer.a3[k].data[:, 0]
            wh = feats @ w
            head_out = np.zeros((n, 3))
            for i in range(n):
                neighbors = [j for j in range(n) if in_mask[i, j]]
                logits = []
                for j in neighbors:
                    s = wh[i] @ a1 + wh[j] @ a2 + edge_vec[i * n + j] @ a3
                    logits.append(s if s > 0 else 0.2 * s)
                logits = np.array(logits)
                alpha = np.exp(logits - logits.max())
                alpha /= alpha.sum()
                for alpha_j, j in zip(alpha, neighbors):
                    head_out[i] += alpha_j * wh[j]
            expected += head_out
        expected = np.maximum(expected / layer.heads, 0.0)
        assert np.allclose(out, expected, atol=1e-12)

    def test_isolated_node_attends_to_itself_only(self):
        rng = np.random.default_rng(1)
        layer = M.GATLayer("t.gat", rng, 4, 4, heads=1)
        feats = rng.normal(size=(2, 4))
        in_mask = np.eye(2, dtype=bool)
        edge_vec = np.zeros((4, M.EDGE_EMBED_DIM))
        out = layer(Tensor(feats), in_mask, Tensor(edge_vec)).data
        expected = np.maximum(feats @ layer.ws[0].data, 0.0)
        assert np.allclose(out, expected, atol=1e-12)

    def test_empty_graph_rejected(self):
        rng = np.random.default_rng(2)
        layer = M.GATLayer("t.gat", rng, 4, 4, heads=1)
        with pytest.raises(ValueError):
            layer(Tensor(np.zeros((0, 4))), np.zeros((0, 0), bool),
                  Tensor(np.zeros((0, M.EDGE_EMBED_DIM))))


class TestGraphEncoder:
    def test_permutation_invariance_exact(self):
        rng = np.random.default_rng(3)
        enc = M.GraphEncoder(np.random.default_rng(0))
        graphs = [sample_graph(s % 8, steps=6, action_seed=s)
                  for s in range(20)]
        for g in graphs:
            base = enc.encode(g).data
            for _ in range(5):
                perm = list(rng.permutation(len(g.nodes)))
                shuffled = SceneGraph(nodes=[g.nodes[i] for i in perm],
                                      edges=set(g.edges), step=g.step)
                assert np.array_equal(enc.encode(shuffled).data, base)

    def test_code_shape_and_finite(self):
        enc = M.GraphEncoder(np.random.default_rng(0))
        code = enc.encode(sample_graph()).data
        assert code.shape == (1, M.GRAPH_CODE_DIM)
        assert np.isfinite(code).all()

    def test_empty_graph_rejected(self):
        enc = M.GraphEncoder(np.random.default_rng(0))
        with pytest.raises(ValueError):
            enc.encode(SceneGraph(nodes=[], edges=set(), step=0))

    def test_gradients(self):
        enc = M.GraphEncoder(np.random.default_rng(0))
        g = sample_graph()
        rng = np.random.default_rng(4)
        w = rng.normal(size=(1, M.GRAPH_CODE_DIM))

        def build():
            return ad.tsum(ad.mul(enc.encode(g), Tensor(w)))

        assert check_param_grads(build, enc.parameters(), rng,
                                 entries=4) < TOL


class TestGRU:
    def test_hidden_state_bounded(self):
        rng = np.random.default_rng(5)
        cell = M.GRUCell("t.gru", rng, 8, 16)
        h = Tensor(np.zeros((4, 16)))
        for _ in range(100):
            x = Tensor(rng.normal(scale=10.0, size=(4, 8)))
            h = cell(x, h)
        assert np.abs(h.data).max() < 1.0

    def test_zero_input_zero_state_stays_finite(self):
        cell = M.GRUCell("t.gru", np.random.default_rng(0), 8, 16)
        h = cell(Tensor(np.zeros((1, 8))), Tensor(np.zeros((1, 16))))
        assert np.isfinite(h.data).all()


class TestPolicyNet:
    def test_zero_init_heads_give_uniform_policy(self):
        policy = M.PolicyNet(np.random.default_rng(0))
        rng = np.random.default_rng(1)
        obs = Tensor(rng.normal(size=(3, M.OBS_DIM)))
        logits, value, b = policy.forward(obs, [0, 1, 2],
                                          Tensor(np.zeros((3, M.BELIEF_DIM))))
        assert np.array_equal(logits.data, np.zeros((3, E.NUM_ACTIONS)))
        assert np.array_equal(value.data, np.zeros((3, 1)))
        assert b.shape == (3, M.BELIEF_DIM)

    def test_forward_is_nan_free_on_extreme_inputs(self):
        policy = M.PolicyNet(np.random.default_rng(0))
        obs = Tensor(np.full((2, M.OBS_DIM), 1.0))
        h = Tensor(np.full((2, M.BELIEF_DIM), 0.999))
        logits, value, b = policy.forward(obs, [5, 7], h)
        for t in (logits, value, b):
            assert np.isfinite(t.data).all()

    def test_observations_to_batch(self):
        grid = np.zeros((E.EGO_WINDOW, E.EGO_WINDOW, E.OBS_CHANNELS))
        obs = [E.Observation(ego_grid=grid, goal_id=3),
               E.Observation(ego_grid=grid + 1, goal_id=7)]
        flat, goals = M.observations_to_batch(obs)
        assert flat.shape == (2, M.OBS_DIM)
        assert list(goals) == [3, 7]

    def test_gradients_through_policy(self):
        policy = M.PolicyNet(np.random.default_rng(0))
        rng = np.random.default_rng(2)
        obs = Tensor(rng.normal(size=(2, M.OBS_DIM)))
        h0 = Tensor(rng.normal(size=(2, M.BELIEF_DIM)) * 0.1)
        wl = rng.normal(size=(2, E.NUM_ACTIONS))
        wv = rng.normal(size=(2, 1))

        def build():
            logits, value, b = policy.forward(obs, [1, 2], h0)
            return ad.add(ad.tsum(ad.mul(logits, Tensor(wl))),
                          ad.tsum(ad.mul(value, Tensor(wv))))

        assert check_param_grads(build, policy.parameters(), rng,
                                 entries=6) < TOL


class TestProjectionHeads:
    def test_shapes(self):
        heads = M.ProjectionHeads(np.random.default_rng(0))
        b = heads.project_belief(Tensor(np.zeros((2, M.BELIEF_DIM))))
        g = heads.project_graph(Tensor(np.zeros((2, M.GRAPH_CODE_DIM))))
        assert b.shape == (2, M.PROJECTION_DIM)
        assert g.shape == (2, M.PROJECTION_DIM)

    def test_gradients(self):
        heads = M.ProjectionHeads(np.random.default_rng(0))
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(2, M.BELIEF_DIM)))
        w = rng.normal(size=(2, M.PROJECTION_DIM))

        def build():
            return ad.tsum(ad.mul(heads.project_belief(x), Tensor(w)))

        params = heads.b1.parameters() + heads.b2.parameters()
        assert check_param_grads(build, params, rng, entries=8) < TOL


class TestAuxHeads:
    def test_visibility_head_zero_init(self):
        head = M.VisibilityHead(np.random.default_rng(0))
        out = head.head(Tensor(np.ones((2, M.BELIEF_DIM))))
        assert np.array_equal(out.data, np.zeros((2, 28)))

    def test_cpca_head_shapes(self):
        head = M.CPCAHead(np.random.default_rng(0))
        a = ad.gather_rows(head.action_embed, np.array([0, 3]))
        h = head.gru(a, Tensor(np.zeros((2, M.BELIEF_DIM))))
        s = head.score(h)
        assert s.shape == (2, M.GRU_INPUT_DIM)
