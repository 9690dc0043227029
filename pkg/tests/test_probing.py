"""Probing pipeline: trace store, labels, PCA, logistic probes, explorer."""

import numpy as np
import pytest

from sgcnav import probing as P
from sgcnav.models import BELIEF_DIM, PolicyNet
from sgcnav.sim import env as E
from sgcnav.sim.env import AgentPose
from sgcnav.sim.house import CATEGORIES, CELL, generate_house


def synthetic_traces(n, rng, label_fn=None, episodes=4):
    """TraceSet with random labels; beliefs filled by the caller."""
    visible = rng.random((n, P.N_CATEGORIES)) < 0.3
    ever = np.zeros_like(visible)
    episode_id = rng.integers(0, episodes, size=n)
    for ep in range(episodes):
        idx = np.flatnonzero(episode_id == ep)
        acc = np.zeros(P.N_CATEGORIES, dtype=bool)
        for i in idx:
            acc = acc | visible[i]
            ever[i] = acc
    return P.TraceSet(
        house_seed=np.zeros(n, dtype=np.int64),
        episode_id=episode_id.astype(np.int64),
        step=np.arange(n, dtype=np.int64),
        beliefs=rng.normal(size=(n, 16)),
        visible=visible,
        ever_seen=ever,
        pose=np.zeros((n, 4)),
        rings=rng.random((n, P.NUM_RINGS)) < 0.5,
        state_id=rng.integers(0, 40, size=n).astype(np.int64))


class TestProbeCalibration:
    def test_label_leak_reads_back_near_one(self):
        """Features that contain the labels must probe near 100%."""
        rng = np.random.default_rng(0)
        traces = synthetic_traces(3000, rng)
        feats = np.hstack([traces.visible.astype(float) * 4.0
                           + rng.normal(scale=0.05,
                                        size=(3000, P.N_CATEGORIES)),
                           rng.normal(size=(3000, 8))])
        report = P.run_probe_suite(traces, features=feats,
                                   families=("visibility",), seed=1)
        assert report.family_mean("visibility") > 0.97

    def test_pure_noise_reads_back_at_chance(self):
        rng = np.random.default_rng(1)
        traces = synthetic_traces(3000, rng)
        feats = rng.normal(size=(3000, 24))
        report = P.run_probe_suite(traces, features=feats,
                                   families=("visibility", "reach"), seed=2)
        for family in ("visibility", "reach"):
            assert abs(report.family_mean(family) - 0.5) < 0.05

    def test_sparse_targets_are_skipped(self):
        rng = np.random.default_rng(2)
        traces = synthetic_traces(200, rng)
        traces.visible[:] = False
        traces.visible[:3, 0] = True  # below min_class
        report = P.run_probe_suite(traces, families=("visibility",), seed=0)
        assert len(report.results) == 0
        assert len(report.skipped) == P.N_CATEGORIES


class TestPCA:
    def test_component_count_tracks_variance(self):
        rng = np.random.default_rng(3)
        n = 5000
        # independent axes with variances 4, 1, 0: cumulative 0.8, 1.0
        x = np.zeros((n, 3))
        x[:, 0] = rng.normal(scale=2.0, size=n)
        x[:, 1] = rng.normal(scale=1.0, size=n)
        basis = P.pca_fit(x)
        assert basis.components.shape[0] == 2
        assert basis.explained > 0.999

    def test_one_dominant_direction(self):
        rng = np.random.default_rng(4)
        x = np.outer(rng.normal(size=1000), np.array([3.0, 4.0]))
        x += rng.normal(scale=1e-6, size=x.shape)
        assert P.pca_fit(x).components.shape[0] == 1

    def test_transform_centers_and_projects(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(200, 6)) + 10.0
        basis = P.pca_fit(x)
        z = P.pca_transform(basis, x)
        assert abs(z.mean(axis=0)).max() < 1e-9
        # projection preserves pairwise distances when all axes are kept
        if basis.components.shape[0] == 6:
            d0 = np.linalg.norm(x[0] - x[1])
            assert abs(np.linalg.norm(z[0] - z[1]) - d0) < 1e-9

    def test_constant_data_rejected(self):
        with pytest.raises(P.DegenerateDataError):
            P.pca_fit(np.ones((50, 4)))

    def test_too_few_samples_rejected(self):
        with pytest.raises(P.DegenerateDataError):
            P.pca_fit(np.ones((1, 4)))


class TestLogistic:
    def test_separable_clusters(self):
        rng = np.random.default_rng(6)
        z = np.vstack([rng.normal(-3.0, 0.3, size=(100, 2)),
                       rng.normal(3.0, 0.3, size=(100, 2))])
        y = np.repeat([0.0, 1.0], 100)
        model = P.logistic_fit(z, y)
        assert P.balanced_accuracy(model, z, y) == 1.0

    def test_single_class_rejected(self):
        with pytest.raises(P.SingleClassError):
            P.logistic_fit(np.ones((10, 2)), np.ones(10))
        model = P.logistic_fit(np.vstack([np.zeros((5, 1)),
                                          np.ones((5, 1))]),
                               np.repeat([0.0, 1.0], 5))
        with pytest.raises(P.SingleClassError):
            P.balanced_accuracy(model, np.ones((4, 1)), np.ones(4))

    def test_balanced_weights_handle_imbalance(self):
        """With 95:5 imbalance a balanced fit must not collapse to the
        majority class."""
        rng = np.random.default_rng(7)
        n_neg, n_pos = 950, 50
        z = np.vstack([rng.normal(-1.0, 1.0, size=(n_neg, 1)),
                       rng.normal(1.0, 1.0, size=(n_pos, 1))])
        y = np.concatenate([np.zeros(n_neg), np.ones(n_pos)])
        model = P.logistic_fit(z, y, balanced=True)
        acc = P.balanced_accuracy(model, z, y)
        assert acc > 0.75
        pred = (z @ model.weights + model.bias) > 0
        assert pred[y > 0.5].mean() > 0.5  # positives actually detected

    def test_class_weights_formula(self):
        z = np.vstack([np.zeros((8, 1)), np.ones((2, 1))])
        y = np.concatenate([np.zeros(8), np.ones(2)])
        model = P.logistic_fit(z, y)
        assert model.class_weights == (10 / 16, 10 / 4)


class TestLabels:
    def test_quantizer_identity_at_start(self):
        pose = AgentPose(2.125, 1.375, 90)
        sid = P.quantize_relative_pose(pose, pose)
        assert sid == ((2048 * 4096) + 2048) * 12

    def test_quantizer_translation_and_rotation(self):
        start = AgentPose(1.0, 1.0, 0)
        moved = AgentPose(1.25, 1.0, 30)
        sid = P.quantize_relative_pose(moved, start)
        assert sid == ((2049 * 4096) + 2048) * 12 + 1

    def test_quantizer_ignores_start_frame(self):
        """Only the delta matters."""
        a = P.quantize_relative_pose(AgentPose(3.0, 2.0, 60),
                                     AgentPose(2.5, 2.0, 30))
        b = P.quantize_relative_pose(AgentPose(7.0, 5.0, 120),
                                     AgentPose(6.5, 5.0, 90))
        assert a == b

    def test_revisit_labels_running_set(self):
        traces = synthetic_traces(6, np.random.default_rng(8), episodes=1)
        traces.episode_id[:] = 0
        traces.state_id[:] = [5, 6, 5, 7, 6, 5]
        labels = P.revisit_labels(traces)
        assert labels.tolist() == [False, False, True, False, True, True]

    def test_revisit_labels_reset_per_episode(self):
        traces = synthetic_traces(4, np.random.default_rng(9), episodes=1)
        traces.episode_id[:] = [0, 0, 1, 1]
        traces.state_id[:] = [5, 5, 5, 5]
        assert P.revisit_labels(traces).tolist() == [False, True,
                                                     False, True]

    def test_ring_samples_against_grid(self):
        house = generate_house(0)
        reach = house.reachable()
        pose = AgentPose(house.cols * CELL / 2, house.rows * CELL / 2, 90)
        rings = P.ring_samples(house, pose)
        i = 0
        import math
        for radius in P.RING_RADII:
            for angle in P.RING_ANGLES:
                a = math.radians(pose.heading + angle)
                wx = pose.x + radius * math.sin(a)
                wz = pose.z + radius * math.cos(a)
                r, c = int(wz / CELL), int(wx / CELL)
                inside = (wx >= 0 and wz >= 0 and r < house.rows
                          and c < house.cols)
                assert rings[i] == (inside and bool(reach[r, c]))
                i += 1


class TestTraceStore:
    def _roundtrip(self, tmp_path, n=5):
        rng = np.random.default_rng(10)
        path = tmp_path / "t.bin"
        store = P.TraceStore(path)
        recs = []
        for i in range(n):
            rec = P.TraceRecord(
                house_seed=100 + i, episode_id=i // 2, step=i,
                belief=rng.normal(size=BELIEF_DIM),
                visible=rng.random(P.N_CATEGORIES) < 0.5,
                ever_seen=rng.random(P.N_CATEGORIES) < 0.5,
                pose=(float(i), float(2 * i), 30 * i, 0),
                rings=rng.random(P.NUM_RINGS) < 0.5,
                state_id=i * 7)
            recs.append(rec)
            store.append(rec)
        store.close()
        return path, recs

    def test_round_trip_exact(self, tmp_path):
        path, recs = self._roundtrip(tmp_path)
        traces = P.load_traces(path)
        assert len(traces) == len(recs)
        for i, rec in enumerate(recs):
            assert traces.house_seed[i] == rec.house_seed
            assert traces.episode_id[i] == rec.episode_id
            assert np.array_equal(traces.beliefs[i], rec.belief)
            assert np.array_equal(traces.visible[i], rec.visible)
            assert np.array_equal(traces.ever_seen[i], rec.ever_seen)
            assert traces.pose[i].tolist() == list(rec.pose)
            assert np.array_equal(traces.rings[i], rec.rings)
            assert traces.state_id[i] == rec.state_id

    def test_bad_magic_rejected(self, tmp_path):
        path, _ = self._roundtrip(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(P.TraceFormatError):
            P.load_traces(path)

    def test_truncation_rejected(self, tmp_path):
        path, _ = self._roundtrip(tmp_path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(P.TraceFormatError):
            P.load_traces(path)

    def test_bad_version_rejected(self, tmp_path):
        path, _ = self._roundtrip(tmp_path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(P.TraceFormatError):
            P.load_traces(path)


class TestExplorer:
    def test_route_steps_are_adjacent_and_reachable(self):
        house = generate_house(0)
        reach = house.reachable()
        start = tuple(np.argwhere(reach)[0])
        route = P.plan_exploration(house, start)
        cur = start
        for cell in route:
            assert abs(cell[0] - cur[0]) + abs(cell[1] - cur[1]) == 1
            assert reach[cell]
            cur = cell

    def test_first_visit_is_nearest_object(self):
        house = generate_house(1)
        reach = house.reachable()
        start = tuple(np.argwhere(reach)[0])
        dist, _ = P._bfs(house, start)
        best = None
        for obj in house.objects:
            cells = [dist[rc] for rc in P._approach_cells(house, obj)
                     if dist[rc] >= 0]
            if cells:
                best = min(cells) if best is None else min(best, min(cells))
        route = P.plan_exploration(house, start)
        if best is None:
            assert route == []
            return
        # walking the route, some object must come within reach after
        # exactly `best` steps, not later
        for steps, cell in enumerate([start] + route):
            near = any(
                cell in P._approach_cells(house, obj)
                for obj in house.objects)
            if near:
                assert steps == best
                break

    def test_trace_collection_deterministic(self, tmp_path):
        houses = [generate_house(s) for s in (8000, 8001)]
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        na = P.collect_traces(None, houses, 1, seed=5, path=a,
                              max_steps_per_episode=80)
        nb = P.collect_traces(None, houses, 1, seed=5, path=b,
                              max_steps_per_episode=80)
        assert na == nb > 0
        assert a.read_bytes() == b.read_bytes()

    def test_trajectory_independent_of_policy(self, tmp_path):
        houses = [generate_house(8000)]
        a = tmp_path / "none.bin"
        b = tmp_path / "pol.bin"
        P.collect_traces(None, houses, 1, seed=3, path=a,
                         max_steps_per_episode=60)
        policy = PolicyNet(np.random.default_rng(0))
        P.collect_traces(policy, houses, 1, seed=3, path=b,
                         max_steps_per_episode=60)
        ta, tb = P.load_traces(a), P.load_traces(b)
        assert np.array_equal(ta.pose, tb.pose)
        assert np.array_equal(ta.visible, tb.visible)
        assert np.array_equal(ta.beliefs, np.zeros_like(ta.beliefs))
        assert not np.array_equal(tb.beliefs, np.zeros_like(tb.beliefs))

    def test_ever_seen_is_running_or_of_visible(self, tmp_path):
        houses = [generate_house(8002)]
        path = tmp_path / "t.bin"
        P.collect_traces(None, houses, 2, seed=1, path=path,
                         max_steps_per_episode=120)
        traces = P.load_traces(path)
        for ep in np.unique(traces.episode_id):
            idx = np.flatnonzero(traces.episode_id == ep)
            acc = np.zeros(P.N_CATEGORIES, dtype=bool)
            for i in idx:
                acc = acc | traces.visible[i]
                assert np.array_equal(traces.ever_seen[i], acc)
