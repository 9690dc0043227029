"""Linear probing of belief states.

A scripted explorer walks each house visiting the nearest unvisited
reachable object, while the belief GRU of a chosen policy is rolled over
the resulting observation stream. Per-step records (belief, visibility,
ever-seen, pose, free-space rings, quantized relative pose) are persisted
to a binary trace store. Probes are balanced binary logistic regressions
fit on PCA-compressed beliefs, scored by balanced accuracy.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import BELIEF_DIM, PolicyNet
from .sim import env as E
from .sim.house import CATEGORIES, CELL, House

log = logging.getLogger(__name__)

TRACE_MAGIC = b"SGTR"
TRACE_VERSION = 1

RING_RADII = (1.0, 1.5, 2.0)
RING_ANGLES = tuple(range(0, 360, 30))
NUM_RINGS = len(RING_RADII) * len(RING_ANGLES)  # 36

REVISIT_CELL = 0.25
REVISIT_ARC = 30

PCA_VARIANCE = 0.99
LOGISTIC_L2 = 1e-4

N_CATEGORIES = len(CATEGORIES)


class DegenerateDataError(ValueError):
    pass


class SingleClassError(ValueError):
    pass


class TraceFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Trace records and store


@dataclass(frozen=True)
class TraceRecord:
    house_seed: int
    episode_id: int
    step: int
    belief: np.ndarray          # (BELIEF_DIM,)
    visible: np.ndarray         # (N_CATEGORIES,) bool
    ever_seen: np.ndarray       # (N_CATEGORIES,) bool
    pose: tuple[float, float, int, int]  # x, z, heading, pitch
    rings: np.ndarray           # (NUM_RINGS,) bool
    state_id: int               # quantized pose relative to episode start


_REC_HEAD = struct.Struct("<qiiddiiq")  # house, episode, step, pose, state_id
_RECORD_SIZE = (_REC_HEAD.size + 8 * BELIEF_DIM + 2 * N_CATEGORIES
                + NUM_RINGS)
_FILE_HEAD = struct.Struct("<4sIIIIQ")


class TraceStore:
    """Append-only fixed-record binary file of TraceRecords."""

    def __init__(self, path, mode: str = "w"):
        self.path = Path(path)
        self.count = 0
        if mode == "w":
            self._f = open(self.path, "wb")
            self._f.write(_FILE_HEAD.pack(TRACE_MAGIC, TRACE_VERSION,
                                          BELIEF_DIM, N_CATEGORIES,
                                          NUM_RINGS, 0))
        else:
            raise ValueError(f"unsupported mode {mode!r}")

    def append(self, rec: TraceRecord) -> None:
        x, z, heading, pitch = rec.pose
        self._f.write(_REC_HEAD.pack(rec.house_seed, rec.episode_id,
                                     rec.step, x, z, heading, pitch,
                                     rec.state_id))
        self._f.write(np.asarray(rec.belief, dtype=np.float64).tobytes())
        self._f.write(np.asarray(rec.visible, dtype=np.uint8).tobytes())
        self._f.write(np.asarray(rec.ever_seen, dtype=np.uint8).tobytes())
        self._f.write(np.asarray(rec.rings, dtype=np.uint8).tobytes())
        self.count += 1

    def close(self) -> None:
        self._f.seek(len(TRACE_MAGIC) + 16)
        self._f.write(struct.pack("<Q", self.count))
        self._f.close()


@dataclass
class TraceSet:
    """Column-wise view of a trace file."""

    house_seed: np.ndarray
    episode_id: np.ndarray
    step: np.ndarray
    beliefs: np.ndarray
    visible: np.ndarray
    ever_seen: np.ndarray
    pose: np.ndarray        # (N, 4): x, z, heading, pitch
    rings: np.ndarray
    state_id: np.ndarray

    def __len__(self) -> int:
        return len(self.step)


def load_traces(path) -> TraceSet:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _FILE_HEAD.size:
        raise TraceFormatError(f"{path}: truncated header")
    magic, version, bdim, ncat, nrings, count = _FILE_HEAD.unpack_from(raw)
    if magic != TRACE_MAGIC:
        raise TraceFormatError(f"{path}: bad magic {magic!r}")
    if version != TRACE_VERSION:
        raise TraceFormatError(f"{path}: unsupported version {version}")
    if (bdim, ncat, nrings) != (BELIEF_DIM, N_CATEGORIES, NUM_RINGS):
        raise TraceFormatError(f"{path}: dimension mismatch")
    expected = _FILE_HEAD.size + count * _RECORD_SIZE
    if len(raw) != expected:
        raise TraceFormatError(
            f"{path}: size {len(raw)} != expected {expected}")
    cols = {k: [] for k in ("house", "episode", "step", "belief", "vis",
                            "seen", "pose", "rings", "sid")}
    off = _FILE_HEAD.size
    for _ in range(count):
        house, ep, step, x, z, heading, pitch, sid = _REC_HEAD.unpack_from(
            raw, off)
        off += _REC_HEAD.size
        belief = np.frombuffer(raw, dtype=np.float64, count=BELIEF_DIM,
                               offset=off)
        off += 8 * BELIEF_DIM
        vis = np.frombuffer(raw, dtype=np.uint8, count=N_CATEGORIES,
                            offset=off)
        off += N_CATEGORIES
        seen = np.frombuffer(raw, dtype=np.uint8, count=N_CATEGORIES,
                             offset=off)
        off += N_CATEGORIES
        rings = np.frombuffer(raw, dtype=np.uint8, count=NUM_RINGS,
                              offset=off)
        off += NUM_RINGS
        cols["house"].append(house)
        cols["episode"].append(ep)
        cols["step"].append(step)
        cols["belief"].append(belief)
        cols["vis"].append(vis)
        cols["seen"].append(seen)
        cols["pose"].append((x, z, heading, pitch))
        cols["rings"].append(rings)
        cols["sid"].append(sid)
    return TraceSet(
        house_seed=np.array(cols["house"], dtype=np.int64),
        episode_id=np.array(cols["episode"], dtype=np.int64),
        step=np.array(cols["step"], dtype=np.int64),
        beliefs=(np.stack(cols["belief"]) if count
                 else np.zeros((0, BELIEF_DIM))),
        visible=(np.stack(cols["vis"]).astype(bool) if count
                 else np.zeros((0, N_CATEGORIES), bool)),
        ever_seen=(np.stack(cols["seen"]).astype(bool) if count
                   else np.zeros((0, N_CATEGORIES), bool)),
        pose=(np.array(cols["pose"]) if count else np.zeros((0, 4))),
        rings=(np.stack(cols["rings"]).astype(bool) if count
               else np.zeros((0, NUM_RINGS), bool)),
        state_id=np.array(cols["sid"], dtype=np.int64))


# ---------------------------------------------------------------------------
# Labels


def quantize_relative_pose(pose: E.AgentPose, start: E.AgentPose) -> int:
    """Pack the pose delta into a single id on a 0.25 m / 30 degree grid."""
    qx = int(math.floor((pose.x - start.x) / REVISIT_CELL + 0.5))
    qz = int(math.floor((pose.z - start.z) / REVISIT_CELL + 0.5))
    qh = ((pose.heading - start.heading) % 360) // REVISIT_ARC
    return ((qx + 2048) * 4096 + (qz + 2048)) * 12 + qh


def ring_samples(house: House, pose: E.AgentPose) -> np.ndarray:
    """Free-space booleans at RING_RADII x RING_ANGLES around the agent.

    Angles are relative to the current heading; a sample is True when the
    world cell under the probe point is free and reachable.
    """
    reach = house.reachable()
    out = np.zeros(NUM_RINGS, dtype=bool)
    i = 0
    for radius in RING_RADII:
        for angle in RING_ANGLES:
            a = math.radians(pose.heading + angle)
            wx = pose.x + radius * math.sin(a)
            wz = pose.z + radius * math.cos(a)
            r, c = int(wz / CELL), int(wx / CELL)
            if wx >= 0 and wz >= 0 and r < house.rows and c < house.cols:
                out[i] = bool(reach[r, c])
            i += 1
    return out


def visibility_bitset(state: E.EnvState) -> np.ndarray:
    out = np.zeros(N_CATEGORIES, dtype=bool)
    visible = E.visible_objects(state)
    for obj in state.house.objects:
        if obj.id in visible:
            out[CATEGORY_INDEX_LOCAL[obj.category]] = True
    return out


CATEGORY_INDEX_LOCAL = {c: i for i, c in enumerate(CATEGORIES)}


# ---------------------------------------------------------------------------
# Scripted explorer


def _bfs(house: House, start: tuple[int, int]):
    """Cell distances and parents from ``start`` over reachable free cells."""
    reach = house.reachable()
    dist = np.full(reach.shape, -1, dtype=np.int64)
    parent: dict[tuple[int, int], tuple[int, int]] = {}
    queue: deque[tuple[int, int]] = deque([start])
    dist[start] = 0
    while queue:
        r, c = queue.popleft()
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nr, nc = r + dr, c + dc
            if (0 <= nr < house.rows and 0 <= nc < house.cols
                    and reach[nr, nc] and dist[nr, nc] < 0):
                dist[nr, nc] = dist[r, c] + 1
                parent[(nr, nc)] = (r, c)
                queue.append((nr, nc))
    return dist, parent


def _approach_cells(house: House, obj) -> list[tuple[int, int]]:
    """Reachable cells whose center lies within 1 m of the object."""
    reach = house.reachable()
    out = []
    for r in range(house.rows):
        for c in range(house.cols):
            if not reach[r, c]:
                continue
            dx = (c + 0.5) * CELL - obj.position[0]
            dz = (r + 0.5) * CELL - obj.position[2]
            if math.hypot(dx, dz) <= E.SUCCESS_DISTANCE:
                out.append((r, c))
    return out


def _heading_towards(dr: int, dc: int) -> int:
    return int(round(math.degrees(math.atan2(dc, dr)))) % 360


def plan_exploration(house: House, start_cell: tuple[int, int]) -> list[tuple[int, int]]:
    """Nearest-unvisited-object tour; returns the concatenated cell path."""
    visited: set[int] = set()
    cell = start_cell
    path: list[tuple[int, int]] = []
    while True:
        dist, parent = _bfs(house, cell)
        best = None
        for obj in house.objects:
            if obj.id in visited:
                continue
            cells = _approach_cells(house, obj)
            reach_cells = [(dist[rc], rc) for rc in cells if dist[rc] >= 0]
            if not reach_cells:
                visited.add(obj.id)  # unreachable: never visitable
                continue
            d, goal = min(reach_cells)
            if best is None or d < best[0]:
                best = (d, goal, obj.id)
        if best is None:
            return path
        _, goal, obj_id = best
        leg = [goal]
        while leg[-1] != cell:
            leg.append(parent[leg[-1]])
        path.extend(reversed(leg[:-1]))
        visited.add(obj_id)
        cell = goal


def _leg_actions(pose_heading: int, dr: int, dc: int) -> list[int]:
    """Rotations plus one MoveAhead to step to an adjacent cell."""
    want = _heading_towards(dr, dc)
    delta = (want - pose_heading) % 360
    if delta <= 180:
        turns = [E.ROTATE_RIGHT] * (delta // 30)
    else:
        turns = [E.ROTATE_LEFT] * ((360 - delta) // 30)
    return turns + [E.MOVE_AHEAD]


def collect_traces(policy: PolicyNet | None, houses: list[House],
                   episodes_per_house: int, seed: int, path,
                   max_steps_per_episode: int = 2000) -> int:
    """Run the scripted explorer and persist one trace file.

    The trajectory depends only on the houses and the seed, never on the
    policy, so beliefs from different policies are recorded over identical
    observation streams. Returns the number of records written.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    store = TraceStore(path)
    episode_id = 0
    for house in houses:
        reach = house.reachable()
        targets = [c for c in CATEGORIES
                   if np.isfinite(house.distance_field(c)[reach]).any()]
        if not targets:
            continue  # nothing to visit: zero-object trace for this house
        task = E.TaskSpec("ObjectNav", (targets[0],),
                          max_steps_per_episode + 1)
        for _ in range(episodes_per_house):
            start_seed = int(rng.integers(2 ** 62))
            state, obs = E.reset(house, task, start_seed)
            start_pose = state.agent
            route = plan_exploration(house, start_pose.cell)
            actions: list[int] = []
            heading = start_pose.heading
            cur = start_pose.cell
            for nxt in route:
                dr, dc = nxt[0] - cur[0], nxt[1] - cur[1]
                leg = _leg_actions(heading, dr, dc)
                actions.extend(leg)
                heading = _heading_towards(dr, dc)
                cur = nxt
            actions = actions[:max_steps_per_episode]
            _record_episode(store, policy, house, state, obs, actions,
                            episode_id, start_pose)
            episode_id += 1
    store.close()
    return store.count


def _record_episode(store, policy, house, state, obs, actions, episode_id,
                    start_pose) -> None:
    h = Tensor(np.zeros((1, BELIEF_DIM)))
    ever = np.zeros(N_CATEGORIES, dtype=bool)
    with ad.no_grad():
        step = 0
        while True:
            if policy is not None:
                _, _, h = policy.forward_obs(obs, h)
                belief = h.data[0].copy()
            else:
                belief = np.zeros(BELIEF_DIM)
            vis = visibility_bitset(state)
            ever = ever | vis
            pose = state.agent
            store.append(TraceRecord(
                house_seed=house.seed, episode_id=episode_id, step=step,
                belief=belief, visible=vis, ever_seen=ever.copy(),
                pose=(pose.x, pose.z, pose.heading, pose.pitch),
                rings=ring_samples(house, pose),
                state_id=quantize_relative_pose(pose, start_pose)))
            if step >= len(actions) or state.done:
                break
            state, obs, _, _, _ = E.step(state, actions[step])
            step += 1


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PCABasis:
    mean: np.ndarray
    components: np.ndarray      # (k, D)
    explained: float


def pca_fit(x: np.ndarray, variance: float = PCA_VARIANCE) -> PCABasis:
    """Centered eigendecomposition; keeps the smallest component count
    whose cumulative explained variance reaches ``variance``."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 2:
        raise DegenerateDataError("pca needs at least 2 samples")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (len(x) - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.maximum(evals[order], 0.0)
    evecs = evecs[:, order]
    total = evals.sum()
    if total <= 0:
        raise DegenerateDataError("constant data has no principal components")
    ratios = np.cumsum(evals) / total
    k = int(np.searchsorted(ratios, variance - 1e-12) + 1)
    return PCABasis(mean=mean, components=evecs[:, :k].T,
                    explained=float(ratios[k - 1]))


def pca_transform(basis: PCABasis, x: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) - basis.mean) @ basis.components.T


# ---------------------------------------------------------------------------
# Balanced logistic probes


@dataclass
class ProbeModel:
    pca: PCABasis | None
    weights: np.ndarray
    bias: float
    class_weights: tuple[float, float]  # (negative, positive)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def logistic_fit(z: np.ndarray, y: np.ndarray, balanced: bool = True,
                 l2: float = LOGISTIC_L2, max_iters: int = 500,
                 tol: float = 1e-6, pca: PCABasis | None = None) -> ProbeModel:
    """Full-batch gradient descent with backtracking on the weighted NLL."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == n:
        raise SingleClassError("both classes must be present")
    if balanced:
        cw = (n / (2.0 * (n - n_pos)), n / (2.0 * n_pos))
    else:
        cw = (1.0, 1.0)
    sample_w = np.where(y > 0.5, cw[1], cw[0])
    sample_w = sample_w / sample_w.sum()

    w = np.zeros(z.shape[1])
    b = 0.0

    def objective(w, b):
        logits = z @ w + b
        # log(1 + e^t) - y t, computed stably
        nll = np.maximum(logits, 0) + np.log1p(np.exp(-np.abs(logits)))
        nll = nll - y * logits
        return float(sample_w @ nll + 0.5 * l2 * w @ w)

    obj = objective(w, b)
    step = 1.0
    for _ in range(max_iters):
        p = _sigmoid(z @ w + b)
        err = sample_w * (p - y)
        gw = z.T @ err + l2 * w
        gb = float(err.sum())
        gnorm = math.sqrt(gw @ gw + gb * gb)
        if gnorm < tol:
            break
        step = min(step * 2.0, 1e4)
        while step > 1e-12:
            w2 = w - step * gw
            b2 = b - step * gb
            obj2 = objective(w2, b2)
            if obj2 <= obj - 0.5 * step * gnorm * gnorm * 1e-4:
                w, b, obj = w2, b2, obj2
                break
            step *= 0.5
    return ProbeModel(pca=pca, weights=w, bias=b, class_weights=cw)


def balanced_accuracy(model: ProbeModel, z: np.ndarray,
                      y: np.ndarray) -> float:
    """Half the sum of true-positive and true-negative rates."""
    y = np.asarray(y, dtype=bool)
    if y.all() or not y.any():
        raise SingleClassError("both classes must be present")
    pred = (np.asarray(z) @ model.weights + model.bias) > 0
    tpr = float(pred[y].mean())
    tnr = float((~pred[~y]).mean())
    return 0.5 * (tpr + tnr)


# ---------------------------------------------------------------------------
# Probe suite


PROBE_FAMILIES = ("visibility", "everseen", "reach", "revisit")


def revisit_labels(traces: TraceSet) -> np.ndarray:
    """True where the quantized relative pose was already seen earlier in
    the same episode."""
    out = np.zeros(len(traces), dtype=bool)
    seen: dict[int, set[int]] = {}
    for i in range(len(traces)):
        ep = int(traces.episode_id[i])
        sid = int(traces.state_id[i])
        bucket = seen.setdefault(ep, set())
        out[i] = sid in bucket
        bucket.add(sid)
    return out


def _probe_targets(traces: TraceSet, family: str):
    if family == "visibility":
        for i, cat in enumerate(CATEGORIES):
            yield cat, traces.visible[:, i]
    elif family == "everseen":
        for i, cat in enumerate(CATEGORIES):
            yield cat, traces.ever_seen[:, i]
    elif family == "reach":
        i = 0
        for radius in RING_RADII:
            for angle in RING_ANGLES:
                yield f"r{radius:g}_a{angle}", traces.rings[:, i]
                i += 1
    elif family == "revisit":
        yield "revisit", revisit_labels(traces)
    else:
        raise ValueError(f"unknown probe family {family!r}")


@dataclass
class ProbeResult:
    family: str
    target: str
    accuracy: float
    n_train: int
    n_test: int


@dataclass
class ProbeReport:
    results: list[ProbeResult] = field(default_factory=list)
    skipped: list[tuple[str, str]] = field(default_factory=list)
    explained_variance: float = 0.0

    def family_mean(self, family: str) -> float:
        accs = [r.accuracy for r in self.results if r.family == family]
        if not accs:
            raise ValueError(f"no fitted probes in family {family!r}")
        return float(np.mean(accs))


def run_probe_suite(traces: TraceSet, features: np.ndarray | None = None,
                    families: tuple[str, ...] = PROBE_FAMILIES,
                    seed: int = 0, test_frac: float = 0.1,
                    min_class: int = 10) -> ProbeReport:
    """Fit one balanced probe per target; each target is balanced by
    subsampling the majority class before a train/test split."""
    x = traces.beliefs if features is None else np.asarray(features)
    if len(x) != len(traces):
        raise ValueError("feature rows must match trace records")
    basis = pca_fit(x)
    z_all = pca_transform(basis, x)
    rng = np.random.Generator(np.random.PCG64(seed))
    report = ProbeReport(explained_variance=basis.explained)
    for family in families:
        for name, y in _probe_targets(traces, family):
            y = np.asarray(y, dtype=bool)
            pos = np.flatnonzero(y)
            neg = np.flatnonzero(~y)
            n = min(len(pos), len(neg))
            if n < min_class:
                log.warning("probe %s/%s skipped: minority class has %d "
                            "samples", family, name, n)
                report.skipped.append((family, name))
                continue
            pos = rng.permutation(pos)[:n]
            neg = rng.permutation(neg)[:n]
            idx = rng.permutation(np.concatenate([pos, neg]))
            n_test = max(2, int(len(idx) * test_frac))
            test, train = idx[:n_test], idx[n_test:]
            if not (0 < y[train].sum() < len(train)
                    and 0 < y[test].sum() < len(test)):
                report.skipped.append((family, name))
                continue
            model = logistic_fit(z_all[train], y[train], pca=basis)
            acc = balanced_accuracy(model, z_all[test], y[test])
            report.results.append(ProbeResult(
                family=family, target=name, accuracy=acc,
                n_train=len(train), n_test=len(test)))
    return report


def write_probe_report(report: ProbeReport, out_dir) -> None:
    """Emit probes.csv plus polar-plot data for the free-space family."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "probes.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["format_version", 1])
        writer.writerow(["family", "target", "balanced_accuracy",
                         "n_train", "n_test"])
        for r in report.results:
            writer.writerow([r.family, r.target, f"{r.accuracy:.6f}",
                             r.n_train, r.n_test])
        for family, name in report.skipped:
            writer.writerow([family, name, "skipped", 0, 0])
    polar = [r for r in report.results if r.family == "reach"]
    if polar:
        with open(out_dir / "polar.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["radius_m", "angle_deg", "balanced_accuracy"])
            for r in polar:
                radius, angle = r.target[1:].split("_a")
                writer.writerow([radius, angle, f"{r.accuracy:.6f}"])
