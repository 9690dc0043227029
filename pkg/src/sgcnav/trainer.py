"""Synchronous multi-worker PPO with GAE and auxiliary losses.

Workers own independent environments; a collection phase gathers a
fixed-horizon rollout from each, the update phase replays the recurrent
policy over the batch (one epoch, one full-batch minibatch) and applies a
clipped-surrogate update plus the configured auxiliary objective.
"""

from __future__ import annotations

import csv
import hashlib
import math
from collections import deque
from dataclasses import dataclass, field, replace as dc_replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import scenegraph as SG
from .autodiff import Tensor
from .models import (BELIEF_DIM, CPCAHead, GraphEncoder, PolicyNet,
                     ProjectionHeads, VisibilityHead, observations_to_batch)
from .sim import env as E
from .sim.house import (CATEGORIES, CATEGORY_INDEX, GenerationConfig,
                        TARGET_CATEGORIES, generate_house, shortest_path_length)

AUX_MODES = ("none", "sgc", "sgc_no_hist", "sgc_no_pos", "cpca16",
             "visibility")

TRAIN_SEED_LO, TRAIN_SEED_HI = 0, 8000
VAL_SEED_LO, VAL_SEED_HI = 8000, 10000


@dataclass
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.1
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    lr: float = 3e-4
    grad_clip: float = 0.5
    workers: int = 8
    horizon: int = 20
    total_steps: int = 100_000
    aux: str = "sgc"
    sgc_rate: float = 0.2
    sgc_weight: float = 1.0
    seed: int = 0
    task_kind: str = "ObjectNav"
    n_targets: int = 1
    max_steps: int = 300
    target_categories: tuple[str, ...] = tuple(TARGET_CATEGORIES)
    house_config: GenerationConfig = field(default_factory=GenerationConfig)
    house_seed_lo: int = TRAIN_SEED_LO
    house_seed_hi: int = TRAIN_SEED_HI
    checkpoint_every: int = 50_000
    log_every: int = 10

    def __post_init__(self):
        if self.aux not in AUX_MODES:
            raise ValueError(f"aux must be one of {AUX_MODES}, got {self.aux}")
        for name in ("gamma", "gae_lambda", "clip", "value_coef", "lr",
                     "grad_clip"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.task_kind == "MultiON" and self.n_targets < 2:
            raise ValueError("MultiON needs n_targets >= 2")


def _stream(root_seed: int, name: str) -> np.random.Generator:
    """Named substream: all randomness flows from one root seed."""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode()).digest()
    return np.random.Generator(np.random.PCG64(
        int.from_bytes(digest[:8], "little")))


class HouseCache:
    def __init__(self, cfg: GenerationConfig, capacity: int = 64):
        self.cfg = cfg
        self.capacity = capacity
        self._cache: dict[int, object] = {}

    def get(self, seed: int):
        if seed not in self._cache:
            if len(self._cache) >= self.capacity:
                self._cache.pop(next(iter(self._cache)))
            self._cache[seed] = generate_house(seed, self.cfg)
        return self._cache[seed]


@dataclass
class EpisodeStats:
    success: bool
    false_end: bool
    timeout: bool
    steps: int
    path_length: float
    shortest_length: float
    reward: float


class Worker:
    """One environment instance plus its iterative graph builder."""

    def __init__(self, worker_id: int, config: TrainConfig,
                 houses: HouseCache, rng: np.random.Generator):
        self.worker_id = worker_id
        self.config = config
        self.houses = houses
        self.rng = rng
        self.episode_id = -1
        self.episode_reward = 0.0
        self.state: E.EnvState | None = None
        self.obs: E.Observation | None = None
        self.graph: SG.SceneGraph | None = None
        self.reset_episode()

    def _sample_task(self, house) -> E.TaskSpec | None:
        reach = house.reachable()
        available = [c for c in self.config.target_categories
                     if np.isfinite(house.distance_field(c)[reach]).any()]
        if len(available) < self.config.n_targets:
            return None
        picks = self.rng.choice(len(available), size=self.config.n_targets,
                                replace=False)
        return E.TaskSpec(self.config.task_kind,
                          tuple(available[i] for i in picks),
                          self.config.max_steps)

    def reset_episode(self) -> None:
        cfg = self.config
        while True:
            seed = int(self.rng.integers(cfg.house_seed_lo, cfg.house_seed_hi))
            house = self.houses.get(seed)
            task = self._sample_task(house)
            if task is not None:
                break
        self.state, self.obs = E.reset(house, task,
                                       int(self.rng.integers(2 ** 62)))
        self.episode_id += 1
        self.episode_reward = 0.0
        self.shortest_length = min(
            shortest_path_length(house, (self.state.agent.x,
                                           self.state.agent.z), t)
            for t in task.targets)
        self.graph = SG.init_graph(self.state, with_edges=False)

    def step(self, action: int) -> tuple[float, bool, EpisodeStats | None]:
        self.state, self.obs, reward, done, _ = E.step(self.state, action)
        self.episode_reward += reward
        stats = None
        if done:
            stats = EpisodeStats(
                success=self.state.success, false_end=self.state.false_end,
                timeout=self.state.timeout, steps=self.state.step_count,
                path_length=self.state.path_length,
                shortest_length=self.shortest_length,
                reward=self.episode_reward)
            self.reset_episode()
        else:
            self.graph = SG.update_graph(self.graph, self.state,
                                         with_edges=False)
        return reward, done, stats

    def graph_snapshot(self) -> SG.SceneGraph:
        g = SG._refresh(self.graph.nodes, self.state, with_edges=True)
        if self.config.aux == "sgc_no_hist":
            g = SG.strip_history(g, self.state)
        if self.config.aux == "sgc_no_pos":
            g = SG.mask_positions(g)
        return g


@dataclass
class RolloutBatch:
    obs_flat: np.ndarray      # (T, W, obs_dim)
    goal_ids: np.ndarray      # (T, W)
    actions: np.ndarray       # (T, W)
    rewards: np.ndarray       # (T, W)
    values: np.ndarray        # (T, W)
    log_probs: np.ndarray     # (T, W)
    dones: np.ndarray         # (T, W) done after this step
    resets: np.ndarray        # (T, W) belief was reset before this step
    beliefs: np.ndarray       # (T, W, BELIEF_DIM), pre-update
    h0: np.ndarray            # (W, BELIEF_DIM)
    bootstrap: np.ndarray     # (W,)
    graphs: list              # (t, w, worker_id, episode_id, step, SceneGraph)
    visibility: np.ndarray | None  # (T, W, |categories|) for the baseline
    episodes: list[EpisodeStats]


class Trainer:
    def __init__(self, config: TrainConfig):
        self.config = config
        self.houses = HouseCache(config.house_config)
        self.policy = PolicyNet(_stream(config.seed, "policy-init"))
        self.graph_encoder = GraphEncoder(_stream(config.seed, "graph-init"))
        self.projections = ProjectionHeads(_stream(config.seed, "proj-init"))
        self.cpca = CPCAHead(_stream(config.seed, "cpca-init"))
        self.visibility = VisibilityHead(_stream(config.seed, "vis-init"))
        self.action_rng = _stream(config.seed, "action-sampling")
        self.sgc_rng = _stream(config.seed, "sgc-sampling")
        self.workers = [
            Worker(w, config, self.houses, _stream(config.seed, f"env-{w}"))
            for w in range(config.workers)]
        self.h = np.zeros((config.workers, BELIEF_DIM))
        self._pending_reset = np.zeros(config.workers, dtype=bool)
        self.optimizer = ad.Adam(self.parameters(), lr=config.lr)
        self.global_step = 0
        self.update_count = 0
        self.recent_episodes: deque[EpisodeStats] = deque(maxlen=100)

    def parameters(self):
        params = self.policy.parameters()
        if self.config.aux.startswith("sgc"):
            params += self.graph_encoder.parameters()
            params += self.projections.parameters()
        elif self.config.aux == "cpca16":
            params += self.cpca.parameters()
        elif self.config.aux == "visibility":
            params += self.visibility.parameters()
        return params

    def all_parameters(self):
        return (self.policy.parameters() + self.graph_encoder.parameters()
                + self.projections.parameters() + self.cpca.parameters()
                + self.visibility.parameters())

    # ------------------------------------------------------------------
    # rollout collection
    # ------------------------------------------------------------------

    def collect_rollouts(self) -> RolloutBatch:
        cfg = self.config
        t_len, w_len = cfg.horizon, cfg.workers
        from .sim.env import OBS_CHANNELS, EGO_WINDOW
        obs_dim = EGO_WINDOW * EGO_WINDOW * OBS_CHANNELS
        batch = RolloutBatch(
            obs_flat=np.zeros((t_len, w_len, obs_dim)),
            goal_ids=np.zeros((t_len, w_len), dtype=np.int64),
            actions=np.zeros((t_len, w_len), dtype=np.int64),
            rewards=np.zeros((t_len, w_len)),
            values=np.zeros((t_len, w_len)),
            log_probs=np.zeros((t_len, w_len)),
            dones=np.zeros((t_len, w_len), dtype=bool),
            resets=np.zeros((t_len, w_len), dtype=bool),
            beliefs=np.zeros((t_len, w_len, BELIEF_DIM)),
            h0=self.h.copy(),
            bootstrap=np.zeros(w_len),
            graphs=[],
            visibility=(np.zeros((t_len, w_len, len(CATEGORIES)))
                        if cfg.aux == "visibility" else None),
            episodes=[])

        sgc_steps = None
        if cfg.aux.startswith("sgc"):
            sgc_steps = [set(L.sample_graph_steps(t_len, cfg.sgc_rate,
                                                  self.sgc_rng))
                         for _ in range(w_len)]

        pending_reset = self._pending_reset.copy()
        with ad.no_grad():
            for t in range(t_len):
                self.h[pending_reset] = 0.0
                batch.resets[t] = pending_reset
                pending_reset = np.zeros(w_len, dtype=bool)

                obs_list = [w.obs for w in self.workers]
                flat, goals = observations_to_batch(obs_list)
                batch.obs_flat[t] = flat
                batch.goal_ids[t] = goals
                logits, values, hb = self.policy.forward(
                    Tensor(flat), goals, Tensor(self.h))
                self.h = hb.data.copy()
                batch.beliefs[t] = self.h
                batch.values[t] = values.data[:, 0]

                probs = _softmax_rows(logits.data)
                actions = np.array([
                    self.action_rng.choice(probs.shape[1], p=probs[w])
                    for w in range(w_len)])
                batch.actions[t] = actions
                batch.log_probs[t] = np.log(
                    probs[np.arange(w_len), actions] + 1e-30)

                if cfg.aux == "visibility":
                    for w, wk in enumerate(self.workers):
                        vis = E.visible_objects(wk.state)
                        objs = {o.id: o for o in wk.state.house.objects}
                        for oid in vis:
                            batch.visibility[t, w,
                                             CATEGORY_INDEX[objs[oid].category]] = 1.0

                if sgc_steps is not None:
                    for w, wk in enumerate(self.workers):
                        if t in sgc_steps[w]:
                            batch.graphs.append(
                                (t, w, wk.worker_id, wk.episode_id,
                                 wk.state.step_count, wk.graph_snapshot()))

                for w, wk in enumerate(self.workers):
                    reward, done, stats = wk.step(int(actions[w]))
                    batch.rewards[t, w] = reward
                    batch.dones[t, w] = done
                    if done:
                        pending_reset[w] = True
                    if stats is not None:
                        batch.episodes.append(stats)
                        self.recent_episodes.append(stats)

            # Bootstrap values for unfinished trajectories.
            h_next = self.h.copy()
            h_next[pending_reset] = 0.0
            obs_list = [w.obs for w in self.workers]
            flat, goals = observations_to_batch(obs_list)
            _, values, _ = self.policy.forward(Tensor(flat), goals,
                                               Tensor(h_next))
            batch.bootstrap = np.where(pending_reset, 0.0, values.data[:, 0])
        self._pending_reset = pending_reset
        self.global_step += t_len * w_len
        return batch

    # ------------------------------------------------------------------
    # update
    # ------------------------------------------------------------------

    def ppo_update(self, batch: RolloutBatch) -> dict:
        cfg = self.config
        t_len, w_len = cfg.horizon, cfg.workers
        advantages, returns = compute_gae(
            batch.rewards, batch.values, batch.dones, batch.bootstrap,
            cfg.gamma, cfg.gae_lambda)
        adv_norm = (advantages - advantages.mean()) / (advantages.std() + 1e-8)

        h = Tensor(batch.h0)
        logp_list, value_list, entropy_list = [], [], []
        belief_steps = []
        for t in range(t_len):
            if batch.resets[t].any():
                keep = Tensor((~batch.resets[t]).astype(float)[:, None])
                h = ad.mul(h, keep)
            logits, value, h = self.policy.forward(
                Tensor(batch.obs_flat[t]), batch.goal_ids[t], h)
            belief_steps.append(h)
            probs = ad.row_softmax(logits)
            logp = ad.log(probs)
            onehot = np.zeros((w_len, logits.shape[1]))
            onehot[np.arange(w_len), batch.actions[t]] = 1.0
            logp_list.append(ad.tsum(ad.mul(logp, Tensor(onehot)), axis=1))
            entropy_list.append(ad.mul(ad.tsum(ad.mul(probs, logp), axis=1),
                                       Tensor(np.array(-1.0))))
            value_list.append(value)

        logp_new = _stack_rows(logp_list)           # (T, W)
        entropy = ad.tmean(_stack_rows(entropy_list))
        values_new = ad.reshape(ad.concat(value_list, axis=0), (t_len, w_len))

        ratio = ad.exp(ad.sub(logp_new, Tensor(batch.log_probs)))
        clipped = _clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)
        adv_t = Tensor(adv_norm)
        surr = _tmin(ad.mul(ratio, adv_t), ad.mul(clipped, adv_t))
        policy_loss = ad.mul(ad.tmean(surr), Tensor(np.array(-1.0)))

        verr = ad.sub(values_new, Tensor(returns))
        value_loss = ad.tmean(ad.mul(verr, verr))

        total = ad.add(policy_loss,
                       ad.mul(value_loss, Tensor(np.array(cfg.value_coef))))
        total = ad.sub(total,
                       ad.mul(entropy, Tensor(np.array(cfg.entropy_coef))))

        aux_value = 0.0
        aux = self._aux_loss(batch, belief_steps)
        if aux is not None:
            aux_value = float(aux.data)
            total = ad.add(total, ad.mul(aux,
                                         Tensor(np.array(cfg.sgc_weight))))

        if not np.isfinite(total.data):
            raise RuntimeError(
                f"NaN/inf loss at update {self.update_count}: "
                f"policy={float(policy_loss.data)} "
                f"value={float(value_loss.data)} aux={aux_value}")

        self.optimizer.zero_grad()
        ad.backward(total)
        grad_norm = ad.clip_grad_norm(self.optimizer.params, cfg.grad_clip)
        self.optimizer.step()
        self.update_count += 1
        return {
            "policy_loss": float(policy_loss.data),
            "value_loss": float(value_loss.data),
            "entropy": float(entropy.data),
            "aux_loss": aux_value,
            "grad_norm": grad_norm,
        }

    def _aux_loss(self, batch: RolloutBatch, belief_steps) -> Tensor | None:
        cfg = self.config
        if cfg.aux.startswith("sgc"):
            if len(batch.graphs) < 2:
                return None
            h_b_cols, h_g_cols, provenance = [], [], []
            for t, w, worker_id, episode_id, step, graph in batch.graphs:
                b = ad.gather_rows(belief_steps[t], np.array([w]))
                h_b_cols.append(self.projections.project_belief(b))
                code = self.graph_encoder.encode(graph)
                h_g_cols.append(self.projections.project_graph(code))
                provenance.append((worker_id, episode_id, step))
            h_b = ad.transpose(ad.concat(h_b_cols, axis=0))
            h_g = ad.transpose(ad.concat(h_g_cols, axis=0))
            cb = L.ContrastiveBatch(h_b=h_b, h_g=h_g, provenance=provenance)
            self.last_prediction_matrix = L.prediction_matrix(cb)
            return L.sgc_loss(cb)
        if cfg.aux == "cpca16":
            losses = []
            for w in range(cfg.workers):
                beliefs_w = np.stack([bs.data[w] for bs in belief_steps])
                try:
                    losses.append(L.cpca_loss(
                        self.cpca, self.policy, beliefs_w,
                        batch.actions[:, w], batch.obs_flat[:, w],
                        batch.goal_ids[:, w], batch.dones[:, w],
                        self.sgc_rng))
                except L.DegenerateBatchError:
                    continue
            if not losses:
                return None
            total = losses[0]
            for item in losses[1:]:
                total = ad.add(total, item)
            return ad.mul(total, Tensor(np.array(1.0 / len(losses))))
        if cfg.aux == "visibility":
            beliefs = ad.concat(belief_steps, axis=0)  # (T*W, BELIEF)
            labels = batch.visibility.reshape(-1, batch.visibility.shape[-1])
            return L.visibility_loss(self.visibility, beliefs, labels)
        return None

    # ------------------------------------------------------------------
    # training loop
    # ------------------------------------------------------------------

    def train(self, out_dir, metrics_name: str = "metrics.csv",
              progress: bool = False):
        cfg = self.config
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / metrics_name
        new_file = not metrics_path.exists()
        f = open(metrics_path, "a", newline="")
        writer = csv.writer(f)
        if new_file:
            writer.writerow(["format_version", 1])
            writer.writerow(["steps", "updates", "mean_episode_reward",
                            "success_rate", "false_end_rate", "mean_ep_len",
                             "policy_loss", "value_loss", "entropy",
                             "aux_loss"])
        self.save(out_dir / "checkpoint.bin")
        last_ckpt = self.global_step
        while self.global_step < cfg.total_steps:
            batch = self.collect_rollouts()
            report = self.ppo_update(batch)
            if self.update_count % cfg.log_every == 0:
                eps = list(self.recent_episodes)
                row = [self.global_step, self.update_count,
                       round(float(np.mean([e.reward for e in eps]))
                             if eps else 0.0, 6),
                       round(float(np.mean([e.success for e in eps]))
                             if eps else 0.0, 6),
                       round(float(np.mean([e.false_end for e in eps]))
                             if eps else 0.0, 6),
                       round(float(np.mean([e.steps for e in eps]))
                             if eps else 0.0, 2),
                       round(report["policy_loss"], 6),
                       round(report["value_loss"], 6),
                       round(report["entropy"], 6),
                       round(report["aux_loss"], 6)]
                writer.writerow(row)
                f.flush()
                if progress:
                    print(f"step {self.global_step} sr="
                          f"{row[3]} false_end={row[4]}", flush=True)
            if self.global_step - last_ckpt >= cfg.checkpoint_every:
                self.save(out_dir / "checkpoint.bin")
                last_ckpt = self.global_step
        self.save(out_dir / "checkpoint.bin")
        f.close()
        return metrics_path

    def save(self, path) -> None:
        ad.save_checkpoint(path, self.all_parameters(), step=self.global_step)

    def load(self, path) -> int:
        step = ad.load_checkpoint(path, self.all_parameters())
        self.global_step = step
        return step


# ----------------------------------------------------------------------
# pure helpers
# ----------------------------------------------------------------------

def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                bootstrap: np.ndarray, gamma: float,
                lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation over (T, W) arrays."""
    if not (rewards.shape == values.shape == dones.shape):
        raise ValueError("rewards/values/dones length mismatch")
    t_len = rewards.shape[0]
    advantages = np.zeros_like(rewards)
    next_value = bootstrap.astype(float)
    gae = np.zeros(rewards.shape[1])
    for t in range(t_len - 1, -1, -1):
        not_done = 1.0 - dones[t].astype(float)
        delta = rewards[t] + gamma * not_done * next_value - values[t]
        gae = delta + gamma * lam * not_done * gae
        advantages[t] = gae
        next_value = values[t]
    returns = advantages + values
    return advantages, returns


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _clip(x: Tensor, lo: float, hi: float) -> Tensor:
    over = ad.relu(ad.sub(x, Tensor(np.array(hi))))
    under = ad.relu(ad.sub(Tensor(np.array(lo)), x))
    return ad.add(ad.sub(x, over), under)


def _tmin(a: Tensor, b: Tensor) -> Tensor:
    return ad.sub(a, ad.relu(ad.sub(a, b)))


def _stack_rows(rows: list[Tensor]) -> Tensor:
    cols = [ad.reshape(r, (1, -1)) for r in rows]
    return ad.reshape(ad.concat(cols, axis=0), (len(rows), rows[0].shape[0]))


# ----------------------------------------------------------------------
# novel-object fine-tuning
# ----------------------------------------------------------------------

class CategoryOverlapError(ValueError):
    pass


def finetune_novel_objects(checkpoint_path, new_categories, budget: int,
                           base_config: TrainConfig, out_dir,
                           seed: int | None = None) -> Trainer:
    """Freeze the belief pipeline, reinitialize the actor-critic head and
    goal embedding, and train with pure RL on the new target categories."""
    new_categories = tuple(new_categories)
    overlap = set(new_categories) & set(base_config.target_categories)
    if overlap:
        raise CategoryOverlapError(
            f"novel categories overlap training targets: {sorted(overlap)}")
    for c in new_categories:
        if c not in CATEGORIES:
            raise ValueError(f"unknown category {c!r}")

    seed = base_config.seed if seed is None else seed
    cfg = dc_replace(base_config, aux="none", total_steps=budget,
                     target_categories=new_categories,
                     n_targets=min(base_config.n_targets,
                                   len(new_categories)), seed=seed)
    trainer = Trainer(cfg)
    trainer.load(checkpoint_path)
    trainer.global_step = 0

    # Reinitialize the output heads and the goal embedding table.
    rng = _stream(seed, "finetune-init")
    trainer.policy.actor.w.data = np.zeros_like(trainer.policy.actor.w.data)
    trainer.policy.actor.b.data = np.zeros_like(trainer.policy.actor.b.data)
    trainer.policy.critic.w.data = np.zeros_like(trainer.policy.critic.w.data)
    trainer.policy.critic.b.data = np.zeros_like(trainer.policy.critic.b.data)
    trainer.policy.goal_embed.data = rng.normal(
        0.0, 0.1, size=trainer.policy.goal_embed.shape)

    trainable = {trainer.policy.actor.w.name, trainer.policy.actor.b.name,
                 trainer.policy.critic.w.name, trainer.policy.critic.b.name,
                 trainer.policy.goal_embed.name}
    for p in trainer.policy.parameters():
        if p.name not in trainable:
            p.trainable = False
            p.requires_grad = False
            p.m = np.zeros_like(p.m)
            p.v = np.zeros_like(p.v)
    trainer.optimizer = ad.Adam(
        [p for p in trainer.policy.parameters() if p.trainable],
        lr=cfg.lr)
    if budget > 0:
        trainer.train(out_dir)
    else:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        trainer.save(Path(out_dir) / "checkpoint.bin")
    return trainer
