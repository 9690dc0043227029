"""Episode evaluation: success rate, SPL, episode length, false-END rate."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import BELIEF_DIM, PolicyNet
from .sim import env as E
from .sim.dataset import EpisodeRecord, read_dataset
from .sim.house import CELL, House, generate_house, shortest_path_length

# Re-exported sim-level success criterion.
success_check = E.success_check


@dataclass
class EpisodeResult:
    success: bool
    path_length: float
    shortest_length: float
    steps: int
    terminal_action: str  # "end" | "found" | "timeout"
    false_end: bool
    found_outcomes: list


def spl(results: list[EpisodeResult]) -> float:
    """Mean of S_i * l_i / max(p_i, l_i) over episodes, in [0, 1]."""
    if not results:
        return 0.0
    terms = []
    for r in results:
        if not r.success:
            terms.append(0.0)
        elif not np.isfinite(r.shortest_length):
            # Success from a start the 4-connected field calls unreachable
            # (diagonal corner crossing): no finite reference path exists.
            terms.append(1.0)
        else:
            denom = max(r.path_length, r.shortest_length)
            terms.append(r.shortest_length / denom if denom > 0 else 1.0)
    return float(np.mean(terms))


def _episode_shortest_length(house: House, start_xz, targets) -> float:
    """Geodesic through the ordered targets, greedily by nearest instance."""
    total = 0.0
    pos = start_xz
    for category in targets:
        d = shortest_path_length(house, pos, category)
        if not np.isfinite(d):
            return float("inf")
        total += d
        # Continue from the nearest instance of this target.
        best = None
        for obj in house.objects_of_category(category):
            cand = np.hypot(obj.position[0] - pos[0],
                            obj.position[2] - pos[1])
            if best is None or cand < best[0]:
                best = (cand, obj)
        pos = (best[1].position[0], best[1].position[2])
    return total


def run_episode(policy: PolicyNet, house: House, task: E.TaskSpec,
                start_seed: int, greedy: bool = True,
                rng: np.random.Generator | None = None) -> EpisodeResult:
    """Roll one episode under the policy (greedy argmax by default)."""
    state, obs = E.reset(house, task, start_seed)
    shortest = _episode_shortest_length(
        house, (state.agent.x, state.agent.z), task.targets)
    h = Tensor(np.zeros((1, BELIEF_DIM)))
    done = False
    with ad.no_grad():
        while not done:
            logits, _, h = policy.forward_obs(obs, h)
            if greedy:
                action = int(np.argmax(logits.data[0]))
            else:
                p = np.exp(logits.data[0] - logits.data[0].max())
                p /= p.sum()
                action = int(rng.choice(len(p), p=p))
            state, obs, _, done, _ = E.step(state, action)
    if state.timeout:
        terminal = "timeout"
    elif task.kind == "MultiON":
        terminal = "found"
    else:
        terminal = "end"
    return EpisodeResult(
        success=state.success, path_length=state.path_length,
        shortest_length=shortest, steps=state.step_count,
        terminal_action=terminal, false_end=state.false_end,
        found_outcomes=list(state.found_outcomes))


def evaluate(policy: PolicyNet, dataset_path, audit_path=None,
             sample_seed: int | None = None) -> dict:
    """Evaluation over a fixed dataset; returns the metrics table.

    Greedy argmax by default. With ``sample_seed`` actions are drawn from
    the policy distribution instead, each episode seeded independently so
    the run is reproducible; deterministic argmax policies can fall into
    observation loops that sampling breaks out of.
    """
    house_cfg, records = read_dataset(dataset_path)
    houses: dict[int, House] = {}
    results: list[EpisodeResult] = []
    audit = open(audit_path, "w") if audit_path else None
    for rec in records:
        if rec.house_seed not in houses:
            houses[rec.house_seed] = generate_house(rec.house_seed, house_cfg)
        task = E.TaskSpec(rec.task_kind, rec.targets, rec.max_steps)
        if sample_seed is None:
            rng, greedy = None, True
        else:
            rng = np.random.default_rng(
                [sample_seed, rec.house_seed, rec.start_seed])
            greedy = False
        result = run_episode(policy, houses[rec.house_seed], task,
                             rec.start_seed, greedy=greedy, rng=rng)
        results.append(result)
        if audit:
            audit.write(json.dumps(
                {"house_seed": rec.house_seed, "targets": list(rec.targets),
                 **asdict(result)}) + "\n")
    if audit:
        audit.close()
    return summarize(results)


def summarize(results: list[EpisodeResult]) -> dict:
    n = len(results)
    if n == 0:
        raise ValueError("no episodes to summarize")
    sr = 100.0 * np.mean([r.success for r in results])
    false_end = 100.0 * np.mean([r.false_end for r in results])
    timeout = 100.0 * np.mean([r.terminal_action == "timeout"
                               for r in results])
    correct = 100.0 * np.mean([r.success and r.terminal_action != "timeout"
                               for r in results])
    return {
        "episodes": n,
        "SR": float(sr),
        "SPL": float(100.0 * spl(results)),
        "EpLen": float(np.mean([r.steps for r in results])),
        "FalseEnd%": float(false_end),
        "Correct%": float(correct),
        "Timeout%": float(timeout),
    }
