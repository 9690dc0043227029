"""Fixed evaluation datasets: versioned JSON-lines files of episodes.

Each record pins (house seed, generation config, start seed, ordered
targets, step budget) so an evaluation set is an immutable artifact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import TaskSpec, reset
from .house import GenerationConfig, generate_house

FORMAT_NAME = "sgcnav-dataset"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class EpisodeRecord:
    house_seed: int
    start_seed: int
    targets: tuple[str, ...]
    task_kind: str
    max_steps: int


class DatasetError(ValueError):
    pass


def write_dataset(path, records: list[EpisodeRecord],
                  house_config: GenerationConfig) -> None:
    with open(path, "w") as f:
        header = {"format": FORMAT_NAME, "version": FORMAT_VERSION,
                  "house_config": house_config.to_dict(),
                  "count": len(records)}
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for r in records:
            f.write(json.dumps({
                "house_seed": r.house_seed, "start_seed": r.start_seed,
                "targets": list(r.targets), "task_kind": r.task_kind,
                "max_steps": r.max_steps}, sort_keys=True) + "\n")


def read_dataset(path) -> tuple[GenerationConfig, list[EpisodeRecord]]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset file not found: {path}")
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("format") != FORMAT_NAME:
            raise DatasetError(f"{path}: not a {FORMAT_NAME} file")
        if header.get("version") != FORMAT_VERSION:
            raise DatasetError(f"{path}: unsupported version")
        cfg = GenerationConfig.from_dict(header["house_config"])
        records = []
        for line in f:
            if not line.strip():
                continue
            d = json.loads(line)
            records.append(EpisodeRecord(
                house_seed=d["house_seed"], start_seed=d["start_seed"],
                targets=tuple(d["targets"]), task_kind=d["task_kind"],
                max_steps=d["max_steps"]))
    if len(records) != header["count"]:
        raise DatasetError(f"{path}: record count mismatch")
    return cfg, records


def generate_eval_dataset(path, task_kind: str, n_targets: int,
                          n_episodes: int, seed: int,
                          house_config: GenerationConfig,
                          target_categories: tuple[str, ...],
                          max_steps: int,
                          seed_lo: int, seed_hi: int,
                          max_retries_per_episode: int = 50) -> list[EpisodeRecord]:
    """Sample satisfiable episodes from the held-out house seed range."""
    rng = np.random.Generator(np.random.PCG64(seed))
    records: list[EpisodeRecord] = []
    houses: dict[int, object] = {}
    for _ in range(n_episodes):
        for attempt in range(max_retries_per_episode):
            house_seed = int(rng.integers(seed_lo, seed_hi))
            if house_seed not in houses:
                houses[house_seed] = generate_house(house_seed, house_config)
            house = houses[house_seed]
            reach = house.reachable()
            available = [c for c in target_categories
                         if np.isfinite(house.distance_field(c)[reach]).any()]
            if len(available) < n_targets:
                continue
            picks = rng.choice(len(available), size=n_targets, replace=False)
            targets = tuple(available[i] for i in picks)
            start_seed = int(rng.integers(2 ** 62))
            task = TaskSpec(task_kind, targets, max_steps)
            reset(house, task, start_seed)  # raises if unsatisfiable
            records.append(EpisodeRecord(
                house_seed=house_seed, start_seed=start_seed,
                targets=targets, task_kind=task_kind, max_steps=max_steps))
            break
        else:
            raise DatasetError(
                f"could not sample a satisfiable episode after "
                f"{max_retries_per_episode} attempts")
    write_dataset(path, records, house_config)
    return records
