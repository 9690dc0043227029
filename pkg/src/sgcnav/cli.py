"""Command-line experiment orchestration.

Subcommands: gen-houses, train, eval, finetune, trace, probe,
inspect-graph, plot-data. Exit codes: 0 success, 1 runtime error,
2 usage error. The root seed can be overridden with the SGCNAV_SEED
environment variable.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import probing as P
from . import scenegraph as SG
from .autodiff import load_checkpoint
from .evalmetrics import evaluate
from .models import (CPCAHead, GraphEncoder, PolicyNet, ProjectionHeads,
                     VisibilityHead)
from .sim.dataset import generate_eval_dataset
from .sim.house import GenerationConfig, generate_house
from .trainer import (AUX_MODES, TrainConfig, Trainer, VAL_SEED_HI,
                      VAL_SEED_LO, _stream, finetune_novel_objects)

SEED_ENV_VAR = "SGCNAV_SEED"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config handling


_CONFIG_EXTRA_KEYS = {"seeds"}


def load_config(path) -> tuple[TrainConfig, dict]:
    """Parse a JSON config into a TrainConfig; unknown keys are rejected.

    Returns (config, extras) where extras holds non-TrainConfig keys such
    as the seed list.
    """
    with open(path) as f:
        raw = json.load(f)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(raw) - known - _CONFIG_EXTRA_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    extras = {k: raw.pop(k) for k in list(raw) if k in _CONFIG_EXTRA_KEYS}
    if "house_config" in raw:
        raw["house_config"] = GenerationConfig.from_dict(raw["house_config"])
    if "target_categories" in raw:
        raw["target_categories"] = tuple(raw["target_categories"])
    try:
        cfg = TrainConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return cfg, extras


def resolved_config_dict(cfg: TrainConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["house_config"] = cfg.house_config.to_dict()
    out["target_categories"] = list(cfg.target_categories)
    return out


def source_hash() -> str:
    """Content hash over the package sources, for run provenance."""
    root = Path(__file__).parent
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*.py")):
        digest.update(path.relative_to(root).as_posix().encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def write_run_manifest(out_dir: Path, cfg: TrainConfig,
                       seeds: list[int]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.resolved.json", "w") as f:
        json.dump({"version": __version__, "source_hash": source_hash(),
                   "seeds": seeds, "config": resolved_config_dict(cfg)},
                  f, indent=2, sort_keys=True)


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _apply_seed_env(seed: int) -> int:
    override = os.environ.get(SEED_ENV_VAR)
    if override is not None:
        return int(override)
    return seed


def build_networks(seed: int = 0):
    """All five networks, as stored in a training checkpoint."""
    policy = PolicyNet(_stream(seed, "policy-init"))
    nets = {
        "policy": policy,
        "graph_encoder": GraphEncoder(_stream(seed, "graph-init")),
        "projections": ProjectionHeads(_stream(seed, "proj-init")),
        "cpca": CPCAHead(_stream(seed, "cpca-init")),
        "visibility": VisibilityHead(_stream(seed, "vis-init")),
    }
    return nets


def load_policy(checkpoint_path) -> PolicyNet:
    nets = build_networks()
    params = []
    for net in nets.values():
        params += net.parameters()
    load_checkpoint(checkpoint_path, params)
    return nets["policy"]


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_houses(args) -> int:
    house_cfg = GenerationConfig()
    if args.config:
        cfg, _ = load_config(args.config)
        house_cfg = cfg.house_config
    seed = _apply_seed_env(args.seed)
    if args.seed_lo < VAL_SEED_LO or args.seed_hi > VAL_SEED_HI:
        print(f"warning: seed range [{args.seed_lo}, {args.seed_hi}) leaves "
              f"the held-out validation range [{VAL_SEED_LO}, {VAL_SEED_HI})",
              file=sys.stderr)
    records = generate_eval_dataset(
        args.out, task_kind=args.task, n_targets=args.n_targets,
        n_episodes=args.episodes, seed=seed, house_config=house_cfg,
        target_categories=tuple(args.categories.split(","))
        if args.categories else tuple(TrainConfig().target_categories),
        max_steps=args.max_steps, seed_lo=args.seed_lo, seed_hi=args.seed_hi)
    print(f"wrote {len(records)} episodes to {args.out} "
          f"(sha256 {file_checksum(args.out)[:12]})")
    return 0


def cmd_train(args) -> int:
    cfg, extras = load_config(args.config)
    if args.aux:
        cfg = dataclasses.replace(cfg, aux=args.aux)
    if args.steps:
        cfg = dataclasses.replace(cfg, total_steps=args.steps)
    seed = _apply_seed_env(args.seed if args.seed is not None else cfg.seed)
    cfg = dataclasses.replace(cfg, seed=seed)
    out_dir = Path(args.out)
    seeds = extras.get("seeds", [seed])
    write_run_manifest(out_dir, cfg, seeds)
    trainer = Trainer(cfg)
    if args.resume:
        trainer.load(out_dir / "checkpoint.bin")
    trainer.train(out_dir, progress=args.progress)
    if args.dump_prediction_matrix:
        matrix = getattr(trainer, "last_prediction_matrix", None)
        if matrix is None:
            print("no prediction matrix recorded (aux mode without SGC "
                  "batches)", file=sys.stderr)
            return 1
        np.savetxt(out_dir / "prediction_matrix.csv", matrix, delimiter=",")
    print(f"trained {trainer.global_step} steps "
          f"({trainer.update_count} updates) into {out_dir}")
    return 0


def cmd_eval(args) -> int:
    before = file_checksum(args.dataset)
    policy = load_policy(args.checkpoint)
    metrics = evaluate(policy, args.dataset, audit_path=args.audit,
                       sample_seed=args.sample_seed)
    if file_checksum(args.dataset) != before:
        raise RuntimeError(f"dataset {args.dataset} changed during eval")
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_finetune(args) -> int:
    base, _ = load_config(args.config) if args.config else (TrainConfig(), {})
    seed = _apply_seed_env(args.seed if args.seed is not None else base.seed)
    categories = tuple(args.categories.split(","))
    resolved = dataclasses.replace(
        base, aux="none", total_steps=args.budget, seed=seed,
        target_categories=categories)
    write_run_manifest(Path(args.out), resolved, [seed])
    trainer = finetune_novel_objects(
        args.checkpoint, categories, args.budget, base, args.out, seed=seed)
    print(f"fine-tuned {trainer.global_step} steps into {args.out}")
    return 0


def cmd_trace(args) -> int:
    seed = _apply_seed_env(args.seed)
    lo, hi = (int(x) for x in args.houses.split(":"))
    house_cfg = GenerationConfig()
    if args.config:
        cfg, _ = load_config(args.config)
        house_cfg = cfg.house_config
    houses = [generate_house(s, house_cfg) for s in range(lo, hi)]
    policy = load_policy(args.checkpoint) if args.checkpoint else None
    count = P.collect_traces(policy, houses, args.episodes, seed, args.out)
    print(f"wrote {count} trace records to {args.out}")
    return 0


def cmd_probe(args) -> int:
    traces = P.load_traces(args.traces)
    families = tuple(args.targets.split(","))
    for family in families:
        if family not in P.PROBE_FAMILIES:
            raise ConfigError(f"unknown probe family {family!r}; choose "
                              f"from {P.PROBE_FAMILIES}")
    seed = _apply_seed_env(args.seed)
    report = P.run_probe_suite(traces, families=families, seed=seed)
    P.write_probe_report(report, args.out)
    for family in families:
        try:
            print(f"{family}: mean balanced accuracy "
                  f"{report.family_mean(family):.4f}")
        except ValueError:
            print(f"{family}: all targets skipped")
    return 0


def cmd_inspect_graph(args) -> int:
    for i, (episode_id, step, worker_id, g) in enumerate(
            SG.read_graph_stream(args.stream)):
        if args.index is not None and i != args.index:
            continue
        kinds = {}
        for node in g.nodes:
            kinds[node.kind.name] = kinds.get(node.kind.name, 0) + 1
        print(f"[{i}] episode={episode_id} step={step} worker={worker_id} "
              f"nodes={len(g.nodes)} {kinds} edges={len(g.edges)}")
        if args.index is not None:
            for src, dst, rel in sorted(g.edges):
                print(f"  {src} -[{rel.name}]-> {dst}")
            return 0
    return 0


def cmd_plot_data(args) -> int:
    run = Path(args.run)
    if not run.is_dir():
        raise FileNotFoundError(f"run directory not found: {run}")
    out = run / "plots"
    out.mkdir(exist_ok=True)
    emitted = []

    metrics = run / "metrics.csv"
    if metrics.exists():
        with open(metrics) as f:
            rows = list(csv.reader(f))
        with open(out / "aux_loss_curve.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["steps", "aux_loss"])
            for row in rows[2:]:
                writer.writerow([row[0], row[9]])
        emitted.append("aux_loss_curve.csv")

    matrix = run / "prediction_matrix.csv"
    if matrix.exists():
        grid = np.loadtxt(matrix, delimiter=",")
        with open(out / "prediction_grid.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["row", "col", "value"])
            for r in range(grid.shape[0]):
                for c in range(grid.shape[1]):
                    writer.writerow([r, c, f"{grid[r, c]:.6f}"])
        emitted.append("prediction_grid.csv")

    report = run / "finetune_report.json"
    if report.exists():
        with open(report) as f:
            table = json.load(f)
        table.sort(key=lambda row: row["rl_sr"])
        with open(out / "finetune_bars.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["set", "rl_sr", "sgc_sr"])
            for row in table:
                writer.writerow([row["set"], row["rl_sr"], row["sgc_sr"]])
        emitted.append("finetune_bars.csv")

    for polar in run.rglob("polar.csv"):
        emitted.append(str(polar.relative_to(run)))

    if not emitted:
        raise FileNotFoundError(f"no plottable artifacts under {run}")
    print("plot data:", ", ".join(emitted))
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sgcnav",
        description="Scene-graph contrastive navigation experiments")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-houses", help="generate a fixed eval dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=["ObjectNav", "MultiON"],
                   default="ObjectNav")
    p.add_argument("--n-targets", type=int, default=1)
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seed-lo", type=int, default=VAL_SEED_LO)
    p.add_argument("--seed-hi", type=int, default=VAL_SEED_HI)
    p.add_argument("--max-steps", type=int, default=300)
    p.add_argument("--categories", default=None,
                   help="comma-separated target categories")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_gen_houses)

    p = sub.add_parser("train", help="train a policy")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--aux", choices=AUX_MODES, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--progress", action="store_true")
    p.add_argument("--dump-prediction-matrix", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--audit", default=None)
    p.add_argument("--sample-seed", type=int, default=None,
                   help="sample actions with this seed instead of argmax")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("finetune", help="fine-tune on novel categories")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--categories", required=True,
                   help="comma-separated novel categories")
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("trace", help="collect probing traces")
    p.add_argument("--out", required=True)
    p.add_argument("--houses", required=True, help="house seed range LO:HI")
    p.add_argument("--episodes", type=int, default=5,
                   help="episodes per house")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("probe", help="fit linear probes on traces")
    p.add_argument("--traces", required=True)
    p.add_argument("--targets", default=",".join(P.PROBE_FAMILIES))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("inspect-graph", help="summarize a graph stream")
    p.add_argument("--stream", required=True)
    p.add_argument("--index", type=int, default=None)
    p.set_defaults(func=cmd_inspect_graph)

    p = sub.add_parser("plot-data", help="emit plot-ready CSV bundles")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_plot_data)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
