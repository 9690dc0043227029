#!/usr/bin/env python3
"""Collect run artifacts from an experiment directory into one JSON file.

Usage: aggregate_results.py EXP_DIR OUT_JSON

Reads per-run eval.json files, fine-tuning eval results, and probe CSVs,
and writes the summary consumed by the repository's release checks. Also
drops finetune_report.json into EXP_DIR for the plot-data subcommand.
"""

import csv
import json
import sys
from collections import defaultdict
from pathlib import Path

ARMS = ("none", "sgc", "sgc_no_hist", "sgc_no_pos")


def load_evals(exp: Path) -> dict:
    arms: dict = {}
    for run in sorted(exp.glob("run_*_s*")):
        name = run.name[len("run_"):]
        arm, _, seed = name.rpartition("_s")
        path = run / "eval.json"
        if arm not in ARMS or not path.exists():
            continue
        arms.setdefault(arm, {})[seed] = json.loads(path.read_text())
    return arms


def load_finetune(exp: Path) -> list:
    table = []
    for i in range(64):
        rl = exp / f"ft_none_{i}" / "eval.json"
        sgc = exp / f"ft_sgc_{i}" / "eval.json"
        if not (rl.exists() and sgc.exists()):
            break
        cats = None
        manifest = exp / f"ft_none_{i}" / "config.resolved.json"
        if manifest.exists():
            cats = json.loads(manifest.read_text())["config"][
                "target_categories"]
        table.append({
            "set": f"set{i}" if cats is None else "+".join(cats),
            "rl_sr": json.loads(rl.read_text())["SR"],
            "sgc_sr": json.loads(sgc.read_text())["SR"],
        })
    return table


def load_probe_means(path: Path) -> dict:
    accs = defaultdict(list)
    with open(path) as f:
        rows = list(csv.reader(f))
    for row in rows[2:]:
        family, _, acc = row[0], row[1], row[2]
        if acc != "skipped":
            accs[family].append(float(acc))
    return {fam: sum(v) / len(v) for fam, v in accs.items() if v}


def main() -> int:
    exp = Path(sys.argv[1])
    out = Path(sys.argv[2])
    result = {
        "arms": load_evals(exp),
        "finetune": load_finetune(exp),
        "probes": {},
    }
    for src, key in (("none", "rl"), ("sgc", "sgc")):
        probes = exp / f"probe_{src}" / "probes.csv"
        if probes.exists():
            result["probes"][key] = load_probe_means(probes)
    dataset = exp / "eval.jsonl"
    if dataset.exists():
        import hashlib
        result["eval_dataset"] = {
            "episodes": sum(1 for _ in open(dataset)) - 1,
            "sha256": hashlib.sha256(dataset.read_bytes()).hexdigest(),
        }
    if result["finetune"]:
        (exp / "finetune_report.json").write_text(
            json.dumps(result["finetune"], indent=2))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
