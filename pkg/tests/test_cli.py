"""End-to-end command-line flows with tiny budgets."""

import json

import numpy as np
import pytest

from sgcnav import cli
from sgcnav.scenegraph import GraphStreamWriter, init_graph
from sgcnav.sim import env as E
from sgcnav.sim.house import generate_house


def write_config(tmp_path, **overrides):
    cfg = {"workers": 2, "horizon": 8, "total_steps": 32, "log_every": 1,
           "house_seed_lo": 0, "house_seed_hi": 50}
    cfg.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


class TestUsageErrors:
    def test_no_command_exits_2(self):
        assert cli.main([]) == 2

    def test_unknown_command_exits_2(self):
        assert cli.main(["frobnicate"]) == 2

    def test_missing_required_flag_exits_2(self):
        assert cli.main(["train", "--out", "x"]) == 2


class TestConfig:
    def test_unknown_keys_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"total_steps": 10, "warp": 9}))
        with pytest.raises(cli.ConfigError, match="warp"):
            cli.load_config(path)

    def test_bad_value_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"gamma": -1.0}))
        with pytest.raises(cli.ConfigError):
            cli.load_config(path)

    def test_non_object_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("[1, 2]")
        with pytest.raises(cli.ConfigError):
            cli.load_config(path)

    def test_seeds_extra_key(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"total_steps": 10, "seeds": [1, 2]}))
        cfg, extras = cli.load_config(path)
        assert cfg.total_steps == 10
        assert extras == {"seeds": [1, 2]}

    def test_train_with_bad_config_exits_1(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"warp": 9}))
        assert cli.main(["train", "--config", str(path),
                         "--out", str(tmp_path / "run")]) == 1

    def test_seed_env_override(self, monkeypatch):
        monkeypatch.delenv(cli.SEED_ENV_VAR, raising=False)
        assert cli._apply_seed_env(7) == 7
        monkeypatch.setenv(cli.SEED_ENV_VAR, "99")
        assert cli._apply_seed_env(7) == 99


class TestGenHouses:
    def test_dataset_written_and_deterministic(self, tmp_path, capsys):
        args = ["gen-houses", "--episodes", "3", "--seed", "5",
                "--seed-lo", "8000", "--seed-hi", "8050", "--max-steps",
                "20"]
        assert cli.main(args + ["--out", str(tmp_path / "a.jsonl")]) == 0
        assert cli.main(args + ["--out", str(tmp_path / "b.jsonl")]) == 0
        assert (tmp_path / "a.jsonl").read_bytes() == \
            (tmp_path / "b.jsonl").read_bytes()

    def test_out_of_range_seeds_warn(self, tmp_path, capsys):
        assert cli.main(["gen-houses", "--episodes", "1", "--seed-lo", "0",
                         "--seed-hi", "10", "--max-steps", "20",
                         "--out", str(tmp_path / "d.jsonl")]) == 0
        assert "held-out" in capsys.readouterr().err


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("flow")
    config = write_config(tmp_path, aux="sgc")
    out = tmp_path / "run"
    rc = cli.main(["train", "--config", str(config), "--out", str(out),
                   "--seed", "1", "--dump-prediction-matrix"])
    assert rc == 0
    return out


class TestTrainEvalFlow:
    def test_artifacts_exist(self, run_dir):
        assert (run_dir / "checkpoint.bin").exists()
        assert (run_dir / "metrics.csv").exists()
        assert (run_dir / "prediction_matrix.csv").exists()
        manifest = json.loads((run_dir / "config.resolved.json").read_text())
        assert manifest["config"]["seed"] == 1
        assert manifest["config"]["aux"] == "sgc"
        assert len(manifest["source_hash"]) == 64

    def test_eval_checkpoint(self, run_dir, tmp_path, capsys):
        ds = tmp_path / "eval.jsonl"
        assert cli.main(["gen-houses", "--episodes", "2", "--max-steps",
                         "15", "--out", str(ds)]) == 0
        before = ds.read_bytes()
        out = tmp_path / "metrics.json"
        rc = cli.main(["eval", "--checkpoint",
                       str(run_dir / "checkpoint.bin"),
                       "--dataset", str(ds), "--out", str(out),
                       "--audit", str(tmp_path / "audit.jsonl")])
        assert rc == 0
        assert ds.read_bytes() == before
        metrics = json.loads(out.read_text())
        assert metrics["episodes"] == 2
        assert set(metrics) >= {"SR", "SPL", "EpLen", "FalseEnd%"}

    def test_eval_missing_checkpoint_exits_1(self, tmp_path):
        assert cli.main(["eval", "--checkpoint",
                         str(tmp_path / "nope.bin"),
                         "--dataset", str(tmp_path / "nope.jsonl")]) == 1

    def test_finetune_budget_zero(self, run_dir, tmp_path):
        rc = cli.main(["finetune", "--checkpoint",
                       str(run_dir / "checkpoint.bin"),
                       "--categories", "Pot,Toaster", "--budget", "0",
                       "--out", str(tmp_path / "ft")])
        assert rc == 0
        assert (tmp_path / "ft" / "checkpoint.bin").exists()

    def test_finetune_overlap_exits_1(self, run_dir, tmp_path):
        rc = cli.main(["finetune", "--checkpoint",
                       str(run_dir / "checkpoint.bin"),
                       "--categories", "Mug", "--budget", "0",
                       "--out", str(tmp_path / "ft2")])
        assert rc == 1

    def test_trace_and_probe(self, run_dir, tmp_path, capsys):
        traces = tmp_path / "traces.bin"
        rc = cli.main(["trace", "--out", str(traces), "--houses",
                       "8000:8002", "--episodes", "1", "--checkpoint",
                       str(run_dir / "checkpoint.bin")])
        assert rc == 0
        out = tmp_path / "probe"
        rc = cli.main(["probe", "--traces", str(traces), "--targets",
                       "revisit", "--out", str(out)])
        assert rc == 0
        assert (out / "probes.csv").exists()

    def test_probe_unknown_family_exits_1(self, tmp_path):
        assert cli.main(["probe", "--traces", str(tmp_path / "t.bin"),
                         "--targets", "telepathy",
                         "--out", str(tmp_path / "p")]) == 1

    def test_plot_data(self, run_dir):
        assert cli.main(["plot-data", "--run", str(run_dir)]) == 0
        plots = run_dir / "plots"
        assert (plots / "aux_loss_curve.csv").exists()
        assert (plots / "prediction_grid.csv").exists()

    def test_plot_data_missing_run_exits_1(self, tmp_path):
        assert cli.main(["plot-data", "--run", str(tmp_path / "none")]) == 1


class TestInspectGraph:
    def test_stream_summary(self, tmp_path, capsys):
        house = generate_house(0)
        cat = sorted({o.category for o in house.objects})[0]
        state, _ = E.reset(house, E.TaskSpec("ObjectNav", (cat,), 20), 1)
        g = init_graph(state)
        path = tmp_path / "graphs.bin"
        writer = GraphStreamWriter(path)
        writer.append(g, episode_id=0, step=0, worker_id=3)
        writer.close()
        assert cli.main(["inspect-graph", "--stream", str(path)]) == 0
        out = capsys.readouterr().out
        assert "episode=0" in out and "worker=3" in out
        assert cli.main(["inspect-graph", "--stream", str(path),
                         "--index", "0"]) == 0

    def test_bad_stream_exits_1(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE1234")
        assert cli.main(["inspect-graph", "--stream", str(path)]) == 1
