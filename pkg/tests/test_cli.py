import json

import numpy as np
import pytest
from click.testing import CliRunner

from olora.cli import cli, load_config_file, main


@pytest.fixture()
def runner():
    return CliRunner()


SMALL_ARGS = ["--classes", "8", "--per-class", "48", "--tasks", "4",
              "--batch-size", "12", "--image-size", "8"]
SMALL_TRAIN = ["--classes", "8", "--per-class", "48", "--tasks", "4",
               "--batch-size", "12", "--lr", "0.002", "--head-lr", "0.04",
               "--adam-eps", "0.1", "--eval-every", "5"]


def small_model_toml(tmp_path, **extra):
    lines = [
        "[experiment]",
        'method = "online-lora"',
        'scenario = "disjoint"',
        "seeds = [0]",
        "",
        "[model]",
        "image_size = 8",
        "patch_size = 4",
        "embed_dim = 16",
        "num_heads = 2",
        "num_layers = 1",
        "",
        "[stream]",
        "classes = 8",
        "per_class = 48",
        "num_tasks = 4",
        "batch_size = 12",
        "",
        "[train]",
        "lr = 0.002",
        "head_lr = 0.04",
        "adam_eps = 0.1",
        "eval_every = 5",
    ]
    for k, v in extra.items():
        lines.append(f"{k} = {v}")
    path = tmp_path / "exp.toml"
    path.write_text("\n".join(lines) + "\n")
    return path


class TestGenData:
    def test_export_and_structure(self, runner, tmp_path):
        out = tmp_path / "data"
        result = runner.invoke(cli, ["gen-data", "--seed", "0", "--out", str(out)]
                               + SMALL_ARGS)
        assert result.exit_code == 0, result.output
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["scenario"] == "disjoint"
        assert (out / "batches").is_dir()
        assert (out / "eval").is_dir()


class TestTrain:
    def test_train_from_config_file(self, runner, tmp_path):
        config = small_model_toml(tmp_path)
        out = tmp_path / "runs"
        result = runner.invoke(cli, ["train", "--config", str(config),
                                     "--out", str(out)])
        assert result.exit_code == 0, result.output
        run = out / "seed0"
        for name in ("config.json", "metrics.csv", "steps.csv", "trace.csv",
                     "matrix.csv", "checkpoint.olra", "losses.csv"):
            assert (run / name).exists(), name

    def test_train_from_exported_stream_matches_live(self, runner, tmp_path):
        data = tmp_path / "data"
        r = runner.invoke(cli, ["gen-data", "--seed", "0", "--out", str(data)]
                          + SMALL_ARGS)
        assert r.exit_code == 0, r.output
        r1 = runner.invoke(cli, ["train", "--method", "online-lora", "--seed", "0",
                                 "--out", str(tmp_path / "live"), "--image-size", "8",
                                 "--tasks", "4"] + SMALL_TRAIN)
        assert r1.exit_code == 0, r1.output
        r2 = runner.invoke(cli, ["train", "--method", "online-lora", "--seed", "0",
                                 "--out", str(tmp_path / "exported"), "--image-size", "8",
                                 "--data", str(data), "--tasks", "4"] + SMALL_TRAIN)
        assert r2.exit_code == 0, r2.output
        live = (tmp_path / "live" / "seed0" / "metrics.csv").read_bytes()
        exported = (tmp_path / "exported" / "seed0" / "metrics.csv").read_bytes()
        assert live == exported

    def test_multi_seed(self, runner, tmp_path):
        config = small_model_toml(tmp_path)
        out = tmp_path / "runs"
        result = runner.invoke(cli, ["train", "--config", str(config),
                                     "--seed", "0", "--seed", "1",
                                     "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert (out / "seed0").is_dir() and (out / "seed1").is_dir()


class TestEvalReportReplay:
    def test_eval_checkpoint(self, runner, tmp_path):
        data = tmp_path / "data"
        runner.invoke(cli, ["gen-data", "--seed", "0", "--out", str(data)] + SMALL_ARGS)
        config = small_model_toml(tmp_path)
        out = tmp_path / "runs"
        runner.invoke(cli, ["train", "--config", str(config), "--out", str(out)])
        result = runner.invoke(cli, ["eval", "--run", str(out / "seed0"),
                                     "--data", str(data)])
        assert result.exit_code == 0, result.output
        lines = result.output.strip().splitlines()
        assert lines[0] == "task,accuracy"
        assert lines[-1].startswith("mean,")

    def test_report(self, runner, tmp_path):
        config = small_model_toml(tmp_path)
        out = tmp_path / "runs"
        runner.invoke(cli, ["train", "--config", str(config),
                            "--seed", "0", "--seed", "1", "--out", str(out)])
        result = runner.invoke(cli, ["report", str(out / "seed0"), str(out / "seed1"),
                                     "--out", str(tmp_path / "rep")])
        assert result.exit_code == 0, result.output
        assert (tmp_path / "rep" / "metrics.csv").exists()
        assert (tmp_path / "rep" / "accuracy_curves.svg").exists()

    def test_replay_detector(self, runner, tmp_path):
        losses = [1.0] * 5 + [10.0] + [1.0] * 5
        src = tmp_path / "loss.csv"
        src.write_text("\n".join(repr(x) for x in losses) + "\n")
        out = tmp_path / "events.csv"
        result = runner.invoke(cli, ["replay-detector", "--input", str(src),
                                     "--out", str(out), "--mean", "2.6",
                                     "--var", "0.03"])
        assert result.exit_code == 0, result.output
        content = out.read_text().splitlines()
        assert content[0] == "step,loss,mean,var,event"
        assert any(line.endswith("peak") for line in content)
        assert any(line.endswith("plateau") for line in content)


class TestConfigHandling:
    def test_unknown_key_rejected(self, tmp_path):
        bad = tmp_path / "bad.toml"
        bad.write_text("[train]\nwarp_speed = 9\n")
        from olora.errors import ConfigError

        with pytest.raises(ConfigError):
            load_config_file(bad)

    def test_exit_codes(self, monkeypatch, tmp_path, capsys):
        # config error -> 1
        monkeypatch.setattr("sys.argv", ["olora", "train", "--method", "warp",
                                         "--out", str(tmp_path / "x")])
        with pytest.raises(SystemExit) as e:
            main()
        assert e.value.code == 1
        # missing input file -> usage/config error -> 1
        monkeypatch.setattr("sys.argv", ["olora", "replay-detector", "--input",
                                         str(tmp_path / "nope.csv"), "--out",
                                         str(tmp_path / "o.csv"), "--mean", "1",
                                         "--var", "1"])
        with pytest.raises(SystemExit) as e:
            main()
        assert e.value.code == 1
        # runtime error (missing checkpoint inside an existing run dir) -> 2
        run = tmp_path / "empty-run"
        run.mkdir()
        (run / "config.json").write_text("{}")
        monkeypatch.setattr("sys.argv", ["olora", "eval", "--run", str(run),
                                         "--data", str(run)])
        with pytest.raises(SystemExit) as e:
            main()
        assert e.value.code == 2

    def test_threads_env_parallel_runs(self, runner, tmp_path, monkeypatch):
        monkeypatch.setenv("OLORA_THREADS", "2")
        config = small_model_toml(tmp_path)
        out = tmp_path / "runs"
        result = runner.invoke(cli, ["train", "--config", str(config),
                                     "--seed", "0", "--seed", "1",
                                     "--out", str(out)])
        assert result.exit_code == 0, result.output
        assert (out / "seed0" / "metrics.csv").exists()
        assert (out / "seed1" / "metrics.csv").exists()
