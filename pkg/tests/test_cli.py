import json
import os

import numpy as np
import pytest

from trajseq import cli
from trajseq import scenario as sc


def run(args):
    return cli.main(args)


class TestGenData:
    def test_deterministic_byte_identical_files(self, tmp_path):
        a = str(tmp_path / "a.jsonl")
        b = str(tmp_path / "b.jsonl")
        assert run(["gen-data", "--count", "12", "--seed", "1", "--vocab-k", "4",
                    "--out", a]) == 0
        assert run(["gen-data", "--count", "12", "--seed", "1", "--vocab-k", "4",
                    "--out", b]) == 0
        with open(a, "rb") as fa, open(b, "rb") as fb:
            assert fa.read() == fb.read()

    def test_manifest_written(self, tmp_path):
        out = str(tmp_path / "d.jsonl")
        run(["gen-data", "--count", "4", "--seed", "0", "--vocab-k", "2",
             "--out", out])
        manifest = json.load(open(tmp_path / "manifest.json"))
        assert manifest["command"] == "gen-data"
        assert manifest["inputs"]["dataset_hash"]
        assert out in manifest["outputs"]

    def test_bad_template_is_config_error(self, tmp_path):
        rc = run(["gen-data", "--count", "2", "--templates", "hover",
                  "--out", str(tmp_path / "x.jsonl")])
        assert rc == cli.EXIT_CONFIG

    def test_unknown_flag_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as e:
            run(["gen-data", "--count", "2", "--frobnicate", "1",
                 "--out", str(tmp_path / "x.jsonl")])
        assert e.value.code == cli.EXIT_USAGE


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    """One shared gen-data + short train to keep CLI tests quick."""
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data.jsonl")
    assert run(["gen-data", "--count", "10", "--seed", "1", "--vocab-k", "3",
                "--out", data]) == 0
    out = str(root / "run")
    assert run(["train", "--data", data, "--out", out, "--preset", "10k",
                "--max-steps", "12", "--eval-interval", "6",
                "--resolution", "16", "--lr", "1e-3", "--components", "CKS"]) == 0
    return {"root": root, "data": data, "run": out,
            "ckpt": os.path.join(out, "model.ckpt")}


class TestTrainCommand:
    def test_outputs_exist(self, tiny_run):
        assert os.path.exists(tiny_run["ckpt"])
        assert os.path.exists(os.path.join(tiny_run["run"], "loss_curve.csv"))
        manifest = json.load(open(os.path.join(tiny_run["run"], "manifest.json")))
        assert manifest["command"] == "train"
        assert manifest["config"]["stage"] == "backbone"

    def test_checkpoint_reloads(self, tiny_run):
        model, meta = cli.load_model_checkpoint(tiny_run["ckpt"])
        assert meta["stage"] == "backbone"
        assert model.config.preset == "10k"
        assert model.flags.use_keypoints

    def test_missing_data_is_data_error(self, tmp_path):
        rc = run(["train", "--data", str(tmp_path / "absent.jsonl"),
                  "--out", str(tmp_path / "o")])
        assert rc != 0

    def test_diffusion_without_checkpoint_is_state_error(self, tiny_run, tmp_path):
        rc = run(["train", "--stage", "diffusion", "--data", tiny_run["data"],
                  "--out", str(tmp_path / "o2")])
        assert rc == cli.EXIT_STATE

    def test_stage2_runs_and_records_diffusion(self, tiny_run, tmp_path):
        out2 = str(tmp_path / "run2")
        rc = run(["train", "--stage", "diffusion", "--checkpoint", tiny_run["ckpt"],
                  "--data", tiny_run["data"], "--out", out2,
                  "--max-steps", "12", "--eval-interval", "6", "--lr", "1e-3"])
        assert rc == 0
        model, meta = cli.load_model_checkpoint(os.path.join(out2, "model.ckpt"))
        assert meta["stage"] == "diffusion"
        assert model.flags.kp_decoder == "diffusion"
        assert model.eps_model is not None


class TestEvalCommand:
    def test_untrained_checkpoint_still_reports(self, tiny_run, tmp_path):
        out = str(tmp_path / "ev")
        rc = run(["eval", "--checkpoint", tiny_run["ckpt"], "--data",
                  tiny_run["data"], "--split", "all", "--limit", "3",
                  "--out", out])
        assert rc == 0  # evaluation of a weak model is not a failure
        assert os.path.exists(os.path.join(out, "predictions.jsonl"))
        assert os.path.exists(os.path.join(out, "metrics.csv"))
        rows = cli.read_predictions(os.path.join(out, "predictions.jsonl"))
        assert len(rows) == 3
        assert np.asarray(rows[0]["modes"]).shape == (1, 80, 3)

    def test_metrics_standalone_matches_eval(self, tiny_run, tmp_path):
        ev = str(tmp_path / "ev2")
        run(["eval", "--checkpoint", tiny_run["ckpt"], "--data", tiny_run["data"],
             "--split", "all", "--limit", "2", "--out", ev])
        mt_out = str(tmp_path / "mt")
        rc = run(["metrics", "--pred", os.path.join(ev, "predictions.jsonl"),
                  "--gt", tiny_run["data"], "--out", mt_out])
        assert rc == 0
        with open(os.path.join(ev, "metrics.csv")) as f1, \
                open(os.path.join(mt_out, "metrics.csv")) as f2:
            assert f1.read() == f2.read()

    def test_malformed_dump_is_data_error(self, tmp_path):
        bad = str(tmp_path / "bad.jsonl")
        with open(bad, "w") as f:
            f.write('{"format": "trajseq.predictions", "version": 1, "count": 1}\n')
            f.write("{not json\n")
        rc = run(["metrics", "--pred", bad, "--out", str(tmp_path / "m")])
        assert rc == cli.EXIT_DATA


class TestConfigPrecedence:
    def test_file_overrides_default_and_flag_overrides_file(self, tmp_path):
        cfg = str(tmp_path / "c.cfg")
        with open(cfg, "w") as f:
            f.write("# comment line\nlr = 0.002\nmax_steps = 7\n")
        parsed = cli.parse_config_file(cfg)
        assert parsed == {"lr": "0.002", "max_steps": "7"}

        class Args:
            lr = None
            weight_decay = None
            warmup_steps = None
            batch_size = None
            max_steps = 9
            seed = None
            stage = "backbone"
            eval_interval = None
            augment = None
            resolution = None

        tc = cli._train_config_from_args(Args, parsed)
        assert tc.lr == 0.002          # file beats default
        assert tc.max_steps == 9       # flag beats file
        assert tc.weight_decay == 0.01  # default survives

    def test_malformed_config_line(self, tmp_path):
        cfg = str(tmp_path / "c.cfg")
        with open(cfg, "w") as f:
            f.write("just a line without equals\n")
        from trajseq.errors import ConfigError
        with pytest.raises(ConfigError):
            cli.parse_config_file(cfg)


class TestOutRootEnv:
    def test_relative_out_joins_env_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv(cli.OUT_ROOT_ENV, str(tmp_path))
        assert cli._resolve_out("sub/x.jsonl") == str(tmp_path / "sub" / "x.jsonl")
        assert cli._resolve_out("/abs/x.jsonl") == "/abs/x.jsonl"
