import json

import pytest

from ticnet.cli import main
from ticnet.config import ExperimentConfig, config_from_dict, load_config
from ticnet.errors import ConfigError


def write_config(path, **overrides):
    payload = {
        "seed": 3,
        "out_dir": str(path.parent / "run"),
        "synth": {
            "n_videos": 4,
            "frames": 1500,
            "channels": 6,
            "sessions": 2,
            "event_rate": 0.008,
        },
        "model": {"channels": 6, "window": 416, "base_width": 8, "fpn_width": 16,
                  "seg_width": 8, "mlp_hidden": 4},
        "train": {"epochs": 1, "batch_size": 8},
        "anchors": {"k": 12},
    }
    payload.update(overrides)
    path.write_text(json.dumps(payload))
    return path


class TestConfigSchema:
    def test_defaults_echo_reference_constants(self):
        cfg = ExperimentConfig()
        assert cfg.model.window == 416
        assert cfg.train.noise_sigma == 0.01
        assert cfg.train.noise_prob == 0.5
        assert cfg.loss.gamma == 2.0
        assert cfg.loss.lam == 1.5
        assert cfg.loss.alpha == 3.0
        assert cfg.loss.beta == 0.001
        assert cfg.eval.prob_thresh == 0.2
        assert cfg.eval.nms_eiou_thresh == 0.2
        assert cfg.eval.iou_thresh == 0.5
        from ticnet.geometry import MATCH_NEG_THRESH, MATCH_POS_THRESH

        assert (MATCH_POS_THRESH, MATCH_NEG_THRESH) == (0.3, -0.4)

    def test_unknown_root_field_rejected(self):
        with pytest.raises(ConfigError, match="unknown field: trian"):
            config_from_dict({"trian": {}})

    def test_unknown_nested_field_rejected(self):
        with pytest.raises(ConfigError, match="unknown field: train.lr"):
            config_from_dict({"train": {"lr": 0.1}})

    def test_root_seed_flows_into_sections(self):
        cfg = config_from_dict({"seed": 42, "train": {"epochs": 2}})
        assert cfg.train.seed == 42 and cfg.anchors.seed == 42

    def test_section_seed_wins_over_root(self):
        cfg = config_from_dict({"seed": 42, "train": {"seed": 7}})
        assert cfg.train.seed == 7

    def test_run_manifest_is_loadable_config(self, tmp_path):
        manifest = {"command": "synth", "seed": 5, "config": {"seed": 5, "out_dir": "x"}}
        p = tmp_path / "run.json"
        p.write_text(json.dumps(manifest))
        cfg = load_config(p)
        assert cfg.seed == 5 and cfg.out_dir == "x"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.json")


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = write_config(root / "cfg.json")
    assert main(["synth", "--config", str(cfg_path)]) == 0
    assert main(["gen-anchors", "--config", str(root / "run" / "run.json")]) == 0
    assert main(["train", "--config", str(root / "run" / "run.json")]) == 0
    return root / "run"


class TestPipeline:
    def test_artifacts_exist(self, workdir):
        for name in ("manifest.json", "annotations.csv", "anchors.json",
                     "checkpoint.tnc", "train_log.jsonl", "run.json"):
            assert (workdir / name).exists(), name

    def test_eval_writes_report_and_curves(self, workdir):
        assert main(["eval", "--config", str(workdir / "run.json")]) == 0
        report = json.loads((workdir / "eval_report.json").read_text())
        assert {"ap", "n_detections", "n_gts"} <= set(report)
        assert (workdir / "detections.json").exists()
        assert (workdir / "pr_curve.csv").read_text().startswith("recall,precision")

    def test_eval_without_checkpoint_is_usage_error(self, workdir, tmp_path):
        cfg = json.loads((workdir / "run.json").read_text())["config"]
        cfg["out_dir"] = str(tmp_path / "empty")
        cfg["anchors"] = {"path": str(workdir / "anchors.json")}
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg))
        assert main(["eval", "--config", str(p)]) == 2

    def test_unknown_config_field_exit_code(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"train": {"lr": 1}}))
        assert main(["synth", "--config", str(p)]) == 2

    def test_infer_on_manifest_video(self, workdir):
        assert main(["infer", "--config", str(workdir / "run.json"), "--video", "synth00"]) == 0
        path = workdir / "detections_synth00.json"
        assert path.exists()

    def test_infer_unknown_video(self, workdir):
        assert main(["infer", "--config", str(workdir / "run.json"), "--video", "zzz"]) == 2

    def test_crossval_loso_fold_records(self, workdir, tmp_path):
        out = tmp_path / "cv"
        code = main([
            "crossval", "--config", str(workdir / "run.json"),
            "--strategy", "LOSO", "--out", str(out),
        ])
        assert code == 0
        report = json.loads((out / "fold_report.json").read_text())
        assert report["strategy"] == "LOSO"
        assert len(report["folds"]) == 2
        assert 0.0 <= report["mean_ap"] <= 1.0
        for fold in report["folds"]:
            curve = (out / f"pr_fold_{fold['fold_id']}.csv").read_text()
            assert curve.startswith("recall,precision")

    def test_synth_rerun_from_manifest_bit_identical(self, workdir, tmp_path):
        rerun_cfg = json.loads((workdir / "run.json").read_text())
        rerun_cfg["config"]["out_dir"] = str(tmp_path / "rerun")
        p = tmp_path / "rerun.json"
        p.write_text(json.dumps(rerun_cfg))
        assert main(["synth", "--config", str(p)]) == 0
        for vid in ("synth00", "synth03"):
            a = (workdir / "features" / f"{vid}.bin").read_bytes()
            b = (tmp_path / "rerun" / "features" / f"{vid}.bin").read_bytes()
            assert a == b
        assert (workdir / "annotations.csv").read_text() == (
            tmp_path / "rerun" / "annotations.csv"
        ).read_text()


class TestEnvConfig:
    def test_env_var_supplies_default_config(self, tmp_path, monkeypatch):
        cfg_path = write_config(tmp_path / "cfg.json", out_dir=str(tmp_path / "envrun"))
        monkeypatch.setenv("TICNET_CONFIG", str(cfg_path))
        assert main(["synth"]) == 0
        assert (tmp_path / "envrun" / "manifest.json").exists()


class TestSeedOverride:
    def test_seed_flag_changes_synth_output(self, tmp_path):
        cfg_path = write_config(tmp_path / "cfg.json", out_dir=str(tmp_path / "a"))
        assert main(["synth", "--config", str(cfg_path)]) == 0
        assert main(["synth", "--config", str(cfg_path), "--seed", "99",
                     "--out", str(tmp_path / "b")]) == 0
        a = (tmp_path / "a" / "features" / "synth00.bin").read_bytes()
        b = (tmp_path / "b" / "features" / "synth00.bin").read_bytes()
        assert a != b
        run_b = json.loads((tmp_path / "b" / "run.json").read_text())
        assert run_b["seed"] == 99 and run_b["config"]["seed"] == 99
