import json
from pathlib import Path

import numpy as np
import pytest

from occ4d.cli import main
from occ4d.config import config_digest, load_config, read_manifest

SMOKE_OVERRIDES = {
    "suite": {"n_scenes": 2, "n_future": 6, "future_dt": 0.5, "d_raw": 12},
    "pca": {"d": 6, "fit_subset": 4000},
    "sampler": {"n_occ_pos": 700, "n_occ_neg": 700, "n_feat": 120, "n_ego_pos": 30, "n_ego_neg": 30},
    "field": {"channels": 8, "head_hidden": 16, "cell": 1.0},
    "train": {"total_steps": 60, "warmup_steps": 10, "batch_occ": 96, "batch_feat": 24, "batch_ego": 12},
    "eval": {"step": 0.8, "times": [0.6, 1.8], "z": [-0.4, 2.0], "ego_bev_step": 1.0},
}


def write_smoke_config(tmp_path) -> Path:
    p = tmp_path / "config.json"
    p.write_text(json.dumps(SMOKE_OVERRIDES))
    return p


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full simulate -> genqueries -> train -> eval run, shared by tests."""
    root = tmp_path_factory.mktemp("pipe")
    cfg_path = write_smoke_config(root)
    args = ["--config", str(cfg_path)]
    assert main(["simulate", *args, "--out", str(root / "data")]) == 0
    assert main(["genqueries", *args, "--dataset", str(root / "data"), "--out", str(root / "queries")]) == 0
    assert main(["train", *args, "--queries", str(root / "queries"), "--out", str(root / "run")]) == 0
    code = main(
        [
            "eval",
            *args,
            "--checkpoint",
            str(root / "run" / "checkpoint.bin"),
            "--dataset",
            str(root / "data"),
            "--out",
            str(root / "report.json"),
            "--rasters",
            str(root / "rasters"),
        ]
    )
    assert code == 0
    return root, cfg_path


class TestCliContract:
    @pytest.mark.parametrize("cmd", ["simulate", "genqueries", "train", "eval", "scaling", "report"])
    def test_help_exits_zero(self, cmd, capsys):
        with pytest.raises(SystemExit) as e:
            main([cmd, "--help"])
        assert e.value.code == 0
        assert "usage" in capsys.readouterr().out

    def test_unknown_flag_exits_two(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["simulate", "--bogus-flag", "x", "--out", "y"])
        assert e.value.code == 2
        assert "--bogus-flag" in capsys.readouterr().err

    def test_top_level_help(self, capsys):
        with pytest.raises(SystemExit) as e:
            main(["--help"])
        assert e.value.code == 0
        out = capsys.readouterr().out
        for cmd in ("simulate", "genqueries", "train", "eval", "scaling", "report"):
            assert cmd in out


class TestPipeline:
    def test_dataset_layout(self, pipeline):
        root, _ = pipeline
        data = root / "data"
        assert sorted(p.name for p in (data / "scenes").iterdir()) == ["scene000.json", "scene001.json"]
        assert (data / "manifest.json").exists()
        man = read_manifest(data)
        assert man["stage"] == "simulate"
        assert man["n_scenes"] == 2
        listed = {f["path"] for f in man["files"]}
        assert "scenes/scene000.json" in listed
        assert any(p.startswith("scans/") for p in listed)
        assert any(p.startswith("images/") for p in listed)
        for entry in man["files"]:
            assert entry["bytes"] > 0 and len(entry["sha256"]) == 64

    def test_queries_layout(self, pipeline):
        root, cfg_path = pipeline
        q = root / "queries"
        assert (q / "pca.bin").exists()
        assert (q / "sample000.bin").exists()
        assert (q / "sample000.enc.bin").exists()
        meta = json.loads((q / "sample000.meta.json").read_text())
        cfg = load_config(cfg_path)
        assert meta["config_digest"] == config_digest(cfg)
        assert meta["emitted"]["ray_negative"] == 700
        assert meta["emitted"]["ray_positive"] == 700

    def test_train_outputs(self, pipeline):
        root, _ = pipeline
        run = root / "run"
        assert (run / "checkpoint.bin").exists()
        assert (run / "checkpoint_best.bin").exists()
        lines = (run / "loss.csv").read_text().strip().splitlines()
        assert lines[0] == "step,lr,total,occ,dino,ego"
        assert len(lines) == 61

    def test_report_schema(self, pipeline):
        root, cfg_path = pipeline
        report = json.loads((root / "report.json").read_text())
        cfg = load_config(cfg_path)
        for key in (
            "config_digest",
            "r_at_p70",
            "r_at_p70_exact",
            "ap_occ_exact",
            "soft_iou",
            "ap_ego",
            "per_time_breakdown",
            "probe_counts",
        ):
            assert key in report, key
        assert report["config_digest"] == config_digest(cfg)
        assert len(report["per_time_breakdown"]) == 2
        assert set(report["probe_counts"]) == {"free", "occupied", "unknown"}
        rasters = sorted((root / "rasters").iterdir())
        assert rasters and rasters[0].suffix == ".pgm"

    def test_eval_digest_mismatch_refused(self, pipeline, tmp_path, capsys):
        root, cfg_path = pipeline
        other_cfg = tmp_path / "other.json"
        doc = json.loads(Path(cfg_path).read_text())
        doc["seed"] = 999
        other_cfg.write_text(json.dumps(doc))
        code = main(
            [
                "eval",
                "--config",
                str(other_cfg),
                "--checkpoint",
                str(root / "run" / "checkpoint.bin"),
                "--dataset",
                str(root / "data"),
                "--out",
                str(tmp_path / "r.json"),
            ]
        )
        assert code == 1
        assert "digest" in capsys.readouterr().err

    def test_existing_output_refused_without_force(self, pipeline, capsys):
        root, cfg_path = pipeline
        code = main(["simulate", "--config", str(cfg_path), "--out", str(root / "data")])
        assert code == 1
        assert "already exists" in capsys.readouterr().err

    def test_report_command(self, pipeline, tmp_path, capsys):
        root, _ = pipeline
        out = tmp_path / "summary.md"
        assert main(["report", str(root / "report.json"), "--out", str(out)]) == 0
        text = out.read_text()
        assert "r_at_p70" in text and "| metric | value |" in text


class TestDeterminism:
    def test_repeat_runs_identical_digests(self, tmp_path):
        cfg_path = write_smoke_config(tmp_path)
        digests = []
        for run in ("a", "b"):
            base = tmp_path / run
            args = ["--config", str(cfg_path)]
            assert main(["simulate", *args, "--out", str(base / "data")]) == 0
            assert main(["genqueries", *args, "--dataset", str(base / "data"), "--out", str(base / "queries")]) == 0
            assert main(["train", *args, "--queries", str(base / "queries"), "--out", str(base / "run")]) == 0
            assert (
                main(
                    [
                        "eval",
                        *args,
                        "--checkpoint",
                        str(base / "run" / "checkpoint.bin"),
                        "--dataset",
                        str(base / "data"),
                        "--out",
                        str(base / "report.json"),
                    ]
                )
                == 0
            )
            bundle = {
                "sim": read_manifest(base / "data")["files"],
                "queries": read_manifest(base / "queries")["files"],
                "run": read_manifest(base / "run")["files"],
                "report": (base / "report.json").read_text(),
            }
            digests.append(json.dumps(bundle, sort_keys=True))
        assert digests[0] == digests[1]

    def test_workers_do_not_change_outputs(self, tmp_path):
        cfg_path = write_smoke_config(tmp_path)
        manifests = []
        for run, workers in (("w1", "1"), ("w2", "2")):
            base = tmp_path / run
            assert (
                main(
                    [
                        "simulate",
                        "--config",
                        str(cfg_path),
                        "--workers",
                        workers,
                        "--out",
                        str(base / "data"),
                    ]
                )
                == 0
            )
            manifests.append(read_manifest(base / "data")["files"])
        assert manifests[0] == manifests[1]
