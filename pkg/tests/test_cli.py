from __future__ import annotations

import json
from pathlib import Path

import pytest

from raildelay.cli import main, run_pipeline, DEFAULT_CONFIG

TINY_CONFIG = {
    "seed": 3,
    "sim": {"seed": 3, "n_rps": 24, "n_trains_per_day": 12},
    "train_days": 2,
    "test_days": 1,
    "snapshot": {"train_spacing_minutes": 60.0, "test_spacing_minutes": 60.0},
    "embeddings": {"length_samples": 300, "rp_epochs": 20, "train_epochs": 20},
    "model": {"d_model": 16, "d_ff": 32, "epochs": 2},
    "evaluate": {"baselines": ["translation"]},
}


def write_config(tmp_path: Path) -> Path:
    p = tmp_path / "config.json"
    p.write_text(json.dumps(TINY_CONFIG))
    return p


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipeline")
    cfg = write_config(tmp)
    out = tmp / "out"
    run_pipeline(cfg, out)
    return cfg, out


class TestPipeline:
    def test_full_run_emits_metrics(self, pipeline_dir):
        _, out = pipeline_dir
        metrics = json.loads((out / "metrics.json").read_text())
        names = {r["predictor"] for r in metrics["reports"]}
        assert {"transformer", "translation"} <= names
        assert "mae_improvement_vs_translation_pct" in metrics
        manifest = json.loads((out / "manifest.json").read_text())
        assert set(manifest["stages"]) == {
            "simulate", "clean", "snapshot", "train-embeddings", "train", "evaluate",
        }
        for stage in manifest["stages"].values():
            for path, digest in stage["outputs"].items():
                assert Path(path).exists()
                assert len(digest) == 64

    def test_rerun_skips_everything(self, pipeline_dir, capsys):
        cfg, out = pipeline_dir
        run_pipeline(cfg, out)
        text = capsys.readouterr().out
        assert text.count("skipping") == 6
        assert "running" not in text

    def test_missing_upstream_names_stage(self, tmp_path):
        cfg = write_config(tmp_path)
        code = main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / "fresh"), "--stages", "evaluate"])
        assert code == 3

    def test_unknown_stage_is_config_error(self, tmp_path):
        cfg = write_config(tmp_path)
        code = main(["pipeline", "--config", str(cfg), "--out", str(tmp_path / "o"), "--stages", "nope"])
        assert code == 2

    def test_bad_config_exit_code(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        assert main(["pipeline", "--config", str(p), "--out", str(tmp_path / "o")]) == 2


class TestSubcommands:
    def test_simulate_clean_density(self, tmp_path):
        sim_cfg = tmp_path / "sim.json"
        sim_cfg.write_text(json.dumps({"seed": 2, "n_rps": 24, "n_trains_per_day": 10, "days": 1,
                                       "p_duplicate": 0.05}))
        out = tmp_path / "sim"
        assert main(["simulate", "--config", str(sim_cfg), "--out", str(out)]) == 0
        assert (out / "events.csv").exists()
        assert (out / "positions.json").exists()

        cleaned = tmp_path / "clean.csv"
        assert main(["clean", "--events", str(out / "events.csv"), "--out", str(cleaned),
                     "--report", str(tmp_path / "rep.json")]) == 0
        rep = json.loads((tmp_path / "rep.json").read_text())
        assert rep["duplicates_removed"] >= 0

        grid = tmp_path / "grid.csv"
        assert main(["density", "--events", str(cleaned), "--positions", str(out / "positions.json"),
                     "--at", "2024-01-08 10:00:00", "--grid-size", "20", "--out", str(grid)]) == 0
        assert grid.read_text().startswith("x,y,value")

    def test_predict_and_attention(self, pipeline_dir, tmp_path):
        _, out = pipeline_dir
        snap = sorted((out / "snapshots" / "test").glob("*.json"))[2]
        preds = tmp_path / "preds.csv"
        att = tmp_path / "att.json"
        assert main(["predict", "--checkpoint", str(out / "model.ckpt"), "--snapshot", str(snap),
                     "--out", str(preds), "--attention-out", str(att)]) == 0
        header = preds.read_text().splitlines()[0]
        assert header == "trainNum,position,rp,scheduled_in_minutes,predicted_delay"
        attention = json.loads(att.read_text())
        assert attention["train_numbers"]
        assert len(attention["head_weights"]) >= 1

        att2 = tmp_path / "att2.json"
        assert main(["attention", "--checkpoint", str(out / "model.ckpt"), "--snapshot", str(snap),
                     "--out", str(att2)]) == 0
        assert json.loads(att2.read_text())["t0"]

    def test_evaluate_subcommand(self, pipeline_dir, tmp_path):
        _, out = pipeline_dir
        report = tmp_path / "eval.json"
        assert main(["evaluate", "--events", str(out / "test_clean.csv"),
                     "--checkpoint", str(out / "model.ckpt"),
                     "--baselines", "translation", "--spacing", "120",
                     "--out", str(report)]) == 0
        data = json.loads(report.read_text())
        assert len(data["reports"]) == 2

    def test_evaluate_requires_something(self, pipeline_dir, tmp_path):
        _, out = pipeline_dir
        code = main(["evaluate", "--events", str(out / "test_clean.csv"), "--out", str(tmp_path / "x.json")])
        assert code == 2

    def test_default_config_dump(self, tmp_path):
        p = tmp_path / "cfg.json"
        assert main(["default-config", "--out", str(p)]) == 0
        assert json.loads(p.read_text()) == DEFAULT_CONFIG
