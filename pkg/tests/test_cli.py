import csv
import json
import os

import pytest

from sbl.cli import main


def _run(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One happy-path pipeline: synth -> stats -> train -> eval -> rank -> predict -> ablate."""
    root = tmp_path_factory.mktemp("cli")
    ds = str(root / "ds")
    assert _run(
        "synth", "--out", ds,
        "--set", "synth.num_images=6",
        "--set", "synth.image_size=64",
        "--set", "synth.seed=5",
    ) == 0

    cfg_path = str(root / "cfg.json")
    with open(cfg_path, "w") as fh:
        json.dump(
            {
                "data": {"train_dir": "ds", "eval_dir": "ds"},
                "stats_path": "stats.json",
                "checkpoint": "train_run/checkpoint.sblckpt",
                "train": {"total_steps": 3, "batch_size": 2, "decay_interval": 2, "seed": 0},
                "eval": {"score_threshold": 0.2},
            },
            fh,
        )
    assert _run("stats", "--config", cfg_path) == 0

    train_run = str(root / "train_run")
    assert _run("train", "--config", cfg_path, "--out", train_run) == 0

    eval_run = str(root / "eval_run")
    assert _run("eval", "--config", cfg_path, "--out", eval_run) == 0

    rank_run = str(root / "rank_run")
    assert _run("rank", "--config", cfg_path, "--out", rank_run, "--set", "rank.k=2") == 0

    predict_run = str(root / "predict_run")
    assert _run(
        "predict", "--config", cfg_path, "--out", predict_run,
        "--set", "predict.input=ds/images",
    ) == 0

    ablate_run = str(root / "ablate_run")
    variants = json.dumps(
        [
            {"name": "baseline", "overrides": {"train.sbl_enabled": False}},
            {"name": "sbl", "overrides": {}},
        ]
    )
    assert _run(
        "ablate", "--config", cfg_path, "--out", ablate_run,
        "--set", f"ablate.variants={variants}",
        "--set", "ablate.seeds=[0]",
        "--set", "train.total_steps=2",
    ) == 0

    return {
        "root": root,
        "ds": ds,
        "cfg": cfg_path,
        "stats": str(root / "stats.json"),
        "train_run": train_run,
        "eval_run": eval_run,
        "rank_run": rank_run,
        "predict_run": predict_run,
        "ablate_run": ablate_run,
    }


class TestPipelineArtifacts:
    def test_synth_layout(self, workspace):
        ds = workspace["ds"]
        assert os.path.exists(os.path.join(ds, "annotations.jsonl"))
        with open(os.path.join(ds, "manifest.json")) as fh:
            manifest = json.load(fh)
        assert manifest["num_images"] == 6
        pngs = os.listdir(os.path.join(ds, "images"))
        assert len(pngs) == 6 and all(p.endswith(".png") for p in pngs)

    def test_stats_file(self, workspace):
        with open(workspace["stats"]) as fh:
            payload = json.load(fh)
        assert payload["format"] == "sbl-salience-stats"
        assert set(payload["tap_stats"]) == {"C2", "C3", "C4", "C5"}

    def test_train_outputs(self, workspace):
        run = workspace["train_run"]
        assert os.path.exists(os.path.join(run, "checkpoint.sblckpt"))
        with open(os.path.join(run, "training_log.jsonl")) as fh:
            steps = [json.loads(line)["step"] for line in fh]
        assert steps == [1, 2, 3]

    def test_config_snapshot_written(self, workspace):
        with open(os.path.join(workspace["train_run"], "config.json")) as fh:
            snapshot = json.load(fh)
        assert snapshot["train"]["total_steps"] == 3
        assert snapshot["data"]["train_dir"] == "ds"

    def test_eval_reports(self, workspace):
        run = workspace["eval_run"]
        with open(os.path.join(run, "report.json")) as fh:
            report = json.load(fh)
        assert 0.0 <= report["mean_ap"] <= 1.0
        assert report["num_images"] == 6
        text = open(os.path.join(run, "report.txt")).read()
        assert "mAP" in text
        assert any(name.startswith("pr_curve_") for name in os.listdir(run))

    def test_rank_outputs(self, workspace):
        run = workspace["rank_run"]
        with open(os.path.join(run, "ranking.csv")) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 6
        raws = [float(r["raw_salience"]) for r in rows]
        assert raws == sorted(raws, reverse=True)
        with open(os.path.join(run, "histogram.csv")) as fh:
            bins = list(csv.DictReader(fh))
        assert len(bins) == 50
        assert sum(int(b["count"]) for b in bins) == 6

    def test_predict_outputs(self, workspace):
        with open(os.path.join(workspace["predict_run"], "detections.json")) as fh:
            results = json.load(fh)
        assert len(results) == 6
        for dets in results.values():
            for det in dets:
                assert set(det) == {"box", "score", "class_id"}

    def test_ablation_table(self, workspace):
        run = workspace["ablate_run"]
        with open(os.path.join(run, "ablation.json")) as fh:
            rows = json.load(fh)
        by_name = {row["variant"]: row for row in rows}
        assert by_name["baseline"]["sbl"] is False
        assert by_name["baseline"]["new_min"] is None
        assert by_name["sbl"]["sbl"] is True
        assert by_name["sbl"]["new_min"] == 0.5
        with open(os.path.join(run, "ablation.csv")) as fh:
            header = next(csv.reader(fh))
        assert header[:5] == ["variant", "sbl", "normalized", "new_min", "tap"]
        text = open(os.path.join(run, "ablation.txt")).read()
        assert "baseline" in text and "mean mAP" in text
        # Per-variant, per-seed runs leave their own checkpoints behind.
        assert os.path.exists(os.path.join(run, "baseline", "seed0", "checkpoint.sblckpt"))


class TestExitCodes:
    def test_unknown_config_key_is_config_error(self, tmp_path):
        assert _run("synth", "--out", str(tmp_path / "o"), "--set", "bogus.key=1") == 2

    def test_unknown_section_key(self, tmp_path):
        assert _run("synth", "--out", str(tmp_path / "o"), "--set", "synth.nope=1") == 2

    def test_bad_config_value(self, tmp_path):
        assert _run("synth", "--out", str(tmp_path / "o"), "--set", "synth.num_images=0") == 2

    def test_missing_config_file(self, tmp_path):
        assert _run("synth", "--config", str(tmp_path / "missing.json")) == 2

    def test_invalid_config_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert _run("synth", "--config", str(path)) == 2

    def test_stats_refuses_overwrite_without_force(self, workspace, tmp_path):
        assert _run("stats", "--config", workspace["cfg"]) == 2
        assert _run("stats", "--config", workspace["cfg"], "--force") == 0

    def test_train_without_data_dir(self, tmp_path):
        assert _run("train", "--out", str(tmp_path / "o"), "--set", "train.total_steps=1") == 2

    def test_train_with_missing_data_dir(self, tmp_path):
        assert _run(
            "train", "--out", str(tmp_path / "o"),
            "--set", f"data.train_dir={tmp_path / 'nowhere'}",
            "--set", "train.total_steps=1",
        ) == 3

    def test_train_without_stats_file(self, workspace, tmp_path):
        assert _run(
            "train", "--config", workspace["cfg"], "--out", str(tmp_path / "o"),
            "--set", "stats_path=never_written.json",
        ) == 3

    def test_eval_without_checkpoint_key(self, workspace, tmp_path):
        out = str(tmp_path / "o")
        assert _run(
            "eval", "--out", out,
            "--set", f"data.eval_dir={workspace['ds']}",
        ) == 2

    def test_eval_with_missing_checkpoint_file(self, workspace, tmp_path):
        assert _run(
            "eval", "--config", workspace["cfg"], "--out", str(tmp_path / "o"),
            "--set", "checkpoint=missing.sblckpt",
        ) == 3

    def test_stale_stats_exit_code(self, tmp_path):
        ds = str(tmp_path / "ds")
        cfg = {
            "data": {"train_dir": "ds"},
            "stats_path": "stats.json",
            "train": {"total_steps": 1},
            "synth": {"num_images": 2, "image_size": 64},
        }
        cfg_path = str(tmp_path / "cfg.json")
        with open(cfg_path, "w") as fh:
            json.dump(cfg, fh)
        assert _run("synth", "--config", cfg_path, "--out", ds, "--seed", "5") == 0
        assert _run("stats", "--config", cfg_path) == 0
        # Regenerate the corpus under the same path: the stats are now stale.
        assert _run("synth", "--config", cfg_path, "--out", ds, "--seed", "6") == 0
        assert _run("train", "--config", cfg_path, "--out", str(tmp_path / "run")) == 4


class TestSeedAndOverrides:
    def test_synth_deterministic_bytes(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        for out in (a, b):
            assert _run(
                "synth", "--out", out, "--seed", "9",
                "--set", "synth.num_images=2", "--set", "synth.image_size=64",
            ) == 0
        for name in ("annotations.jsonl", "manifest.json", "images/img_00000.png"):
            with open(os.path.join(a, name), "rb") as fa, open(os.path.join(b, name), "rb") as fb:
                assert fa.read() == fb.read(), name

    def test_seed_flag_changes_content(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        _run("synth", "--out", a, "--seed", "9", "--set", "synth.num_images=2", "--set", "synth.image_size=64")
        _run("synth", "--out", b, "--seed", "10", "--set", "synth.num_images=2", "--set", "synth.image_size=64")
        def fingerprint(path):
            with open(os.path.join(path, "manifest.json")) as fh:
                return json.load(fh)["corpus_fingerprint"]

        assert fingerprint(a) != fingerprint(b)

    def test_set_overrides_config_file(self, tmp_path):
        cfg_path = str(tmp_path / "cfg.json")
        with open(cfg_path, "w") as fh:
            json.dump({"synth": {"num_images": 4, "image_size": 64}}, fh)
        out = str(tmp_path / "out")
        assert _run("synth", "--config", cfg_path, "--out", out, "--set", "synth.num_images=2") == 0
        with open(os.path.join(out, "manifest.json")) as fh:
            assert json.load(fh)["num_images"] == 2

    def test_set_parses_json_values(self, tmp_path):
        out = str(tmp_path / "out")
        code = _run(
            "synth", "--out", out,
            "--set", "synth.num_images=2",
            "--set", "synth.image_size=64",
            "--set", "synth.complexity_choices=[0.1, 0.9]",
        )
        assert code == 0
        with open(os.path.join(out, "config.json")) as fh:
            snapshot = json.load(fh)
        assert snapshot["synth"]["complexity_choices"] == [0.1, 0.9]

    def test_malformed_set_rejected(self, tmp_path):
        assert _run("synth", "--out", str(tmp_path / "o"), "--set", "no-equals-sign") == 2
