import csv
import hashlib
import json

import numpy as np
import pytest

from deepbcr import cli, tileproc


def write(path, doc):
    path.write_text(json.dumps(doc))
    return path


TRAIN = {"lr": 1e-3, "weight_decay": 5e-5, "max_epochs": 2, "patience": 2, "val_fraction": 0.2,
         "model": "deep_bcr", "hyper": {"d_h": 16, "n_prototypes": 2, "h_a": 8}}


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write(root / "synth.json", {"seed": 1, "synth": {
        "n_low": 12, "n_high": 9, "feature_dim": 6, "instances_per_bag": [6, 12],
        "planted_fraction": 0.3, "n_test_low": 6, "n_test_high": 4}})
    assert cli.run_command(["synth", "--config", str(cfg), "--out", str(root / "syn")]) == 0
    return root


class TestConfig:
    def test_missing_field_named(self, tmp_path, capsys):
        train = {k: v for k, v in TRAIN.items() if k != "lr"}
        cfg = write(tmp_path / "c.json", {"train": train, "data": {"cohort": "x"}})
        assert cli.run_command(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
        assert "train.lr" in capsys.readouterr().err

    def test_unknown_field_rejected(self, tmp_path, capsys):
        cfg = write(tmp_path / "c.json", {"train": {**TRAIN, "lr_decay": 0.1}, "data": {"cohort": "x"}})
        assert cli.run_command(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
        assert "train.lr_decay" in capsys.readouterr().err

    def test_section_required(self, tmp_path):
        cfg = write(tmp_path / "c.json", {"seed": 0})
        assert cli.run_command(["eval", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2

    def test_bad_subcommand(self, tmp_path):
        assert cli.run_command(["fly", "--config", "x.json"]) == 2

    def test_missing_upstream(self, tmp_path, capsys):
        cfg = write(tmp_path / "c.json", {"train": TRAIN, "data": {"cohort": "nowhere"}})
        assert cli.run_command(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
        assert "nowhere" in capsys.readouterr().err

    def test_append_only(self, synth_dir, tmp_path):
        cfg = write(tmp_path / "c.json", {"synth": {"n_low": 3, "n_high": 3, "feature_dim": 2, "instances_per_bag": [2, 3]}})
        out = tmp_path / "o"
        assert cli.run_command(["synth", "--config", str(cfg), "--out", str(out)]) == 0
        assert cli.run_command(["synth", "--config", str(cfg), "--out", str(out)]) == 2
        assert cli.run_command(["synth", "--config", str(cfg), "--out", str(out), "--force"]) == 0


class TestPipeline:
    def run_chain(self, root, tag):
        base = root / tag
        base.mkdir()
        cv = write(base / "cv.json", {"seed": 0, "train": TRAIN, "data": {"cohort": "../syn/train"}, "crossval": {"k": 3}})
        assert cli.run_command(["crossval", "--config", str(cv), "--out", str(base / "cv")]) == 0
        pr = write(base / "pred.json", {"predict": {"cohort": "../syn/test", "run": "cv", "save_attention": True}})
        assert cli.run_command(["predict", "--config", str(pr), "--out", str(base / "pred")]) == 0
        ev = write(base / "ev.json", {"seed": 0, "eval": {
            "predictions": "pred/predictions.csv", "cohort": "../syn/test", "n_bootstrap": 100,
            "compare": {"fold0": "pred/predictions.csv"}}})
        assert cli.run_command(["eval", "--config", str(ev), "--out", str(base / "ev")]) == 0
        return base

    def test_crossval_predict_eval(self, synth_dir):
        base = self.run_chain(synth_dir, "a")
        for f in ("config.json", "predictions.csv", "selection.json", "run_manifest.json"):
            assert (base / "cv" / f).exists()
        for i in range(3):
            for f in ("checkpoint.dbcp", "history.json", "predictions.csv"):
                assert (base / "cv" / f"fold_{i}" / f).exists()
        with open(base / "pred" / "predictions.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert list(rows[0]) == ["slide_id", "patient_id", "label", "score"] and len(rows) == 10
        metrics = json.loads((base / "ev" / "metrics.json").read_text())
        assert {"auroc", "auprc", "delong", "operating_points", "confusion", "calibration", "subgroups"} <= set(metrics)
        assert "timings_s" not in json.dumps(metrics)
        with open(base / "ev" / "curves.csv") as fh:
            curve = list(csv.reader(fh))
        assert curve[0] == ["fpr", "tpr", "threshold"]
        thr = [float(r[2]) for r in curve[1:]]
        assert thr == sorted(thr, reverse=True)
        manifest = json.loads((base / "ev" / "run_manifest.json").read_text())
        digest = hashlib.sha256((base / "ev" / "metrics.json").read_bytes()).hexdigest()
        assert manifest["checksums"]["metrics.json"] == digest
        assert "eval" in manifest["timings_s"] and manifest["config"]["eval"]["n_bootstrap"] == 100

        rep = write(base / "rep.json", {"report": {"runs": ["ev"]}})
        assert cli.run_command(["report", "--config", str(rep), "--out", str(base / "rep")]) == 0
        assert "[" in (base / "rep" / "report.md").read_text()

    def test_deterministic_artifacts(self, synth_dir):
        a = self.run_chain(synth_dir, "d1")
        b = self.run_chain(synth_dir, "d2")
        for rel in ("cv/fold_0/checkpoint.dbcp", "cv/fold_2/checkpoint.dbcp", "cv/predictions.csv", "ev/metrics.json"):
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel

    def test_seed_override(self, synth_dir, tmp_path):
        cfg = write(tmp_path / "c.json", {"seed": 0, "synth": {"n_low": 2, "n_high": 2, "feature_dim": 2, "instances_per_bag": [2, 3]}})
        assert cli.run_command(["synth", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "5"]) == 0
        doc = json.loads((tmp_path / "o" / "train" / "manifest.json").read_text())
        assert doc["bags"][0]["slide_id"].startswith("s5d0")

    def test_bulk_and_filter(self, synth_dir):
        bulk = write(synth_dir / "bulk.json", {"bulk": {"cohort": "syn/test", "refine": {"min_component_patches": 2}}})
        assert cli.run_command(["bulk", "--config", str(bulk), "--out", str(synth_dir / "bulk")]) == 0
        summary = json.loads((synth_dir / "bulk" / "masks" / "summary.json").read_text())
        assert all(v["components"] <= 2 for v in summary.values())
        filt = write(synth_dir / "filt.json", {"filter": {"cohort": "syn/test", "masks": "bulk/masks"}})
        assert cli.run_command(["filter", "--config", str(filt), "--out", str(synth_dir / "filt")]) == 0
        flagged = json.loads((synth_dir / "filt" / "flagged.json").read_text())["empty_tumor_bulk"]
        kept = json.loads((synth_dir / "filt" / "cohort" / "manifest.json").read_text())["bags"]
        assert len(kept) + len(flagged) == 10


def test_tissue(tmp_path):
    images = tmp_path / "img"
    images.mkdir()
    px = np.full((64, 96, 3), 245, dtype=np.uint8)
    px[:, :32] = np.random.default_rng(0).integers(100, 200, size=(64, 32, 3))
    px[:, :32, 1] //= 2
    tileproc.write_ppm(images / "slide.ppm", tileproc.RasterImage(px))
    tileproc.save_lab_stats(tmp_path / "target.json", tileproc.LabStats((-0.5, 0.0, 0.0), (0.2, 0.05, 0.05)))
    cfg = write(tmp_path / "t.json", {"tissue": {
        "images": "img", "downsample": 8, "grid": {"patch_size_px": 32},
        "normalize_target": "target.json", "write_patches": True}})
    assert cli.run_command(["tissue", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    with open(tmp_path / "o" / "tissue" / "slide_patches.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {(int(r["col"]), int(r["row"])) for r in rows} == {(0, 0), (0, 1)}
    assert (tmp_path / "o" / "patches" / "slide" / "0_1.ppm").exists()
