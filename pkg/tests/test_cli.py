import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from cellattn import checkpoint as ckpt
from cellattn import cli
from cellattn.config import RunConfig
from cellattn.models import build_model
from cellattn.train import MetricsReport


def _hashes(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(Path(root).rglob("*")) if p.is_file()}


def _write_config(path, **values):
    path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()))
    return path


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    spec = _write_config(root / "spec.txt", **{"synth.count_per_class": 10, "synth.seed": 3})
    cli.cmd_synth(spec, root / "data")
    return root / "data"


@pytest.fixture(scope="module")
def run_config(dataset_dir):
    return _write_config(dataset_dir.parent / "run.cfg", **{
        "data.root": "data", "model.family": "densenet", "model.input_size": 32,
        "train.epochs": 2, "seed": 1})


@pytest.fixture(scope="module")
def run_dir(run_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--config", str(run_config), "--out", str(out)]) == 0
    return out


# -- synth ----------------------------------------------------------------------

def test_synth_default_layout_and_count(tmp_path):
    spec = _write_config(tmp_path / "spec.txt", **{"synth.count_per_class": 100})
    assert cli.main(["synth", "--config", str(spec), "--out", str(tmp_path / "d")]) == 0
    dirs = sorted(p for p in (tmp_path / "d").iterdir() if p.is_dir())
    assert len(dirs) == 5
    assert sum(1 for p in (tmp_path / "d").rglob("*.png")) == 500
    manifest = cli.read_manifest(tmp_path / "d")
    assert manifest["command"] == "synth" and manifest["counts"]["dyskeratotic"] == 100


def test_synth_rerun_identical_hashes(tmp_path, dataset_dir):
    spec = dataset_dir.parent / "spec.txt"
    cli.cmd_synth(spec, tmp_path / "again")
    assert _hashes(tmp_path / "again") == _hashes(dataset_dir)


def test_synth_seed_flag_changes_images(tmp_path):
    spec = _write_config(tmp_path / "spec.txt", **{"synth.count_per_class": 1})
    cli.cmd_synth(spec, tmp_path / "a", seed=1)
    cli.cmd_synth(spec, tmp_path / "b", seed=2)
    assert _hashes(tmp_path / "a") != _hashes(tmp_path / "b")


def test_synth_unknown_key(tmp_path, capsys):
    spec = _write_config(tmp_path / "spec.txt", **{"synth.colour": "red"})
    assert cli.main(["synth", "--config", str(spec), "--out", str(tmp_path / "d")]) == 1
    assert "synth.colour" in capsys.readouterr().err


def test_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli.main(["synth", "--out", str(blocker / "sub")]) == 1
    assert "error:" in capsys.readouterr().err


# -- train ----------------------------------------------------------------------

def test_train_outputs_and_manifest(run_dir, dataset_dir):
    for name in (cli.CHECKPOINT, cli.HISTORY, cli.SPLIT_FILE, cli.RESOLVED, "metrics_test.txt", cli.MANIFEST):
        assert (run_dir / name).is_file()
    manifest = cli.read_manifest(run_dir)
    assert manifest["command"] == "train" and manifest["tool_version"]
    assert manifest["seed"] == 1
    assert manifest["config"]["data.root"] == str(dataset_dir.resolve())
    assert set(manifest["norm_stats"]) == {"mean", "std"}
    assert manifest["split_sha256"] == hashlib.sha256((run_dir / cli.SPLIT_FILE).read_bytes()).hexdigest()
    assert manifest["checkpoint_sha256"] == hashlib.sha256((run_dir / cli.CHECKPOINT).read_bytes()).hexdigest()
    history = (run_dir / cli.HISTORY).read_text().splitlines()
    assert len(history) == 3


def test_train_report_structure(run_dir):
    report = MetricsReport.from_text((run_dir / "metrics_test.txt").read_text())
    assert len(report.class_names) == 5 and len(report.f1) == 5
    assert report.weights.sum() == pytest.approx(1.0)
    assert report.num_samples == 5
    assert 0 <= report.accuracy <= 1


def test_train_zero_epochs_keeps_initial_weights(run_config, tmp_path):
    result = cli.cmd_train(run_config, tmp_path, epochs=0)
    assert result.history == []
    assert (tmp_path / cli.HISTORY).read_text() == "epoch,train_loss,val_accuracy\n"
    rc = RunConfig.from_values(cli.read_manifest(tmp_path)["config"])
    fresh = build_model(rc.model_config()).state_dict()
    loaded = ckpt.load_file(tmp_path / cli.CHECKPOINT).state_dict()
    assert all(loaded[k].tobytes() == v.tobytes() for k, v in fresh.items())


def test_train_unknown_key_reports_path(tmp_path, capsys):
    bad = _write_config(tmp_path / "bad.cfg", **{"seed": 0, "train.learning_rate": 0.1})
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "train.learning_rate" in err and "bad.cfg:2" in err


def test_train_invalid_value_names_key(tmp_path, capsys):
    bad = _write_config(tmp_path / "bad.cfg", **{"train.batch_size": "many"})
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "train.batch_size" in capsys.readouterr().err


def test_train_missing_dataset(tmp_path, capsys):
    cfg = _write_config(tmp_path / "run.cfg", **{"data.root": "nowhere"})
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "nowhere" in capsys.readouterr().err


def test_train_class_count_mismatch(run_config, tmp_path, capsys):
    cfg = Path(run_config).read_text() + "model.num_classes = 3\n"
    path = run_config.parent / "three.cfg"
    path.write_text(cfg)
    assert cli.main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 1
    assert "model.num_classes" in capsys.readouterr().err


# -- eval -----------------------------------------------------------------------

def test_eval_reproduces_best_validation_accuracy(run_dir):
    manifest = cli.read_manifest(run_dir)
    report = cli.cmd_eval(run_dir, "validation")
    assert report.accuracy == manifest["best_val_accuracy"]
    best = [line for line in (run_dir / cli.HISTORY).read_text().splitlines()[1:]
            if int(line.split(",")[0]) == manifest["best_epoch"]]
    assert float(best[0].split(",")[2]) == report.accuracy
    assert (run_dir / "manifest_eval_validation.json").is_file()
    assert cli.read_manifest(run_dir)["command"] == "train"


def test_eval_test_split_matches_train_report(run_dir, tmp_path):
    report = cli.cmd_eval(run_dir, "test", out=tmp_path)
    assert report.to_text() == (run_dir / "metrics_test.txt").read_text()
    assert len(report.f1) == 5 and report.weights.sum() == pytest.approx(1.0)
    assert json.loads((tmp_path / cli.MANIFEST).read_text())["command"] == "eval"


def test_eval_unknown_split(run_dir, capsys):
    assert cli.main(["eval", "--run", str(run_dir), "--split", "holdout"]) == 1
    err = capsys.readouterr().err
    assert "holdout" in err and "train, validation, test" in err


def test_eval_not_a_run(tmp_path, capsys):
    assert cli.main(["eval", "--run", str(tmp_path)]) == 1
    assert cli.MANIFEST in capsys.readouterr().err


# -- explain --------------------------------------------------------------------

def test_explain_sample_panels_and_report(run_dir, tmp_path):
    sid = "koilocytotic/koilocytotic_0003.png"
    out = tmp_path / "x"
    assert cli.main(["explain", "--run", str(run_dir), "--sample", sid, "--steps", "8",
                     "--out", str(out)]) == 0
    stem = "koilocytotic_koilocytotic_0003"
    pngs = sorted(p.name for p in out.glob("*.png"))
    assert pngs == sorted(f"{stem}_{n}.png" for n in
                          ("original", "gradient_overlay", "ig_overlay", "gradient", "ig"))
    report = dict(line.split("=", 1) for line in (out / f"{stem}_report.txt").read_text().splitlines())
    assert report["target_class"] == report["predicted_class"]
    assert report["steps"] == "8" and report["baseline"] == "black"
    manifest = cli.read_manifest(out)
    assert manifest["metrics"][stem]["target"] == int(report["target_class"])


def test_explain_explicit_target_and_zero_baseline(run_dir, tmp_path):
    res = cli.cmd_explain(run_dir, samples=["parabasal/parabasal_0000.png"], out=tmp_path, steps=2,
                          baseline="zero", target=4)
    (r,) = res.values()
    assert r["target"] == 4


def test_explain_gap_steps_one_vs_many(run_dir, tmp_path):
    samples = [f"{c}/{c}_000{i}.png" for c, i in
               (("dyskeratotic", 0), ("metaplastic", 1), ("superficial", 2))]
    gaps = {}
    for steps in (1, 256):
        res = cli.cmd_explain(run_dir, samples=samples, out=tmp_path / str(steps), steps=steps)
        gaps[steps] = np.median([r["completeness_gap"] for r in res.values()])
    assert gaps[1] >= gaps[256]


def test_explain_resizes_foreign_image_with_notice(run_dir, tmp_path, capsys):
    img = tmp_path / "field.png"
    Image.fromarray(np.full((40, 50, 3), 120, dtype=np.uint8)).save(img)
    assert cli.main(["explain", "--run", str(run_dir), "--image", str(img), "--steps", "2",
                     "--out", str(tmp_path / "x")]) == 0
    assert "resizing" in capsys.readouterr().err
    assert len(list((tmp_path / "x").glob("field_*.png"))) == 5


def test_explain_errors(run_dir, tmp_path, capsys):
    assert cli.main(["explain", "--run", str(run_dir), "--out", str(tmp_path)]) == 1
    assert cli.main(["explain", "--run", str(run_dir), "--sample", "nope.png", "--out", str(tmp_path)]) == 1
    assert cli.main(["explain", "--run", str(run_dir), "--sample", "parabasal/parabasal_0000.png",
                     "--target", "7", "--out", str(tmp_path)]) == 1
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"junk")
    assert cli.main(["explain", "--run", str(run_dir), "--image", str(bad), "--out", str(tmp_path)]) == 1


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
    assert "cellattn" in capsys.readouterr().out
