import json

import pytest

from amddx.cli import RunConfig, UsageError, main
from amddx.datamodel import PredictionRecord, load_fold_plan, load_manifest, load_predictions, save_predictions
from fakedata import make_ichallenge, make_stare


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--n", "12", "--seed", "3", "--size", "64", "--out", str(out)]) == 0
    return out


def write_config(path, manifest, **overrides):
    cfg = {
        "dataset": {"kind": "manifest", "manifest": str(manifest)},
        "model": {"preset": "desk"},
        "optimizer": {"learning_rate": 1e-3, "epochs": 1},
        "augmentation": {"rotation_degrees": [0.0, 0.0], "scale_range": [1.0, 1.0], "shear_degrees": [0.0, 0.0],
                         "flip_horizontal": 0.0, "flip_vertical": 0.0},
        "training": {"seed": 5, "batch_size": 2},
        "folds": {"k": 2, "repetitions": 2, "seed": 1},
    }
    for key, value in overrides.items():
        if value is None:
            cfg.pop(key, None)
        else:
            cfg[key] = value
    path.write_text(json.dumps(cfg))
    return path


# ---------------------------------------------------------------------------
# ingest / folds


def test_ingest_ichallenge(tmp_path, capsys):
    _, groups = make_ichallenge(tmp_path / "ich")
    out = tmp_path / "m" / "ichallenge.json"
    code, stdout, _ = run(capsys, "ingest", "--dataset", "ichallenge", "--root", tmp_path / "ich",
                          "--eye-groups", groups, "--out", out)
    assert code == 0
    assert len(load_manifest(out)) == 400
    report = json.loads((out.parent / "ichallenge.validation.json").read_text())
    assert report == {"samples": 400, "violations": []}


def test_ingest_stare(tmp_path, capsys):
    make_stare(tmp_path / "stare")
    out = tmp_path / "stare.json"
    assert run(capsys, "ingest", "--dataset", "stare", "--root", tmp_path / "stare", "--out", out)[0] == 0
    assert len(load_manifest(out)) == 82


def test_ingest_missing_root_is_usage_error(tmp_path, capsys):
    code, _, err = run(capsys, "ingest", "--dataset", "aria", "--root", tmp_path / "nowhere", "--out", tmp_path / "x.json")
    assert code == 2
    assert "nowhere" in err


def test_folds_command(synth_dir, tmp_path, capsys):
    out = tmp_path / "folds.json"
    code, _, _ = run(capsys, "folds", "--manifest", synth_dir / "manifest.json", "--seed", 4, "--out", out)
    assert code == 0
    plan = load_fold_plan(out)
    assert len(plan.repetitions) == 5 and plan.k == 2


def test_folds_requires_seed(synth_dir, tmp_path):
    with pytest.raises(SystemExit):
        main(["folds", "--manifest", str(synth_dir / "manifest.json"), "--out", str(tmp_path / "f.json")])


# ---------------------------------------------------------------------------
# config


def test_config_requires_explicit_seeds(synth_dir, tmp_path):
    path = write_config(tmp_path / "c.json", synth_dir / "manifest.json", folds={"k": 2, "repetitions": 1})
    with pytest.raises(UsageError, match="seed"):
        RunConfig.load(path)
    path = write_config(tmp_path / "c.json", synth_dir / "manifest.json", training={"batch_size": 2})
    with pytest.raises(UsageError, match="seed"):
        RunConfig.load(path)


def test_config_missing_dataset_path(tmp_path):
    path = write_config(tmp_path / "c.json", tmp_path / "absent.json")
    with pytest.raises(UsageError, match="absent.json"):
        RunConfig.load(path)


def test_config_relative_paths(synth_dir, tmp_path):
    (tmp_path / "data").symlink_to(synth_dir)
    path = write_config(tmp_path / "c.json", "data/manifest.json")
    cfg = RunConfig.load(path)
    assert len(cfg.manifest()) == 12


def test_cv_bad_config_exit_code(tmp_path, capsys):
    (tmp_path / "c.json").write_text("{not json")
    assert run(capsys, "cv", "--config", tmp_path / "c.json", "--out", tmp_path)[0] == 2


# ---------------------------------------------------------------------------
# cv / eval / maps


@pytest.fixture(scope="module")
def cv_runs(synth_dir, tmp_path_factory):
    root = tmp_path_factory.mktemp("cv")
    config = write_config(root / "config.json", synth_dir / "manifest.json")
    for mode in ("al", "ao"):
        assert main(["cv", "--config", str(config), "--mode", mode, "--out", str(root / "a")]) == 0
    assert main(["cv", "--config", str(config), "--mode", "al", "--out", str(root / "b")]) == 0
    return root


def test_cv_outputs(cv_runs):
    out = cv_runs / "a" / "al"
    assert len(list((out / "params").glob("*.npz"))) == 4
    assert len(load_predictions(out / "predictions.json")) == 24
    assert json.loads((out / "config.json").read_text())["mode"] == "al"
    assert json.loads((cv_runs / "a" / "ao" / "config.json").read_text())["loss"]["alpha"] == 0.0


def test_cv_rerun_is_identical(cv_runs):
    a = load_predictions(cv_runs / "a" / "al" / "predictions.json")
    b = load_predictions(cv_runs / "b" / "al" / "predictions.json")
    assert [p.probabilities for p in a] == [p.probabilities for p in b]


def test_cv_output_from_environment(synth_dir, tmp_path, monkeypatch, capsys):
    config = write_config(tmp_path / "c.json", synth_dir / "manifest.json",
                          optimizer={"epochs": 0}, folds={"k": 2, "repetitions": 1, "seed": 0})
    monkeypatch.setenv("AMDDX_OUT", str(tmp_path / "env"))
    assert run(capsys, "cv", "--config", config)[0] == 0
    assert (tmp_path / "env" / "al" / "predictions.json").is_file()


def test_eval_compare(cv_runs, synth_dir, tmp_path, capsys):
    code, stdout, _ = run(capsys, "eval", "--predictions", cv_runs / "a" / "al" / "predictions.json",
                          "--manifest", synth_dir / "manifest.json",
                          "--compare", f"AO={cv_runs / 'a' / 'ao' / 'predictions.json'}", "--out", tmp_path)
    assert code == 0
    assert "A+L" in stdout and "AO" in stdout
    report = json.loads((tmp_path / "report.json").read_text())
    assert set(report["lesions"]) == {"drusen", "exudate", "hemorrhage", "scar", "others"}
    assert 0 <= report["diagnosis"]["auc_roc"] <= 100
    assert (tmp_path / "comparison.txt").read_text().strip() == stdout.strip()


def test_eval_perfect_predictions(synth_dir, tmp_path, capsys):
    manifest = load_manifest(synth_dir / "manifest.json")
    preds = [PredictionRecord(s.sample_id, (float(s.diagnosis),) + tuple(float(v) for v in s.lesions), repetition=0)
             for s in manifest.samples]
    save_predictions(preds, tmp_path / "p.json")
    code, stdout, _ = run(capsys, "eval", "--predictions", tmp_path / "p.json", "--manifest",
                          synth_dir / "manifest.json", "--out", tmp_path / "e")
    assert code == 0
    assert "100.00" in stdout


def test_eval_missing_predictions(synth_dir, tmp_path, capsys):
    code, _, err = run(capsys, "eval", "--predictions", tmp_path / "none.json", "--manifest",
                       synth_dir / "manifest.json", "--out", tmp_path)
    assert code == 2
    assert "none.json" in err


def test_eval_external(cv_runs, synth_dir, tmp_path, capsys):
    code, _, _ = run(capsys, "eval", "--external", synth_dir / "manifest.json",
                     "--params", cv_runs / "a" / "al" / "params", "--out", tmp_path)
    assert code == 0
    preds = load_predictions(tmp_path / "predictions.json")
    assert len(preds) == 4 * 12
    assert sorted({p.repetition for p in preds}) == [0, 1, 2, 3]


def test_maps(cv_runs, synth_dir, tmp_path, capsys):
    params = sorted((cv_runs / "a" / "al" / "params").glob("*.npz"))[0]
    code, _, _ = run(capsys, "maps", "--params", params, "--manifest", synth_dir / "manifest.json",
                     "--ids", "synth_0000,synth_0001", "--out", tmp_path)
    assert code == 0
    assert len([p for p in tmp_path.rglob("*") if p.is_file()]) == 20


def test_maps_unknown_id(cv_runs, synth_dir, tmp_path, capsys):
    params = sorted((cv_runs / "a" / "al" / "params").glob("*.npz"))[0]
    code, _, err = run(capsys, "maps", "--params", params, "--manifest", synth_dir / "manifest.json",
                       "--ids", "nope", "--out", tmp_path)
    assert code == 2 and "nope" in err


def test_synth_zero_samples(tmp_path, capsys):
    assert run(capsys, "synth", "--n", 0, "--out", tmp_path)[0] == 0
    assert len(load_manifest(tmp_path / "manifest.json")) == 0


def test_synth_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        run(capsys, "synth", "--n", 3, "--seed", 9, "--size", 64, "--out", tmp_path / name)
    for i in range(3):
        a = (tmp_path / "a" / "images" / f"synth_{i:04d}.png").read_bytes()
        assert a == (tmp_path / "b" / "images" / f"synth_{i:04d}.png").read_bytes()
