import dataclasses
import json

import numpy as np
import pytest

from amddx.datamodel import (
    LESION_CLASSES,
    N_LESIONS,
    DatasetManifest,
    FoldPlan,
    PredictionRecord,
    Sample,
    check_image,
    load_fold_plan,
    load_image,
    load_manifest,
    load_predictions,
    save_fold_plan,
    save_manifest,
    save_predictions,
    validate_manifest,
)
from conftest import make_samples, write_png


def test_canonical_lesion_order():
    assert LESION_CLASSES == ("drusen", "exudate", "hemorrhage", "scar", "others")
    assert N_LESIONS == 5


def test_well_formed_manifest_has_no_violations(small_manifest):
    assert validate_manifest(small_manifest) == []


def test_duplicate_id_reported_once():
    a, b, c = make_samples(3)
    m = DatasetManifest("dup", (a, b, dataclasses.replace(c, sample_id="s1")))
    v = validate_manifest(m)
    assert len(v) == 1
    assert "s1" in v[0] and "duplicate" in v[0]


def test_short_lesion_vector_reported():
    a, b, c = make_samples(3)
    m = DatasetManifest("short", (a, b, dataclasses.replace(c, lesions=(0, 1, 0, 0))))
    v = validate_manifest(m)
    assert len(v) == 1
    assert "length 4" in v[0] and "5" in v[0]


@pytest.mark.parametrize(
    "change, fragment",
    [
        ({"diagnosis": 2}, "diagnosis"),
        ({"lesions": (0, 1, 2, 0, 0)}, "lesion values"),
        ({"eye_group_id": ""}, "eye_group_id"),
        ({"sample_id": ""}, "sample_id"),
    ],
)
def test_other_violations(change, fragment):
    a, b = make_samples(2)
    v = validate_manifest(DatasetManifest("x", (a, dataclasses.replace(b, **change))))
    assert len(v) == 1 and fragment in v[0]


def test_non_canonical_class_order(small_manifest):
    m = dataclasses.replace(small_manifest, class_order=tuple(reversed(LESION_CLASSES)))
    assert len(validate_manifest(m)) == 1


def test_missing_file_checked_only_on_request(tmp_path):
    m = DatasetManifest("files", make_samples(1), root=tmp_path)
    assert validate_manifest(m) == []
    assert "not found" in validate_manifest(m, check_files=True)[0]
    write_png(tmp_path / "s0.png", np.zeros((4, 4, 3)))
    assert validate_manifest(m, check_files=True) == []


def test_unknown_lesions_and_null_entries_are_valid():
    a, b = make_samples(2)
    m = DatasetManifest("x", (dataclasses.replace(a, lesions=None), dataclasses.replace(b, lesions=(1, None, 0, 0, 0))))
    assert validate_manifest(m) == []
    assert not m.samples[0].lesion_labels_known
    assert m.samples[1].lesion_labels_known


def test_manifest_round_trip(tmp_path):
    samples = make_samples(4) + (Sample("u", "sub/u.png", None, None, "eye:u"),)
    m = DatasetManifest("rt", samples)
    save_manifest(m, tmp_path / "m.json")
    back = load_manifest(tmp_path / "m.json")
    assert back == m
    for s, t in zip(m.samples, back.samples):
        assert dataclasses.asdict(s) == dataclasses.asdict(t)
    save_manifest(back, tmp_path / "m2.json")
    assert (tmp_path / "m.json").read_bytes() == (tmp_path / "m2.json").read_bytes()
    assert back.resolve(back.samples[-1]) == tmp_path / "sub" / "u.png"


def test_prediction_record_checks():
    with pytest.raises(ValueError, match="expected 6"):
        PredictionRecord("a", (0.5,) * 5)
    with pytest.raises(ValueError, match="outside"):
        PredictionRecord("a", (0.5,) * 5 + (1.5,))


def test_predictions_round_trip(tmp_path):
    recs = [PredictionRecord("a", (0.1, 0.2, 0.3, 0.4, 0.5, 0.6), repetition=3), PredictionRecord("b", (0.0,) * 6)]
    save_predictions(recs, tmp_path / "p.json")
    assert load_predictions(tmp_path / "p.json") == recs
    assert json.loads((tmp_path / "p.json").read_text())[0]["repetition"] == 3


def test_fold_plan_runs_and_round_trip(tmp_path):
    plan = FoldPlan(((("a", "b"), ("c",)), (("c", "a"), ("b",))), seed=9)
    runs = list(plan.runs())
    assert plan.k == 2 and len(runs) == 4
    assert runs[0] == (0, 0, ("c",), ("a", "b"))
    assert runs[3] == (1, 1, ("c", "a"), ("b",))
    save_fold_plan(plan, tmp_path / "f.json")
    assert load_fold_plan(tmp_path / "f.json") == plan


def test_load_image_png_and_gz(tmp_path):
    import gzip

    arr = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3) * 10
    p = write_png(tmp_path / "x.png", arr)
    img = load_image(p)
    assert img.dtype == np.float32 and img.shape == (2, 3, 3)
    np.testing.assert_array_equal(img, arr.astype(np.float32) / 255)
    gz = tmp_path / "x.png.gz"
    gz.write_bytes(gzip.compress(p.read_bytes()))
    np.testing.assert_array_equal(load_image(gz), img)


def test_check_image():
    check_image(np.zeros((32, 40, 3)))
    with pytest.raises(ValueError, match="minimum"):
        check_image(np.zeros((31, 40, 3)))
    with pytest.raises(ValueError, match="shape"):
        check_image(np.zeros((32, 32)))
    with pytest.raises(ValueError, match="within"):
        check_image(np.full((32, 32, 3), 1.5))
