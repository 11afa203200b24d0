import json

import numpy as np
import pytest
from PIL import Image

from amddx.datamodel import LESION_CLASSES, load_image, load_manifest, validate_manifest
from amddx.synthdata import Blob, SynthConfig, diagnosis_rule, generate, in_central_third, memory_loader


def test_zero_samples(tmp_path):
    ds = generate(SynthConfig(0), tmp_path)
    assert len(ds.manifest) == 0 and ds.geometry == []
    assert load_manifest(tmp_path / "manifest.json").samples == ()


def test_same_seed_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    generate(SynthConfig(6, image_size=64, seed=3), a)
    generate(SynthConfig(6, image_size=64, seed=3), b)
    for name in ("manifest.json", "geometry.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    for p in sorted((a / "images").iterdir()):
        assert p.read_bytes() == (b / "images" / p.name).read_bytes()


def test_different_seed_differs():
    a = generate(SynthConfig(4, image_size=64, seed=1))
    b = generate(SynthConfig(4, image_size=64, seed=2))
    assert not np.array_equal(a.images["synth_0000"], b.images["synth_0000"])


def test_samples_independent_of_count():
    small = generate(SynthConfig(3, image_size=64, seed=9))
    large = generate(SynthConfig(8, image_size=64, seed=9))
    # Targets come from a shuffle of the whole set, so compare via equal diagnoses only.
    for sid in small.images:
        s, l = small.manifest.by_id()[sid], large.manifest.by_id()[sid]
        if s.diagnosis == l.diagnosis:
            np.testing.assert_array_equal(small.images[sid], large.images[sid])


def test_diagnosis_rule():
    size = 96
    c = size / 2
    two = [Blob("drusen", c - 5, c - 5, 3), Blob("drusen", c + 8, c + 8, 3)]
    assert diagnosis_rule(two, size) == 1
    assert diagnosis_rule(two[:1], size) == 0
    outside = [Blob("drusen", 5, 5, 3), Blob("drusen", 90, 90, 3)]
    assert diagnosis_rule(outside, size) == 0
    others = [Blob("exudate", c, c, 3), Blob("scar", c + 9, c, 3)]
    assert diagnosis_rule(others, size) == 0


def test_central_third_bounds():
    assert in_central_third(32, 32, 96) and not in_central_third(64, 50, 96)
    assert not in_central_third(31.9, 50, 96)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    return root, generate(SynthConfig(80, image_size=96, seed=11), root)


def test_labels_match_planted_classes(dataset):
    _, ds = dataset
    for s in ds.manifest.samples:
        planted = {g["class"] for g in ds.blobs_of(s.sample_id)}
        assert s.lesions == tuple(int(c in planted) for c in LESION_CLASSES)


def test_diagnosis_matches_geometry(dataset):
    _, ds = dataset
    for s in ds.manifest.samples:
        central = 0
        for g in ds.blobs_of(s.sample_id):
            x0, y0, x1, y1 = g["bbox"]
            if g["class"] == "drusen" and in_central_third((y0 + y1) / 2, (x0 + x1) / 2, 96):
                central += 1
        # Bounding boxes clip at the border, so the rounded centers can drift by a pixel.
        if s.diagnosis == 1:
            assert central >= 1
        assert s.diagnosis in (0, 1)


def test_class_balance_and_single_lesion_probes(dataset):
    _, ds = dataset
    frac = np.mean([s.diagnosis for s in ds.manifest.samples])
    assert 0.3 <= frac <= 0.7
    counts = {}
    for g in ds.geometry:
        counts[g["sample_id"]] = counts.get(g["sample_id"], 0) + 1
    assert sum(v == 1 for v in counts.values()) >= 5


def test_files_on_disk(dataset):
    root, ds = dataset
    m = load_manifest(root / "manifest.json")
    assert validate_manifest(m, check_files=True) == []
    assert len(list((root / "images").glob("*.png"))) == 80
    geometry = json.loads((root / "geometry.json").read_text())
    assert geometry == ds.geometry
    assert set(geometry[0]) == {"sample_id", "class", "bbox"}
    sid = m.samples[0].sample_id
    np.testing.assert_array_equal(load_image(m.resolve(m.samples[0])), ds.images[sid])
    assert memory_loader(ds)(m.samples[0]) is ds.images[sid]


def test_blob_bbox_inside_image(dataset):
    _, ds = dataset
    for g in ds.geometry:
        x0, y0, x1, y1 = g["bbox"]
        assert 0 <= x0 <= x1 < 96 and 0 <= y0 <= y1 < 96


def test_bbox_covers_drawn_pixels():
    b = Blob("exudate", 20.3, 30.7, 5.2)
    x0, y0, x1, y1 = b.bbox(64)
    yy, xx = np.mgrid[0:64, 0:64]
    drawn = np.hypot(yy - b.row, xx - b.col) <= b.radius
    ys, xs = np.nonzero(drawn)
    assert (xs.min(), ys.min(), xs.max(), ys.max()) == (x0, y0, x1, y1)


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(-1)
    with pytest.raises(ValueError):
        SynthConfig(10, image_size=16)
    with pytest.raises(ValueError):
        SynthConfig(10, amd_fraction=0.9)


def test_impossible_layout_is_reported():
    with pytest.raises(ValueError, match="could not place"):
        generate(SynthConfig(2, image_size=32))
