"""On-disk stand-ins for the public dataset layouts, with the published counts."""

import gzip
import io
import json

import numpy as np
from PIL import Image

ICHALLENGE_PER_CLASS = (61, 38, 19, 13, 17)
CLASS_DIRS = ("drusen", "exudate", "hemorrhage", "scar", "others")


def _save(path, array, fmt=None):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format=fmt)


def _image(seed, size=32):
    return np.random.default_rng(seed).integers(0, 256, (size, size, 3), dtype=np.uint8)


def make_ichallenge(root, n=400, n_amd=89, n_annotated=118, per_class=ICHALLENGE_PER_CLASS, n_pairs=65):
    """Write images, lesion masks and an eye-group file; return the expected labels."""
    expected = {}
    amd_ids = set(range(n_amd))
    for i in range(n):
        sid = f"A{i:04d}" if i in amd_ids else f"N{i:04d}"
        folder = "AMD" if i in amd_ids else "Non-AMD"
        _save(root / "Training400" / folder / f"{sid}.jpg", _image(i))
        expected[sid] = {"diagnosis": int(i in amd_ids), "lesions": None}

    ids = sorted(expected, key=lambda s: int(s[1:]))
    annotated = ids[:n_annotated]
    for sid in annotated:
        expected[sid]["lesions"] = [0] * 5
    for c, count in enumerate(per_class):
        # Stagger the positives so classes overlap differently.
        start = (c * 23) % n_annotated
        for j in range(count):
            sid = annotated[(start + j) % n_annotated]
            expected[sid]["lesions"][c] = 1
    for sid in annotated:
        labels = expected[sid]["lesions"]
        for c, name in enumerate(CLASS_DIRS):
            if labels[c] or (not any(labels) and c == 0):
                mask = np.full((32, 32), 255, dtype=np.uint8)
                if labels[c]:
                    mask[10:14, 5:15] = 0
                _save(root / "Training400" / "Lesion_Masks" / name / f"{sid}.png", mask)

    pairs = [[ids[2 * j], ids[2 * j + 1]] for j in range(n_pairs)]
    groups_path = root / "eye_groups.json"
    groups_path.write_text(json.dumps(pairs))
    return expected, groups_path


def make_aria(root, n_amd=23, n_control=61, n_diabetic=5):
    for i in range(n_amd):
        _save(root / "aria_a_markups" / f"aria_a_{i}_1.tif", _image(1000 + i), "TIFF")
    for i in range(n_control):
        _save(root / "aria_c_markups" / f"aria_c_{i}_2.tif", _image(2000 + i), "TIFF")
    for i in range(n_diabetic):
        _save(root / "aria_d_markups" / f"aria_d_{i}_3.tif", _image(3000 + i), "TIFF")


def make_stare(root, n_amd=46, n_normal=36, n_other=20):
    lines = []
    k = 1
    for label, count in (("Age Related Macular Degeneration", n_amd), ("Normal", n_normal),
                         ("Background Diabetic Retinopathy", n_other)):
        for _ in range(count):
            sid = f"im{k:04d}"
            buf = io.BytesIO()
            Image.fromarray(_image(4000 + k)).save(buf, format="PPM")
            (root / "images").mkdir(parents=True, exist_ok=True)
            if k % 2:
                (root / "images" / f"{sid}.ppm.gz").write_bytes(gzip.compress(buf.getvalue()))
            else:
                (root / "images" / f"{sid}.ppm").write_bytes(buf.getvalue())
            lines.append(f"{sid}\t{k % 7} 0\t{label}")
            k += 1
    (root / "all-mg-codes.txt").write_text("\n".join(lines) + "\n")
