"""Turn on-disk datasets into validated manifests and grouped fold plans.

Assumed layouts (the public releases vary; adapt by renaming folders):

iChallenge-AMD::

    <root>/**/{A,N}####.jpg               images; AMD/ and Non-AMD/ parents or the
                                          A/N filename prefix give the diagnosis
    <root>/**/Lesion_Masks/<class>/<id>.* one mask per annotated class; lesion
                                          pixels are dark (0) on a white background

An image with at least one mask file is lesion-annotated; absent classes of an
annotated image are negative. Images without any mask are lesion-unknown.

ARIA::

    <root>/**/aria_{a,c,d}_*.{tif,jpg,png}  a = AMD, c = control, d = diabetic (excluded)

STARE::

    <root>/**/im####.ppm[.gz]
    <root>/**/all-mg-codes.txt   tab-separated: image id, codes, diagnosis comment
"""

from __future__ import annotations

import gzip
import io
import json
import logging
import re
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from amddx.datamodel import (
    LESION_CLASSES,
    MIN_IMAGE_SIZE,
    DatasetManifest,
    FoldPlan,
    PathLike,
    Sample,
    validate_manifest,
)

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".ppm", ".bmp", ".tif", ".tiff")

ICHALLENGE_COUNTS = {
    "samples": 400,
    "amd": 89,
    "lesion_annotated": 118,
    "per_class": (61, 38, 19, 13, 17),
    "min_grouped": 125,
}
ARIA_COUNTS = {"samples": 84, "amd": 23}
STARE_COUNTS = {"samples": 82, "amd": 46}


class DatasetError(Exception):
    """Raised when a dataset directory cannot be turned into a valid manifest."""


# ---------------------------------------------------------------------------
# image-level lesion labels


def read_mask(path: PathLike, foreground: str = "dark") -> np.ndarray:
    """Read a lesion mask as a boolean array (True = lesion pixel)."""
    with Image.open(path) as im:
        gray = np.asarray(im.convert("L"))
    if foreground == "dark":
        return gray < 128
    if foreground == "bright":
        return gray >= 128
    raise ValueError(f"unknown mask foreground convention {foreground!r}")


def derive_lesion_labels(
    masks: Mapping[str, Optional[np.ndarray]],
    image_shape: Optional[Tuple[int, int]] = None,
    min_lesion_pixels: int = 1,
) -> Tuple[int, ...]:
    """Reduce per-class pixel masks to a presence vector in canonical order.

    A class is present when its mask exists and has at least
    ``min_lesion_pixels`` foreground pixels. Classes missing from ``masks``
    count as absent.
    """
    unknown = set(masks) - set(LESION_CLASSES)
    if unknown:
        raise ValueError(f"unknown lesion classes: {sorted(unknown)}")
    labels = []
    for name in LESION_CLASSES:
        mask = masks.get(name)
        if mask is None:
            labels.append(0)
            continue
        mask = np.asarray(mask)
        if image_shape is not None and tuple(mask.shape[:2]) != tuple(image_shape[:2]):
            raise ValueError(
                f"{name} mask is {mask.shape[:2]}, image is {tuple(image_shape[:2])}"
            )
        labels.append(int(np.count_nonzero(mask) >= min_lesion_pixels))
    return tuple(labels)


# ---------------------------------------------------------------------------
# eye groups


def read_eye_groups(path: PathLike) -> List[List[str]]:
    with open(path) as fh:
        groups = json.load(fh)
    if not isinstance(groups, list) or not all(isinstance(g, list) for g in groups):
        raise DatasetError(f"{path}: eye-group file must be a JSON list of lists of sample ids")
    return groups


def assign_eye_groups(
    samples: Sequence[Sample], groups: Optional[Iterable[Sequence[str]]] = None
) -> List[Sample]:
    """Give samples that share an eye a common ``eye_group_id``.

    ``groups`` is any iterable of id groups (pairs included); overlapping groups
    are merged transitively. Unlisted samples become singleton groups named
    after themselves. A merged group is named ``eye:<smallest member id>``.
    """
    ids = [s.sample_id for s in samples]
    known = set(ids)
    parent = {i: i for i in ids}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for group in groups or ():
        group = list(group)
        missing = [g for g in group if g not in known]
        if missing:
            raise DatasetError(f"eye-group list references unknown sample ids: {missing}")
        for other in group[1:]:
            a, b = find(group[0]), find(other)
            if a != b:
                parent[max(a, b)] = min(a, b)

    members: Dict[str, List[str]] = {}
    for i in ids:
        members.setdefault(find(i), []).append(i)
    out = []
    for s in samples:
        root = find(s.sample_id)
        gid = s.sample_id if len(members[root]) == 1 else f"eye:{root}"
        out.append(Sample(s.sample_id, s.image_ref, s.diagnosis, s.lesions, gid))
    return out


# ---------------------------------------------------------------------------
# dataset loaders


def _find_images(root: Path, exclude_dir: Optional[str] = None) -> List[Path]:
    found = []
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        name = p.name.lower()
        if not (name.endswith(IMAGE_SUFFIXES) or name.endswith(".ppm.gz")):
            continue
        if exclude_dir and any(part.lower() == exclude_dir.lower() for part in p.parts):
            continue
        found.append(p)
    return found


def _stem(path: Path) -> str:
    name = path.name
    if name.lower().endswith(".gz"):
        name = name[:-3]
    return Path(name).stem


def _image_size(path: Path) -> Tuple[int, int]:
    """(height, width) read from the file header."""
    if path.name.lower().endswith(".gz"):
        with gzip.open(path) as fh, Image.open(io.BytesIO(fh.read())) as im:
            return im.height, im.width
    with Image.open(path) as im:
        return im.height, im.width


def _check_counts(name: str, got: Dict[str, object], expected: Dict[str, object], strict: bool):
    for key, want in expected.items():
        if key in got and got[key] != want:
            msg = f"{name}: {key} = {got[key]}, published release has {want}"
            if strict:
                raise DatasetError(msg)
            log.warning(msg)


def _check_root(root: PathLike) -> Path:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    return root


def load_ichallenge(
    root: PathLike,
    eye_groups: Optional[Iterable[Sequence[str]]] = None,
    mask_dir: str = "Lesion_Masks",
    mask_foreground: str = "dark",
    min_lesion_pixels: int = 1,
    strict: bool = False,
) -> DatasetManifest:
    """Load iChallenge-AMD (see module docstring for the layout).

    With ``strict`` the published counts (400 images, 89 AMD, 118 annotated,
    61/38/19/13/17 per class) must match exactly; otherwise mismatches are
    logged.
    """
    root = _check_root(root)
    images = _find_images(root, exclude_dir=mask_dir)
    if not images:
        raise DatasetError(f"no images found under {root}")

    mask_files: Dict[str, Dict[str, Path]] = {c: {} for c in LESION_CLASSES}
    for class_dir in sorted(root.rglob("*")):
        if not class_dir.is_dir() or class_dir.parent.name.lower() != mask_dir.lower():
            continue
        cls = class_dir.name.lower()
        if cls not in mask_files:
            log.warning("ignoring unknown lesion mask folder %s", class_dir)
            continue
        for p in sorted(class_dir.iterdir()):
            if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
                mask_files[cls][p.stem] = p

    samples = []
    missing = []
    by_stem = {}
    for path in images:
        sid = _stem(path)
        if sid in by_stem:
            raise DatasetError(f"duplicate image id {sid}: {by_stem[sid]} and {path}")
        by_stem[sid] = path
        parents = [p.lower() for p in path.parts[:-1]]
        if "non-amd" in parents:
            diagnosis = 0
        elif "amd" in parents:
            diagnosis = 1
        elif sid[:1].upper() in ("A", "N"):
            diagnosis = int(sid[:1].upper() == "A")
        else:
            diagnosis = None
            missing.append(f"{path} (no diagnosis label)")

        class_masks = {c: mask_files[c].get(sid) for c in LESION_CLASSES}
        if any(m is not None for m in class_masks.values()):
            shape = _image_size(path)
            masks = {
                c: None if m is None else read_mask(m, mask_foreground)
                for c, m in class_masks.items()
            }
            try:
                lesions = derive_lesion_labels(masks, shape, min_lesion_pixels)
            except ValueError as exc:
                raise DatasetError(f"{sid}: {exc}") from exc
        else:
            lesions = None
        samples.append(Sample(sid, str(path.resolve()), diagnosis, lesions, sid))

    orphan_masks = sorted(
        str(p) for c in LESION_CLASSES for s, p in mask_files[c].items() if s not in by_stem
    )
    missing += [f"{p} (mask without image)" for p in orphan_masks]
    if missing:
        raise DatasetError("incomplete dataset:\n  " + "\n  ".join(missing))

    samples = assign_eye_groups(samples, eye_groups)
    manifest = DatasetManifest("ichallenge-amd", tuple(samples))
    annotated = [s for s in samples if s.lesions is not None]
    group_sizes: Dict[str, int] = {}
    for s in samples:
        group_sizes[s.eye_group_id] = group_sizes.get(s.eye_group_id, 0) + 1
    counts = {
        "samples": len(samples),
        "amd": sum(s.diagnosis == 1 for s in samples),
        "lesion_annotated": len(annotated),
        "per_class": tuple(
            sum(s.lesions[i] == 1 for s in annotated) for i in range(len(LESION_CLASSES))
        ),
    }
    _check_counts("iChallenge-AMD", counts, ICHALLENGE_COUNTS, strict)
    if eye_groups is not None:
        grouped = sum(group_sizes[s.eye_group_id] > 1 for s in samples)
        if grouped < ICHALLENGE_COUNTS["min_grouped"]:
            msg = (f"iChallenge-AMD: only {grouped} images share an eye group, "
                   f"at least {ICHALLENGE_COUNTS['min_grouped']} are known duplicates")
            if strict:
                raise DatasetError(msg)
            log.warning(msg)
    return manifest


def _load_aria(root: Path) -> List[Sample]:
    pattern = re.compile(r"aria_([acd])", re.IGNORECASE)
    samples = []
    for path in _find_images(root):
        tags = [m.group(1).lower() for part in path.parts for m in [pattern.search(part)] if m]
        if not tags:
            continue
        tag = tags[-1]
        if tag == "d":
            continue
        sid = _stem(path)
        samples.append(Sample(sid, str(path.resolve()), int(tag == "a"), None, sid))
    return samples


def _load_stare(root: Path, labels_name: str = "all-mg-codes.txt") -> List[Sample]:
    label_files = sorted(root.rglob(labels_name))
    if not label_files:
        raise DatasetError(f"STARE label file {labels_name} not found under {root}")
    diagnosis = {}
    with open(label_files[0], errors="replace") as fh:
        for line in fh:
            fields = [f.strip() for f in line.rstrip("\n").split("\t") if f.strip()]
            if len(fields) < 2:
                continue
            comment = fields[-1].lower()
            if "age related macular degeneration" in comment:
                diagnosis[fields[0]] = 1
            elif comment == "normal":
                diagnosis[fields[0]] = 0
    images = {_stem(p): p for p in _find_images(root)}
    absent = sorted(i for i in diagnosis if i not in images)
    if absent:
        raise DatasetError(f"STARE images listed but missing: {absent}")
    return [
        Sample(sid, str(images[sid].resolve()), diagnosis[sid], None, sid)
        for sid in sorted(diagnosis)
    ]


def load_evaluation_set(root: PathLike, dataset: str, strict: bool = False) -> DatasetManifest:
    """Load ARIA or STARE for external AMD validation (no lesion labels)."""
    dataset = dataset.lower()
    if dataset not in ("aria", "stare"):
        raise ValueError(f"unknown evaluation dataset {dataset!r}; expected 'aria' or 'stare'")
    root = _check_root(root)
    samples = _load_aria(root) if dataset == "aria" else _load_stare(root)
    if not samples:
        raise DatasetError(f"no {dataset.upper()} images found under {root}")
    expected = ARIA_COUNTS if dataset == "aria" else STARE_COUNTS
    counts = {"samples": len(samples), "amd": sum(s.diagnosis == 1 for s in samples)}
    _check_counts(dataset.upper(), counts, expected, strict)
    return DatasetManifest(dataset, tuple(samples))


# ---------------------------------------------------------------------------
# folds


def build_folds(manifest: DatasetManifest, k: int, repetitions: int, seed: int) -> FoldPlan:
    """Grouped, size-balanced random k-fold partitions, ``repetitions`` times.

    Groups are shuffled with a seeded generator, stably sorted largest first
    and each placed in the fold holding the fewest samples so far.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    groups: Dict[str, List[str]] = {}
    for s in manifest.samples:
        if not s.eye_group_id:
            raise ValueError(f"sample {s.sample_id} has no eye_group_id")
        groups.setdefault(s.eye_group_id, []).append(s.sample_id)
    if len(groups) < k:
        raise ValueError(f"{len(groups)} eye groups cannot fill {k} folds")

    rng = np.random.default_rng(seed)
    names = sorted(groups)
    reps = []
    for _ in range(repetitions):
        order = [names[i] for i in rng.permutation(len(names))]
        order.sort(key=lambda g: -len(groups[g]))
        folds: List[List[str]] = [[] for _ in range(k)]
        for g in order:
            target = min(range(k), key=lambda f: len(folds[f]))
            folds[target].extend(groups[g])
        reps.append(tuple(tuple(f) for f in folds))
    return FoldPlan(tuple(reps), seed)


def check_fold_plan(plan: FoldPlan, manifest: DatasetManifest) -> List[str]:
    """Violations of the partition and group constraints; empty when valid."""
    problems = []
    ids = {s.sample_id for s in manifest.samples}
    group_of = {s.sample_id: s.eye_group_id for s in manifest.samples}
    for r, folds in enumerate(plan.repetitions):
        flat = [i for fold in folds for i in fold]
        if len(flat) != len(set(flat)):
            problems.append(f"repetition {r}: folds overlap")
        if set(flat) != ids:
            problems.append(f"repetition {r}: folds do not cover the manifest")
        owner: Dict[str, int] = {}
        for f, fold in enumerate(folds):
            for i in fold:
                g = group_of.get(i)
                if g is not None and owner.setdefault(g, f) != f:
                    problems.append(f"repetition {r}: eye group {g} spans folds")
    return problems


# ---------------------------------------------------------------------------
# resizing


def resized_height(height: int, width: int, target_width: int) -> int:
    return max(MIN_IMAGE_SIZE, int(np.floor(height * target_width / width + 0.5)))


def resize_to_width(image: np.ndarray, target_width: int) -> np.ndarray:
    """Bilinear resize of an (H, W, 3) image to ``target_width``, keeping aspect ratio."""
    if target_width < MIN_IMAGE_SIZE:
        raise ValueError(f"target width must be at least {MIN_IMAGE_SIZE}")
    h, w = image.shape[:2]
    if w == target_width:
        return image
    new_h = resized_height(h, w, target_width)
    x = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))[None]
    y = F.interpolate(
        x, size=(new_h, target_width), mode="bilinear", align_corners=False,
        antialias=target_width < w,
    )
    return y[0].permute(1, 2, 0).clamp_(0, 1).numpy().astype(image.dtype, copy=False)


def validate_or_raise(manifest: DatasetManifest) -> DatasetManifest:
    problems = validate_manifest(manifest)
    if problems:
        raise DatasetError("invalid manifest:\n  " + "\n  ".join(problems))
    return manifest
