"""Shared domain types: samples, manifests, predictions and fold plans.

All types are plain frozen dataclasses. Validation returns a list of
human-readable violations instead of raising, so a whole manifest can be
audited in one pass.
"""

from __future__ import annotations

import gzip
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

LESION_CLASSES: Tuple[str, ...] = ("drusen", "exudate", "hemorrhage", "scar", "others")
N_LESIONS = len(LESION_CLASSES)

# Four 2x poolings in the full trunk.
MIN_IMAGE_SIZE = 32

PathLike = Union[str, Path]


@dataclass(frozen=True)
class Sample:
    """One retinography with its image-level labels.

    ``lesions`` is ``None`` when the image carries no lesion annotation at all;
    individual entries may also be ``None`` for classes that were not graded.
    """

    sample_id: str
    image_ref: str
    diagnosis: Optional[int]
    lesions: Optional[Tuple[Optional[int], ...]]
    eye_group_id: str

    @property
    def lesion_labels_known(self) -> bool:
        return self.lesions is not None

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "image_ref": self.image_ref,
            "diagnosis": self.diagnosis,
            "lesions": None if self.lesions is None else list(self.lesions),
            "eye_group_id": self.eye_group_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Sample":
        lesions = d.get("lesions")
        return cls(
            sample_id=d["sample_id"],
            image_ref=d["image_ref"],
            diagnosis=d.get("diagnosis"),
            lesions=None if lesions is None else tuple(lesions),
            eye_group_id=d.get("eye_group_id", ""),
        )


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    samples: Tuple[Sample, ...]
    class_order: Tuple[str, ...] = LESION_CLASSES
    # Directory that relative image_refs are resolved against.
    root: Optional[Path] = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.samples)

    def by_id(self) -> Dict[str, Sample]:
        return {s.sample_id: s for s in self.samples}

    def resolve(self, sample: Sample) -> Path:
        path = Path(sample.image_ref)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path

    def to_dict(self) -> dict:
        return {"name": self.name, "samples": [s.to_dict() for s in self.samples]}


@dataclass(frozen=True)
class PredictionRecord:
    """Model output for one image.

    ``probabilities[0]`` is the AMD diagnosis, ``probabilities[1:]`` follow
    ``LESION_CLASSES``. ``activation_maps`` has shape (N, h, w) when present.
    """

    sample_id: str
    probabilities: Tuple[float, ...]
    activation_maps: Optional[np.ndarray] = field(default=None, compare=False)
    repetition: Optional[int] = None

    def __post_init__(self):
        if len(self.probabilities) != N_LESIONS + 1:
            raise ValueError(
                f"{self.sample_id}: expected {N_LESIONS + 1} probabilities, "
                f"got {len(self.probabilities)}"
            )
        if not all(0.0 <= p <= 1.0 for p in self.probabilities):
            raise ValueError(f"{self.sample_id}: probabilities outside [0, 1]")

    def to_dict(self) -> dict:
        d = {"sample_id": self.sample_id, "probabilities": list(self.probabilities)}
        if self.repetition is not None:
            d["repetition"] = self.repetition
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PredictionRecord":
        return cls(
            sample_id=d["sample_id"],
            probabilities=tuple(float(p) for p in d["probabilities"]),
            repetition=d.get("repetition"),
        )


@dataclass(frozen=True)
class FoldPlan:
    """``repetitions[r][f]`` is the tuple of sample ids in fold ``f`` of repetition ``r``."""

    repetitions: Tuple[Tuple[Tuple[str, ...], ...], ...]
    seed: int

    @property
    def k(self) -> int:
        return len(self.repetitions[0]) if self.repetitions else 0

    def runs(self):
        """Yield ``(repetition, fold, train_ids, test_ids)`` for every train/test run."""
        for r, folds in enumerate(self.repetitions):
            for f, test_ids in enumerate(folds):
                train_ids = tuple(i for g, fold in enumerate(folds) if g != f for i in fold)
                yield r, f, train_ids, test_ids

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "repetitions": [[list(fold) for fold in rep] for rep in self.repetitions],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FoldPlan":
        reps = tuple(tuple(tuple(fold) for fold in rep) for rep in d["repetitions"])
        return cls(repetitions=reps, seed=int(d["seed"]))


def validate_manifest(manifest: DatasetManifest, check_files: bool = False) -> List[str]:
    """Return every broken invariant in ``manifest``; empty means valid."""
    violations = []
    if tuple(manifest.class_order) != LESION_CLASSES:
        violations.append(f"class order {list(manifest.class_order)} is not canonical")
    seen = set()
    for s in manifest.samples:
        sid = s.sample_id
        if not isinstance(sid, str) or not sid:
            violations.append(f"sample {sid!r}: sample_id must be a non-empty string")
        if sid in seen:
            violations.append(f"sample {sid}: duplicate sample_id")
        seen.add(sid)
        if s.diagnosis not in (0, 1, None):
            violations.append(f"sample {sid}: diagnosis {s.diagnosis!r} not in {{0, 1, null}}")
        if s.lesions is not None:
            if len(s.lesions) != N_LESIONS:
                violations.append(
                    f"sample {sid}: lesion vector length {len(s.lesions)} != {N_LESIONS}"
                )
            elif any(v not in (0, 1, None) for v in s.lesions):
                violations.append(f"sample {sid}: lesion values must be 0, 1 or null")
        if not s.eye_group_id:
            violations.append(f"sample {sid}: empty eye_group_id")
        if check_files and not manifest.resolve(s).is_file():
            violations.append(f"sample {sid}: image {manifest.resolve(s)} not found")
    return violations


def load_manifest(path: PathLike) -> DatasetManifest:
    path = Path(path)
    with open(path) as fh:
        data = json.load(fh)
    return manifest_from_dict(data, root=path.parent)


def manifest_from_dict(data: dict, root: Optional[Path] = None) -> DatasetManifest:
    return DatasetManifest(
        name=data["name"],
        samples=tuple(Sample.from_dict(d) for d in data["samples"]),
        root=root,
    )


def save_manifest(manifest: DatasetManifest, path: PathLike) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=1)
        fh.write("\n")


def load_fold_plan(path: PathLike) -> FoldPlan:
    with open(path) as fh:
        return FoldPlan.from_dict(json.load(fh))


def save_fold_plan(plan: FoldPlan, path: PathLike) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(plan.to_dict(), fh)
        fh.write("\n")


def load_predictions(path: PathLike) -> List[PredictionRecord]:
    with open(path) as fh:
        return [PredictionRecord.from_dict(d) for d in json.load(fh)]


def save_predictions(records: Sequence[PredictionRecord], path: PathLike) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump([r.to_dict() for r in records], fh)
        fh.write("\n")


def load_image(path: PathLike) -> np.ndarray:
    """Decode an 8-bit RGB file into an (H, W, 3) float32 array in [0, 1]."""
    path = Path(path)
    if path.name.lower().endswith(".gz"):
        with gzip.open(path) as fh, Image.open(io.BytesIO(fh.read())) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    else:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / np.float32(255.0)


def check_image(image: np.ndarray, min_size: int = MIN_IMAGE_SIZE) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    h, w = image.shape[:2]
    if h < min_size or w < min_size:
        raise ValueError(f"image {h}x{w} is smaller than the {min_size}px minimum")
    if not np.all(np.isfinite(image)) or image.min() < 0 or image.max() > 1:
        raise ValueError("image values must be finite and within [0, 1]")
