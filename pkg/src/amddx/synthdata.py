"""Deterministic fundus-like images with planted lesion blobs and known geometry.

Each image is a dark-red disc on black with colored circular blobs, one color
per lesion class. AMD is defined by a geometric rule: at least two drusen
blobs centered inside the central third of the image.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from amddx.datamodel import LESION_CLASSES, DatasetManifest, PathLike, Sample, save_manifest


@dataclass(frozen=True)
class LesionRecipe:
    """How blobs of one class look and how often they appear.

    ``presence`` is the per-image probability of the class (drusen in AMD
    images are forced by the diagnosis rule instead).
    """

    color: Tuple[float, float, float]
    radius_range: Tuple[int, int]
    count_range: Tuple[int, int] = (1, 3)
    presence: float = 0.5
    texture: str = "solid"


DEFAULT_RECIPES: Dict[str, LesionRecipe] = {
    "drusen": LesionRecipe((0.95, 0.85, 0.30), (8, 10), (1, 3), 0.5, "speckle"),
    "exudate": LesionRecipe((1.00, 1.00, 0.95), (8, 11), (1, 3), 0.5, "solid"),
    "hemorrhage": LesionRecipe((0.85, 0.10, 0.75), (8, 11), (1, 3), 0.5, "solid"),
    "scar": LesionRecipe((0.45, 0.65, 0.95), (9, 12), (1, 2), 0.5, "ring"),
    "others": LesionRecipe((0.30, 0.80, 0.35), (8, 10), (1, 3), 0.5, "speckle"),
}

FUNDUS_COLOR = (0.55, 0.20, 0.08)
MAX_LAYOUT_ATTEMPTS = 500


@dataclass(frozen=True)
class SynthConfig:
    n_samples: int
    image_size: int = 128
    seed: int = 0
    recipes: Dict[str, LesionRecipe] = field(default_factory=lambda: dict(DEFAULT_RECIPES))
    amd_fraction: float = 0.5
    # Share of non-AMD images holding exactly one blob (localization probes).
    single_lesion_fraction: float = 0.3
    noise: float = 0.02

    def __post_init__(self):
        if self.n_samples < 0:
            raise ValueError("n_samples must be non-negative")
        if self.image_size < 32:
            raise ValueError("image_size must be at least 32")
        if set(self.recipes) != set(LESION_CLASSES):
            raise ValueError(f"recipes must cover exactly {LESION_CLASSES}")
        colors = [tuple(r.color) for r in self.recipes.values()]
        if len(set(colors)) != len(colors):
            raise ValueError("lesion classes need distinct colors")
        if not 0.3 <= self.amd_fraction <= 0.7:
            raise ValueError("amd_fraction must lie in [0.3, 0.7]")


@dataclass(frozen=True)
class Blob:
    cls: str
    row: float
    col: float
    radius: float

    def bbox(self, size: int) -> Tuple[int, int, int, int]:
        """Inclusive ``[x_min, y_min, x_max, y_max]`` of the drawn pixels."""
        r = self.radius
        y0 = max(0, int(np.ceil(self.row - r)))
        y1 = min(size - 1, int(np.floor(self.row + r)))
        x0 = max(0, int(np.ceil(self.col - r)))
        x1 = min(size - 1, int(np.floor(self.col + r)))
        return x0, y0, x1, y1


@dataclass
class SynthDataset:
    manifest: DatasetManifest
    geometry: List[dict]
    images: Dict[str, np.ndarray]

    def blobs_of(self, sample_id: str) -> List[dict]:
        return [g for g in self.geometry if g["sample_id"] == sample_id]


def in_central_third(row: float, col: float, size: int) -> bool:
    lo, hi = size / 3.0, 2.0 * size / 3.0
    return lo <= row < hi and lo <= col < hi


def diagnosis_rule(blobs: List[Blob], size: int) -> int:
    central = sum(b.cls == "drusen" and in_central_third(b.row, b.col, size) for b in blobs)
    return int(central >= 2)


def _place(rng, blobs, cls, radius, size, region, attempts=200) -> Optional[Blob]:
    """Random non-overlapping position inside the fundus disc and ``region``."""
    c = (size - 1) / 2.0
    disc = 0.46 * size
    lo, hi = size / 3.0, 2.0 * size / 3.0
    for _ in range(attempts):
        if region == "central":
            row, col = rng.uniform(lo, hi), rng.uniform(lo, hi)
        else:
            row, col = rng.uniform(0, size), rng.uniform(0, size)
            if region == "outer" and in_central_third(row, col, size):
                continue
        if np.hypot(row - c, col - c) > disc - radius - 2:
            continue
        if any(np.hypot(row - b.row, col - b.col) < radius + b.radius + 3 for b in blobs):
            continue
        return Blob(cls, row, col, radius)
    return None


def _draw_layout(rng, cfg: SynthConfig, amd: int) -> Optional[List[Blob]]:
    size = cfg.image_size
    blobs: List[Blob] = []

    def add(cls, region):
        r = rng.uniform(*cfg.recipes[cls].radius_range)
        b = _place(rng, blobs, cls, r, size, region)
        if b is None:
            return False
        blobs.append(b)
        return True

    if not amd and rng.random() < cfg.single_lesion_fraction:
        cls = LESION_CLASSES[rng.integers(len(LESION_CLASSES))]
        return blobs if add(cls, "any") else None

    for cls in LESION_CLASSES:
        recipe = cfg.recipes[cls]
        if cls == "drusen":
            if amd:
                central, outer = rng.integers(2, 4), rng.integers(0, 2)
            elif rng.random() < recipe.presence:
                central, outer = rng.integers(0, 2), rng.integers(1, 3)
            else:
                central, outer = 0, 0
            ok = all(add(cls, "central") for _ in range(central))
            ok = ok and all(add(cls, "outer") for _ in range(outer))
        else:
            n = rng.integers(recipe.count_range[0], recipe.count_range[1] + 1)
            present = rng.random() < recipe.presence
            ok = all(add(cls, "any") for _ in range(n if present else 0))
        if not ok:
            return None
    return blobs


def _render(rng, cfg: SynthConfig, blobs: List[Blob]) -> np.ndarray:
    size = cfg.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    dist = np.hypot(yy - c, xx - c) / (0.46 * size)
    fundus = np.clip((1.0 - dist) * 4.0, 0.0, 1.0)
    shade = 1.0 - 0.35 * dist**2
    texture = ndimage.gaussian_filter(rng.normal(0, 1, (size, size)), 3.0)
    texture = 1.0 + 0.25 * texture / (np.abs(texture).max() + 1e-12)
    img = np.stack([FUNDUS_COLOR[k] * shade * texture for k in range(3)], -1) * fundus[..., None]

    for b in blobs:
        recipe = cfg.recipes[b.cls]
        d = np.hypot(yy - b.row, xx - b.col)
        cover = np.clip(b.radius + 0.5 - d, 0.0, 1.0)
        color = np.broadcast_to(np.asarray(recipe.color, dtype=np.float64), img.shape).copy()
        if recipe.texture == "speckle":
            color *= (1.0 + 0.15 * rng.normal(0, 1, (size, size)))[..., None]
        elif recipe.texture == "ring":
            color *= (0.6 + 0.4 * np.clip(d / b.radius, 0, 1))[..., None]
        img = img * (1 - cover[..., None]) + color * cover[..., None]

    img += rng.normal(0, cfg.noise, img.shape) * fundus[..., None]
    return np.clip(img, 0.0, 1.0)


def generate(config: SynthConfig, out_dir: Optional[PathLike] = None) -> SynthDataset:
    """Build the dataset; with ``out_dir`` also write images, manifest and geometry.

    Every sample draws from its own seed stream, so sample ``i`` does not
    depend on how many samples precede it.
    """
    n = config.n_samples
    master = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    n_amd = int(round(n * config.amd_fraction))
    targets = master.permutation(np.r_[np.ones(n_amd, int), np.zeros(n - n_amd, int)])

    samples, geometry, images = [], [], {}
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1, i]))
        for _ in range(MAX_LAYOUT_ATTEMPTS):
            blobs = _draw_layout(rng, config, int(targets[i]))
            if blobs is not None and diagnosis_rule(blobs, config.image_size) == targets[i]:
                break
        else:
            raise ValueError(
                f"could not place the blobs of sample {i} in a {config.image_size}px image; "
                "use a larger image_size or smaller radii"
            )
        sid = f"synth_{i:04d}"
        arr = _render(rng, config, blobs)
        images[sid] = (np.round(arr * 255).astype(np.uint8).astype(np.float32)) / np.float32(255)
        present = {b.cls for b in blobs}
        lesions = tuple(int(c in present) for c in LESION_CLASSES)
        samples.append(Sample(sid, f"images/{sid}.png", int(targets[i]), lesions, sid))
        for b in blobs:
            geometry.append({"sample_id": sid, "class": b.cls, "bbox": list(b.bbox(config.image_size))})

    root = None if out_dir is None else Path(out_dir)
    manifest = DatasetManifest("synthetic", tuple(samples), root=root)
    if root is not None:
        (root / "images").mkdir(parents=True, exist_ok=True)
        for sid, arr in images.items():
            Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(root / "images" / f"{sid}.png")
        save_manifest(manifest, root / "manifest.json")
        with open(root / "geometry.json", "w") as fh:
            json.dump(geometry, fh, indent=1)
            fh.write("\n")
    return SynthDataset(manifest, geometry, images)


def memory_loader(dataset: SynthDataset):
    """Image loader serving the in-memory arrays (identical to decoding the PNGs)."""
    return lambda sample: dataset.images[sample.sample_id]
