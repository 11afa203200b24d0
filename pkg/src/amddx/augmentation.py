"""Seeded online augmentation: color/intensity jitter, slight affine warp, flips."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Tuple

import numpy as np
import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class AugmentationConfig:
    """Sampling ranges for each transform; ``(lo, hi)`` pairs are drawn uniformly."""

    brightness_delta: Tuple[float, float] = (-0.1, 0.1)
    color_scale: Tuple[float, float] = (0.9, 1.1)
    scale_range: Tuple[float, float] = (0.95, 1.05)
    shear_degrees: Tuple[float, float] = (-5.0, 5.0)
    rotation_degrees: Tuple[float, float] = (-10.0, 10.0)
    flip_horizontal: float = 0.5
    flip_vertical: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, (tuple, list)):
                if len(value) != 2 or not all(math.isfinite(v) for v in value):
                    raise ValueError(f"{f.name} must be a finite (lo, hi) pair")
                if value[0] > value[1]:
                    raise ValueError(f"{f.name}: lo > hi")
                object.__setattr__(self, f.name, tuple(float(v) for v in value))
            elif not 0.0 <= value <= 1.0:
                raise ValueError(f"{f.name} probability must lie in [0, 1]")

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls((0.0, 0.0), (1.0, 1.0), (1.0, 1.0), (0.0, 0.0), (0.0, 0.0), 0.0, 0.0)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _affine_matrix(scale: float, shear_deg: float, rot_deg: float) -> np.ndarray:
    """Forward 2x2 transform in (row, col) coordinates."""
    theta = math.radians(rot_deg)
    shear = math.tan(math.radians(shear_deg))
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    sh = np.array([[1.0, 0.0], [shear, 1.0]])
    return rot @ sh * scale


def warp_about_center(image: np.ndarray, inverse: np.ndarray) -> np.ndarray:
    """Bilinear warp with zero fill; ``inverse`` maps output to input (row, col) offsets from the center."""
    h, w = image.shape[:2]
    (a, b), (c, d) = inverse
    # grid_sample works in normalized (x, y) = (col, row) coordinates.
    theta = torch.tensor([[[d, c * h / w, 0.0], [b * w / h, a, 0.0]]], dtype=torch.float32)
    x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    grid = F.affine_grid(theta, [1, 3, h, w], align_corners=False)
    y = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    return y[0].permute(1, 2, 0).clamp_(0.0, 1.0).numpy().astype(image.dtype, copy=False)


def augment(image: np.ndarray, config: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Randomly transform an (H, W, 3) image in [0, 1].

    Every random draw is made in a fixed order whatever the config, so the
    output depends only on ``(image, config, rng state)``.
    """
    brightness = rng.uniform(*config.brightness_delta)
    color = rng.uniform(config.color_scale[0], config.color_scale[1], size=3)
    scale = rng.uniform(*config.scale_range)
    shear = rng.uniform(*config.shear_degrees)
    rotation = rng.uniform(*config.rotation_degrees)
    flip_h = rng.random() < config.flip_horizontal
    flip_v = rng.random() < config.flip_vertical

    out = image
    if brightness != 0.0 or np.any(color != 1.0):
        out = np.clip(out * color.astype(out.dtype) + out.dtype.type(brightness), 0.0, 1.0)

    if scale != 1.0 or shear != 0.0 or rotation != 0.0:
        out = warp_about_center(out, np.linalg.inv(_affine_matrix(scale, shear, rotation)))

    if flip_h:
        out = out[:, ::-1]
    if flip_v:
        out = out[::-1]
    return np.ascontiguousarray(out)
