"""Truncated VGG-style trunk with a lesion-map head and N+1 sigmoid detectors.

Forward path for an (H, W, 3) image::

    trunk: blocks of 3x3 conv + ReLU, 2x2 max pool between blocks (none after the last)
    head:  1x1 conv to N channels + ReLU          -> activation maps (N, h, w)
           adaptive max pool to 31x31, flatten    -> N * 31 * 31 features
           fully connected + sigmoid              -> [AMD, lesion_1 .. lesion_N]
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from amddx.datamodel import N_LESIONS, PathLike, PredictionRecord

FULL_BLOCKS = ((64, 64), (128, 128), (256, 256), (512, 512), (512, 512))
DESK_BLOCKS = ((8, 8), (16, 16), (32, 32), (32, 32), (32, 32))
PRESETS = {"full": FULL_BLOCKS, "desk": DESK_BLOCKS}

Array = Union[np.ndarray, torch.Tensor]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    The presets have five blocks (four poolings, downsampling 16). Smaller block
    counts are accepted for tests; downsampling is then ``2 ** (blocks - 1)``.
    """

    block_channels: Tuple[Tuple[int, ...], ...] = DESK_BLOCKS
    n_lesions: int = N_LESIONS
    pool_output: int = 31
    in_channels: int = 3

    def __post_init__(self):
        blocks = tuple(tuple(int(c) for c in b) for b in self.block_channels)
        object.__setattr__(self, "block_channels", blocks)
        if not blocks or any(not b for b in blocks):
            raise ValueError("need at least one block with at least one convolution")
        if any(c < 1 for b in blocks for c in b):
            raise ValueError("channel counts must be positive")
        if self.n_lesions < 1 or self.pool_output < 1:
            raise ValueError("n_lesions and pool_output must be positive")

    @classmethod
    def preset(cls, name: str, **kw) -> "ModelConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(block_channels=PRESETS[name], **kw)

    @property
    def downsampling(self) -> int:
        return 2 ** (len(self.block_channels) - 1)

    @property
    def min_input_size(self) -> int:
        return 2 * self.downsampling

    @property
    def trunk_channels(self) -> int:
        return self.block_channels[-1][-1]

    def feature_size(self, height: int, width: int) -> Tuple[int, int]:
        for _ in range(len(self.block_channels) - 1):
            height, width = height // 2, width // 2
        return height, width

    def layer_shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Weight and bias shapes keyed by archive name, in forward order."""
        shapes = {}
        cin = self.in_channels
        for b, block in enumerate(self.block_channels, start=1):
            for c, cout in enumerate(block, start=1):
                shapes[f"conv{b}_{c}/weight"] = (cout, cin, 3, 3)
                shapes[f"conv{b}_{c}/bias"] = (cout,)
                cin = cout
        shapes["head/weight"] = (self.n_lesions, cin, 1, 1)
        shapes["head/bias"] = (self.n_lesions,)
        n_in = self.n_lesions * self.pool_output ** 2
        shapes["fc/weight"] = (self.n_lesions + 1, n_in)
        shapes["fc/bias"] = (self.n_lesions + 1,)
        return shapes

    def trunk_layers(self) -> List[str]:
        return [
            f"conv{b}_{c}"
            for b, block in enumerate(self.block_channels, start=1)
            for c in range(1, len(block) + 1)
        ]

    def to_dict(self) -> dict:
        return {
            "block_channels": [list(b) for b in self.block_channels],
            "n_lesions": self.n_lesions,
            "pool_output": self.pool_output,
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "preset" in d:
            return cls.preset(d.pop("preset"), **d)
        return cls(**d)


@dataclass
class ModelParams:
    """All learnable tensors plus optional input normalization constants."""

    config: ModelConfig
    tensors: Dict[str, torch.Tensor]
    mean: Optional[torch.Tensor] = None
    std: Optional[torch.Tensor] = None

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.tensors.values())).dtype

    def replace(self, tensors: Dict[str, torch.Tensor]) -> "ModelParams":
        return ModelParams(self.config, tensors, self.mean, self.std)

    def to(self, dtype: torch.dtype) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: v.to(dtype) for k, v in self.tensors.items()},
            None if self.mean is None else self.mean.to(dtype),
            None if self.std is None else self.std.to(dtype),
        )

    def n_parameters(self) -> int:
        return sum(t.numel() for t in self.tensors.values())


# ---------------------------------------------------------------------------
# initialization and serialization


def _he_uniform(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(
    config: ModelConfig,
    seed: int,
    pretrained_trunk_path: Optional[PathLike] = None,
    dtype: torch.dtype = torch.float32,
) -> ModelParams:
    """He-uniform weights and zero biases, or a pretrained trunk plus a fresh head.

    Trunk and head draw from independent streams of ``seed``, so the head is
    identical whether or not the trunk is loaded from file.
    """
    trunk_rng, head_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    shapes = config.layer_shapes()
    arrays: Dict[str, np.ndarray] = {}
    for name, shape in shapes.items():
        rng = head_rng if name.startswith(("head/", "fc/")) else trunk_rng
        arrays[name] = np.zeros(shape) if name.endswith("/bias") else _he_uniform(rng, shape)
    tensors = {k: torch.from_numpy(v).to(dtype) for k, v in arrays.items()}
    params = ModelParams(config, tensors)

    if pretrained_trunk_path is not None:
        pre = load_params_archive(pretrained_trunk_path)
        bad = []
        for layer in config.trunk_layers():
            for part in ("weight", "bias"):
                name = f"{layer}/{part}"
                got = pre["tensors"].get(name)
                if got is None:
                    bad.append(f"{name}: missing")
                elif tuple(got.shape) != shapes[name]:
                    bad.append(f"{name}: file {tuple(got.shape)} != model {shapes[name]}")
        if bad:
            raise ValueError("pretrained trunk does not fit the model:\n  " + "\n  ".join(bad))
        for layer in config.trunk_layers():
            for part in ("weight", "bias"):
                name = f"{layer}/{part}"
                tensors[name] = pre["tensors"][name].to(dtype)
        if pre["mean"] is not None:
            params.mean = pre["mean"].to(dtype)
            params.std = pre["std"].to(dtype)
    return params


def load_params_archive(path: PathLike) -> dict:
    with open(path, "rb") as fh:
        data = np.load(fh, allow_pickle=False)
        files = {k: data[k] for k in data.files}
    config = json.loads(str(files.pop("__config__"))) if "__config__" in files else None
    mean = files.pop("normalization/mean", None)
    std = files.pop("normalization/std", None)
    return {
        "config": config,
        "tensors": {k: torch.from_numpy(v.copy()) for k, v in files.items()},
        "mean": None if mean is None else torch.from_numpy(mean.copy()),
        "std": None if std is None else torch.from_numpy(std.copy()),
    }


def save_params(params: ModelParams, path: PathLike, layers: Optional[Sequence[str]] = None) -> None:
    """Write a flat ``layer/weight``, ``layer/bias`` archive with the config embedded."""
    arrays = {
        k: v.detach().cpu().numpy()
        for k, v in params.tensors.items()
        if layers is None or k.split("/")[0] in layers
    }
    arrays["__config__"] = np.array(json.dumps(params.config.to_dict()))
    if params.mean is not None:
        arrays["normalization/mean"] = params.mean.numpy()
        arrays["normalization/std"] = params.std.numpy()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path: PathLike) -> ModelParams:
    data = load_params_archive(path)
    if data["config"] is None:
        raise ValueError(f"{path} has no embedded model config")
    config = ModelConfig.from_dict(data["config"])
    expected = config.layer_shapes()
    if set(data["tensors"]) != set(expected):
        raise ValueError(f"{path}: layers do not match the embedded config")
    return ModelParams(config, data["tensors"], data["mean"], data["std"])


def convert_vgg13_state_dict(
    state_dict: Dict[str, Array], mean: Sequence[float], std: Sequence[float]
) -> ModelParams:
    """Map torchvision ``vgg13().features`` weights onto the full-preset trunk names."""
    config = ModelConfig.preset("full")
    conv_indices = [0, 2, 5, 7, 10, 12, 15, 17, 20, 22]
    tensors = {}
    for layer, idx in zip(config.trunk_layers(), conv_indices):
        for part in ("weight", "bias"):
            tensors[f"{layer}/{part}"] = torch.as_tensor(state_dict[f"features.{idx}.{part}"])
    return ModelParams(
        config, tensors, torch.tensor(mean, dtype=torch.float32), torch.tensor(std, dtype=torch.float32)
    )


# ---------------------------------------------------------------------------
# adaptive max pooling


def pool_windows(size: int, out: int) -> List[Tuple[int, int]]:
    """Half-open ``[floor(i*size/out), ceil((i+1)*size/out))`` windows."""
    return [((i * size) // out, -((-(i + 1) * size) // out)) for i in range(out)]


@lru_cache(maxsize=256)
def _window_index(size: int, out: int) -> torch.Tensor:
    windows = pool_windows(size, out)
    width = max(end - start for start, end in windows)
    # Short windows repeat their last index; duplicates do not change a max.
    idx = [[min(start + j, end - 1) for j in range(width)] for start, end in windows]
    return torch.tensor(idx, dtype=torch.long)


def adaptive_max_pool(x: Array, out: int) -> Array:
    """Max over adaptive windows so the last two dims become ``out x out``.

    Accepts a numpy array or a torch tensor of shape (..., h, w); torch inputs
    stay differentiable.
    """
    if out < 1:
        raise ValueError("output size must be at least 1")
    as_numpy = isinstance(x, np.ndarray)
    t = torch.from_numpy(x) if as_numpy else x
    h, w = t.shape[-2:]
    if h < 1 or w < 1:
        raise ValueError("input must be at least 1x1")
    rows = _window_index(h, out)
    cols = _window_index(w, out)
    # Rows: (..., h, w) -> (..., out, kh, w) -> (..., out, w)
    t = t.index_select(-2, rows.reshape(-1)).unflatten(-2, rows.shape).amax(-2)
    t = t.index_select(-1, cols.reshape(-1)).unflatten(-1, cols.shape).amax(-1)
    return t.numpy() if as_numpy else t


# ---------------------------------------------------------------------------
# forward pass


def to_batch(images: Union[np.ndarray, Sequence[np.ndarray]], dtype: torch.dtype) -> torch.Tensor:
    """Stack (H, W, 3) images into a (B, 3, H, W) tensor."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = images[None]
    arr = np.ascontiguousarray(np.stack(list(images)).transpose(0, 3, 1, 2))
    return torch.from_numpy(arr).to(dtype)


def _trunk(params: ModelParams, x: torch.Tensor) -> torch.Tensor:
    cfg = params.config
    if x.shape[-1] < cfg.min_input_size or x.shape[-2] < cfg.min_input_size:
        raise ValueError(
            f"input {tuple(x.shape[-2:])} is smaller than the {cfg.min_input_size}px minimum"
        )
    if params.mean is not None:
        x = (x - params.mean.view(1, -1, 1, 1)) / params.std.view(1, -1, 1, 1)
    x = x.contiguous(memory_format=torch.channels_last)
    n_blocks = len(cfg.block_channels)
    t = params.tensors
    for b, block in enumerate(cfg.block_channels, start=1):
        for c in range(1, len(block) + 1):
            x = F.relu(F.conv2d(x, t[f"conv{b}_{c}/weight"], t[f"conv{b}_{c}/bias"], padding=1))
        if b < n_blocks:
            x = F.max_pool2d(x, 2)
    return x


def _head(params: ModelParams, features: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    t = params.tensors
    maps = F.relu(F.conv2d(features, t["head/weight"], t["head/bias"]))
    pooled = adaptive_max_pool(maps, params.config.pool_output)
    return maps, pooled


def forward(params: ModelParams, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Batched forward pass: (B, 3, H, W) -> (probabilities (B, N+1), maps (B, N, h, w))."""
    maps, pooled = _head(params, _trunk(params, x))
    logits = F.linear(pooled.flatten(1), params.tensors["fc/weight"], params.tensors["fc/bias"])
    return torch.sigmoid(logits), maps


def trunk_forward(params: ModelParams, image: np.ndarray) -> np.ndarray:
    """Trunk feature maps (C, h, w) for one (H, W, 3) image."""
    with torch.no_grad():
        return _trunk(params, to_batch(image, params.dtype))[0].contiguous().numpy()


def head_forward(params: ModelParams, features: Array) -> Tuple[np.ndarray, np.ndarray]:
    """Activation maps (N, h, w) and their pooled version (N, 31, 31) from trunk features."""
    f = torch.as_tensor(features).to(params.dtype)
    if f.ndim != 3 or f.shape[0] != params.config.trunk_channels:
        raise ValueError(
            f"features must be ({params.config.trunk_channels}, h, w), got {tuple(f.shape)}"
        )
    with torch.no_grad():
        maps, pooled = _head(params, f[None])
    return maps[0].contiguous().numpy(), pooled[0].contiguous().numpy()


def classify(params: ModelParams, image: np.ndarray, sample_id: str = "") -> PredictionRecord:
    """Probabilities ``[AMD, lesions...]`` and activation maps for one image."""
    with torch.no_grad():
        probs, maps = forward(params, to_batch(image, params.dtype))
    return PredictionRecord(
        sample_id=sample_id,
        probabilities=tuple(float(p) for p in probs[0]),
        activation_maps=maps[0].contiguous().numpy(),
    )
