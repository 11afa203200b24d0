"""Multi-task loss, gradients, Adam, per-fold training and repeated cross-validation."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from amddx.augmentation import AugmentationConfig, augment
from amddx.datamodel import (
    N_LESIONS,
    DatasetManifest,
    FoldPlan,
    PathLike,
    PredictionRecord,
    Sample,
    load_image,
)
from amddx.ingestion import resize_to_width
from amddx.model import ModelConfig, ModelParams, classify, forward, init_params, save_params, to_batch

log = logging.getLogger(__name__)

ImageLoader = Callable[[Sample], np.ndarray]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    n_lesions: int = N_LESIONS
    epsilon_clamp: float = 1e-7
    unlabeled_lesion_policy: str = "mask"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 0 < self.epsilon_clamp < 0.5:
            raise ValueError("epsilon_clamp must lie in (0, 0.5)")
        if self.unlabeled_lesion_policy not in ("mask", "negative"):
            raise ValueError("unlabeled_lesion_policy must be 'mask' or 'negative'")

    @classmethod
    def amd_only(cls, **kw) -> "LossConfig":
        return cls(alpha=0.0, **kw)


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 200

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass(frozen=True)
class TrainingConfig:
    """Loop settings that are not optimizer hyperparameters.

    ``batch_size`` above 1 requires equally sized images. ``resize_width``
    rescales every image (after augmentation) to that width.
    ``pretrained_trunk`` points at a parameter archive whose conv layers
    replace the random trunk initialization.
    """

    batch_size: int = 1
    resize_width: Optional[int] = None
    seed: int = 0
    dtype: str = "float32"
    debug: bool = False
    pretrained_trunk: Optional[str] = None

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig.preset("desk"))
    loss: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "loss": asdict(self.loss),
            "optimizer": asdict(self.optimizer),
            "augmentation": self.augmentation.to_dict(),
            "training": asdict(self.training),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            model=ModelConfig.from_dict(d.get("model", {"preset": "desk"})),
            loss=LossConfig(**d.get("loss", {})),
            optimizer=OptimizerConfig(**d.get("optimizer", {})),
            augmentation=AugmentationConfig.from_dict(d.get("augmentation", {})),
            training=TrainingConfig(**d.get("training", {})),
        )


@dataclass
class TrainingHistory:
    total: List[float] = field(default_factory=list)
    diagnosis: List[float] = field(default_factory=list)
    lesion: List[float] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)
    steps: int = 0

    def __len__(self) -> int:
        return len(self.total)

    def write_csv(self, path: PathLike) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "total", "diagnosis", "lesion", "seconds"])
            for e, row in enumerate(zip(self.total, self.diagnosis, self.lesion, self.seconds), 1):
                writer.writerow([e, *(repr(v) for v in row)])


# ---------------------------------------------------------------------------
# loss


def bce(p: float, y: int, eps: float = 1e-7) -> float:
    """Binary cross-entropy of probability ``p`` against label ``y``, with ``p`` clamped."""
    p = min(max(p, eps), 1.0 - eps)
    return -(y * math.log(p) + (1 - y) * math.log(1.0 - p))


def bce_tensor(p: torch.Tensor, y: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    p = p.clamp(eps, 1.0 - eps)
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p))


def lesion_targets(sample: Sample, cfg: LossConfig) -> Tuple[List[float], List[float]]:
    """(targets, weights) for the N lesion outputs; weight 0 drops a term."""
    n = cfg.n_lesions
    if sample.lesions is None:
        if cfg.unlabeled_lesion_policy == "negative":
            return [0.0] * n, [1.0] * n
        return [0.0] * n, [0.0] * n
    targets = [0.0 if v is None else float(v) for v in sample.lesions]
    weights = [0.0 if v is None else 1.0 for v in sample.lesions]
    return targets, weights


def total_loss(
    prediction: PredictionRecord, sample: Sample, cfg: LossConfig
) -> Tuple[float, float, float]:
    """(total, diagnosis part, lesion part) for one prediction."""
    if sample.diagnosis is None:
        raise ValueError(f"sample {sample.sample_id} has no diagnosis label")
    probs = prediction.probabilities
    diagnosis = bce(probs[0], sample.diagnosis, cfg.epsilon_clamp)
    targets, weights = lesion_targets(sample, cfg)
    lesion = sum(
        w * bce(p, y, cfg.epsilon_clamp) for p, y, w in zip(probs[1:], targets, weights) if w
    ) / cfg.n_lesions
    return diagnosis + cfg.alpha * lesion, diagnosis, lesion


def batch_loss(
    probs: torch.Tensor, samples: Sequence[Sample], cfg: LossConfig
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-sample (total, diagnosis, lesion) loss tensors of shape (B,)."""
    if any(s.diagnosis is None for s in samples):
        missing = [s.sample_id for s in samples if s.diagnosis is None]
        raise ValueError(f"samples without diagnosis label: {missing}")
    d = torch.tensor([float(s.diagnosis) for s in samples], dtype=probs.dtype)
    tw = [lesion_targets(s, cfg) for s in samples]
    y = torch.tensor([t for t, _ in tw], dtype=probs.dtype)
    w = torch.tensor([w for _, w in tw], dtype=probs.dtype)
    diagnosis = bce_tensor(probs[:, 0], d, cfg.epsilon_clamp)
    lesion = (w * bce_tensor(probs[:, 1:], y, cfg.epsilon_clamp)).sum(1) / cfg.n_lesions
    if cfg.alpha == 0:
        # AMD-only: lesion outputs are reported but never reach the gradient.
        lesion = lesion.detach()
        return diagnosis, diagnosis, lesion
    return diagnosis + cfg.alpha * lesion, diagnosis, lesion


# ---------------------------------------------------------------------------
# gradients and optimizer


def _leaf_params(params: ModelParams) -> ModelParams:
    return params.replace({k: v.detach().requires_grad_(True) for k, v in params.tensors.items()})


def _gradients(
    params: ModelParams, x: torch.Tensor, samples: Sequence[Sample], cfg: LossConfig
) -> Tuple[Dict[str, torch.Tensor], torch.Tensor, torch.Tensor, torch.Tensor]:
    leaf = _leaf_params(params)
    probs, _ = forward(leaf, x)
    total, diagnosis, lesion = batch_loss(probs, samples, cfg)
    if not torch.isfinite(total).all():
        raise FloatingPointError(f"non-finite loss for {[s.sample_id for s in samples]}")
    names = list(leaf.tensors)
    grads = torch.autograd.grad(total.mean(), [leaf.tensors[k] for k in names], allow_unused=True)
    out = {}
    for k, g in zip(names, grads):
        g = torch.zeros_like(leaf.tensors[k]) if g is None else g
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in layer {k}")
        out[k] = g
    return out, total.detach(), diagnosis.detach(), lesion.detach()


def loss_gradients(
    params: ModelParams, image: np.ndarray, sample: Sample, loss_cfg: LossConfig
) -> Dict[str, torch.Tensor]:
    """Exact gradient of the total loss for one image, keyed like ``params.tensors``."""
    grads, *_ = _gradients(params, to_batch(image, params.dtype), [sample], loss_cfg)
    return grads


@dataclass
class AdamState:
    m: Dict[str, torch.Tensor]
    v: Dict[str, torch.Tensor]

    @classmethod
    def zeros_like(cls, tensors: Dict[str, torch.Tensor]) -> "AdamState":
        return cls(
            {k: torch.zeros_like(t) for k, t in tensors.items()},
            {k: torch.zeros_like(t) for k, t in tensors.items()},
        )


def adam_step(
    params: Dict[str, torch.Tensor],
    grads: Dict[str, torch.Tensor],
    state: AdamState,
    cfg: OptimizerConfig,
    t: int,
) -> Tuple[Dict[str, torch.Tensor], AdamState]:
    """One bias-corrected Adam update with a constant learning rate (``t`` counts from 1)."""
    if t < 1:
        raise ValueError("step index t starts at 1")
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params, new_m, new_v = {}, {}, {}
    with torch.no_grad():
        for k, p in params.items():
            g = grads[k]
            m = b1 * state.m[k] + (1.0 - b1) * g
            v = b2 * state.v[k] + (1.0 - b2) * g * g
            step = (m / c1) / ((v / c2).sqrt() + cfg.epsilon)
            new_params[k] = p - cfg.learning_rate * step
            new_m[k], new_v[k] = m, v
    return new_params, AdamState(new_m, new_v)


# ---------------------------------------------------------------------------
# training loop


def default_loader(manifest: DatasetManifest, cache: bool = True) -> ImageLoader:
    images: Dict[str, np.ndarray] = {}

    def load(sample: Sample) -> np.ndarray:
        if sample.sample_id in images:
            return images[sample.sample_id]
        img = load_image(manifest.resolve(sample))
        if cache:
            images[sample.sample_id] = img
        return img

    return load


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def train_fold(
    train_samples: Sequence[Sample],
    model_cfg: ModelConfig,
    loss_cfg: LossConfig,
    opt_cfg: OptimizerConfig,
    aug_cfg: AugmentationConfig,
    seed: int,
    load: ImageLoader,
    train_cfg: TrainingConfig = TrainingConfig(),
    init: Optional[ModelParams] = None,
) -> Tuple[ModelParams, TrainingHistory]:
    """Train one model from scratch (or from ``init``) on ``train_samples``.

    Each epoch shuffles the samples, then for every mini-batch runs
    augment -> resize -> forward -> loss -> gradient -> Adam.
    """
    if not train_samples:
        raise ValueError("no training samples")
    missing = [s.sample_id for s in train_samples if s.diagnosis is None]
    if missing:
        raise ValueError(f"training samples without diagnosis: {missing[:5]}")
    dtype = train_cfg.torch_dtype
    if init is not None:
        params = init.to(dtype)
    else:
        params = init_params(model_cfg, seed, train_cfg.pretrained_trunk, dtype=dtype)
    order_rng = _stream(seed, 1)
    aug_rng = _stream(seed, 2)
    state = AdamState.zeros_like(params.tensors)
    history = TrainingHistory()
    bs = max(1, train_cfg.batch_size)
    t = 0
    for epoch in range(1, opt_cfg.epochs + 1):
        start = time.perf_counter()
        order = order_rng.permutation(len(train_samples))
        sums = np.zeros(3)
        for i in range(0, len(order), bs):
            batch = [train_samples[j] for j in order[i : i + bs]]
            images = []
            for s in batch:
                img = augment(load(s), aug_cfg, aug_rng)
                if train_cfg.resize_width:
                    img = resize_to_width(img, train_cfg.resize_width)
                images.append(img)
            if len({im.shape for im in images}) > 1:
                raise TrainingError("a mini-batch mixes image sizes; use batch_size 1")
            try:
                grads, total, diag, lesion = _gradients(params, to_batch(images, dtype), batch, loss_cfg)
            except FloatingPointError as exc:
                raise TrainingError(
                    f"epoch {epoch}, samples {[s.sample_id for s in batch]}: {exc}"
                ) from exc
            if train_cfg.debug:
                recomposed = diag + loss_cfg.alpha * lesion
                if not torch.allclose(total, recomposed, rtol=0, atol=1e-12 if dtype == torch.float64 else 1e-6):
                    raise TrainingError(f"loss decomposition broken at epoch {epoch}")
            t += 1
            new_tensors, state = adam_step(params.tensors, grads, state, opt_cfg, t)
            params = params.replace(new_tensors)
            sums += [total.sum().item(), diag.sum().item(), lesion.sum().item()]
        n = len(train_samples)
        history.total.append(float(sums[0] / n))
        history.diagnosis.append(float(sums[1] / n))
        history.lesion.append(float(sums[2] / n))
        history.seconds.append(time.perf_counter() - start)
        log.debug("epoch %d: loss %.5f", epoch, history.total[-1])
    history.steps = t
    return params, history


def predict(
    params: ModelParams, samples: Sequence[Sample], load: ImageLoader,
    resize_width: Optional[int] = None, repetition: Optional[int] = None,
) -> List[PredictionRecord]:
    out = []
    for s in samples:
        img = load(s)
        if resize_width:
            img = resize_to_width(img, resize_width)
        rec = classify(params, img, s.sample_id)
        out.append(PredictionRecord(s.sample_id, rec.probabilities, rec.activation_maps, repetition))
    return out


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldResult:
    repetition: int
    fold: int
    params: ModelParams
    history: TrainingHistory
    predictions: List[PredictionRecord]


@dataclass
class CVResult:
    folds: List[FoldResult]

    @property
    def predictions(self) -> List[PredictionRecord]:
        return [p for f in self.folds for p in f.predictions]


def fold_seed(base: int, repetition: int, fold: int) -> int:
    return int(np.random.SeedSequence([base, repetition, fold]).generate_state(1)[0])


def _run_fold(
    manifest: DatasetManifest, cfg: ExperimentConfig, r: int, f: int,
    train_ids: Sequence[str], test_ids: Sequence[str], threads: Optional[int] = None,
) -> FoldResult:
    if threads:
        torch.set_num_threads(threads)
    by_id = manifest.by_id()
    load = default_loader(manifest)
    train = [by_id[i] for i in train_ids]
    test = [by_id[i] for i in test_ids]
    seed = fold_seed(cfg.training.seed, r, f)
    log.info("repetition %d fold %d: training on %d samples", r, f, len(train))
    try:
        params, history = train_fold(
            train, cfg.model, cfg.loss, cfg.optimizer, cfg.augmentation, seed, load, cfg.training
        )
    except (TrainingError, ValueError) as exc:
        raise TrainingError(f"repetition {r}, fold {f}: {exc}") from exc
    preds = predict(params, test, load, cfg.training.resize_width, repetition=r)
    return FoldResult(r, f, params, history, preds)


def run_cross_validation(
    manifest: DatasetManifest,
    plan: FoldPlan,
    cfg: ExperimentConfig,
    out_dir: Optional[PathLike] = None,
    jobs: int = 1,
    threads: Optional[int] = 1,
) -> CVResult:
    """Train on each fold's complement and predict the fold, for every repetition.

    With ``jobs > 1`` folds run in worker processes. Every run uses ``threads``
    torch threads, so parallel and sequential execution give identical numbers.
    Results are collected in plan order.
    """
    runs = list(plan.runs())
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [
                pool.submit(_run_fold, manifest, cfg, r, f, tr, te, threads)
                for r, f, tr, te in runs
            ]
            results = [fut.result() for fut in futures]
    else:
        results = [_run_fold(manifest, cfg, r, f, tr, te, threads) for r, f, tr, te in runs]

    if out_dir is not None:
        out = Path(out_dir)
        for res in results:
            tag = f"rep{res.repetition}_fold{res.fold}"
            save_params(res.params, out / "params" / f"{tag}.npz")
            res.history.write_csv(out / "history" / f"{tag}.csv")
    return CVResult(results)
