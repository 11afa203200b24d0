"""ROC/PR analysis, pooled curves over repetitions, metric tables and map exports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from amddx.datamodel import LESION_CLASSES, DatasetManifest, PathLike, PredictionRecord

TARGETS: Tuple[str, ...] = ("amd",) + LESION_CLASSES
UNDEFINED = "undefined"


@dataclass(frozen=True)
class Curve:
    """Operating points ordered by decreasing threshold.

    ROC: x = false-positive rate, y = true-positive rate.
    PR:  x = recall, y = precision.
    """

    kind: str
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.x)

    def points(self) -> List[Tuple[float, float]]:
        return list(zip(self.x.tolist(), self.y.tolist()))


def _counts(scores: Sequence[float], labels: Sequence[int]):
    """Cumulative (tp, fp) at each distinct threshold, highest threshold first."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D sequences of equal length")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last_of_tie = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tp = np.cumsum(y)[last_of_tie]
    fp = last_of_tie + 1 - tp
    return tp, fp, int(y.sum()), int(len(y) - y.sum())


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> Optional[Curve]:
    """ROC curve with one point per distinct score, anchored at (0, 0) and (1, 1).

    Returns ``None`` when only one class is present (the metric is undefined).
    """
    if len(scores) == 0:
        return None
    tp, fp, n_pos, n_neg = _counts(scores, labels)
    if n_pos == 0 or n_neg == 0:
        return None
    return Curve("roc", np.r_[0.0, fp / n_neg], np.r_[0.0, tp / n_pos])


def pr_curve(scores: Sequence[float], labels: Sequence[int]) -> Optional[Curve]:
    """Precision-recall curve; the recall-0 anchor repeats the top threshold's precision.

    Returns ``None`` without positives.
    """
    if len(scores) == 0:
        return None
    tp, fp, n_pos, _ = _counts(scores, labels)
    if n_pos == 0:
        return None
    precision = tp / (tp + fp)
    return Curve("pr", np.r_[0.0, tp / n_pos], np.r_[precision[0], precision])


def auc(curve: Optional[Curve]) -> Optional[float]:
    """Trapezoidal area under ``curve``; ``None`` if undefined."""
    if curve is None or len(curve) < 2:
        return None
    dx = np.diff(curve.x)
    return float(np.sum(dx * (curve.y[1:] + curve.y[:-1]) / 2.0))


def _vertical_average(curves: Sequence[Curve], grid_size: int = 201) -> Curve:
    grid = np.linspace(0.0, 1.0, grid_size)
    ys = []
    for c in curves:
        # x is non-decreasing; between two distinct x values interp follows the
        # segment leaving the last point of a vertical run, i.e. the curve itself.
        ys.append(np.interp(grid, c.x, c.y))
    return Curve(curves[0].kind, grid, np.mean(ys, axis=0))


def merged_curve(
    prediction_sets: Sequence[Tuple[Sequence[float], Sequence[int]]],
    kind: str,
    method: str = "pool",
) -> Optional[Curve]:
    """One summary curve over repeated runs.

    ``pool`` concatenates all (score, label) pairs and builds a single curve;
    ``vertical`` averages the per-run curves on a fixed x grid.
    """
    if not prediction_sets:
        raise ValueError("need at least one prediction set")
    build = {"roc": roc_curve, "pr": pr_curve}[kind]
    if method == "pool":
        scores = np.concatenate([np.asarray(s, dtype=np.float64) for s, _ in prediction_sets])
        labels = np.concatenate([np.asarray(l) for _, l in prediction_sets])
        return build(scores, labels)
    if method == "vertical":
        curves = [build(s, l) for s, l in prediction_sets]
        if any(c is None for c in curves):
            return None
        return _vertical_average(curves)
    raise ValueError(f"unknown merge method {method!r}")


# ---------------------------------------------------------------------------
# reports


def to_percent(value: Optional[float]):
    """Percentage rounded half away from zero to two decimals, or ``"undefined"``."""
    if value is None:
        return UNDEFINED
    d = Decimal(repr(value * 100.0)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return float(d)


@dataclass
class TargetMetrics:
    auc_roc: Optional[float]
    auc_pr: Optional[float]
    roc: Optional[Curve] = field(repr=False, default=None)
    pr: Optional[Curve] = field(repr=False, default=None)
    n_pos: int = 0
    n_neg: int = 0

    def to_dict(self) -> dict:
        return {
            "auc_roc": to_percent(self.auc_roc),
            "auc_pr": to_percent(self.auc_pr),
            "roc_points": 0 if self.roc is None else len(self.roc),
            "pr_points": 0 if self.pr is None else len(self.pr),
            "positives": self.n_pos,
            "negatives": self.n_neg,
        }


@dataclass
class MetricReport:
    targets: Dict[str, TargetMetrics]

    def __getitem__(self, name: str) -> TargetMetrics:
        return self.targets[name]

    def to_dict(self) -> dict:
        return {
            "diagnosis": self.targets["amd"].to_dict(),
            "lesions": {c: self.targets[c].to_dict() for c in LESION_CLASSES if c in self.targets},
        }

    def write(self, out_dir: PathLike, prefix: str = "") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"{prefix}report.json", "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")
        for name, m in self.targets.items():
            for curve in (m.roc, m.pr):
                if curve is not None:
                    write_curve_csv(curve, out / f"{prefix}curve_{name}_{curve.kind}.csv")


def write_curve_csv(curve: Curve, path: PathLike) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "x", "y"])
        for x, y in curve.points():
            writer.writerow([curve.kind, repr(x), repr(y)])


def _target_sets(
    predictions: Sequence[PredictionRecord], manifest: DatasetManifest, target: int
) -> List[Tuple[List[float], List[int]]]:
    by_id = manifest.by_id()
    groups: Dict[Optional[int], Tuple[List[float], List[int]]] = {}
    for p in predictions:
        s = by_id[p.sample_id]
        if target == 0:
            label = s.diagnosis
        else:
            label = None if s.lesions is None else s.lesions[target - 1]
        if label is None:
            continue
        scores, labels = groups.setdefault(p.repetition, ([], []))
        scores.append(p.probabilities[target])
        labels.append(int(label))
    return [groups[k] for k in sorted(groups, key=lambda r: -1 if r is None else r)]


def metric_report(
    predictions: Sequence[PredictionRecord], manifest: DatasetManifest, method: str = "pool"
) -> MetricReport:
    """AUC-ROC and AUC-PR for the diagnosis and each lesion, merged over repetitions.

    Lesion targets only use samples whose lesion label is known.
    """
    known = manifest.by_id()
    unknown = sorted({p.sample_id for p in predictions} - set(known))
    if unknown:
        raise ValueError(f"predictions for samples missing from the manifest: {unknown[:5]}")
    targets = {}
    for t, name in enumerate(TARGETS):
        sets = _target_sets(predictions, manifest, t)
        if not sets:
            targets[name] = TargetMetrics(None, None)
            continue
        roc = merged_curve(sets, "roc", method)
        pr = merged_curve(sets, "pr", method)
        labels = np.concatenate([np.asarray(l) for _, l in sets])
        targets[name] = TargetMetrics(
            auc(roc), auc(pr), roc, pr, int(labels.sum()), int(len(labels) - labels.sum())
        )
    return MetricReport(targets)


def format_comparison(reports: Mapping[str, MetricReport], dataset: str = "") -> str:
    """Text table: AMD AUC-ROC / AUC-PR per approach, then lesion AUC-ROC per approach."""
    names = list(reports)
    fmt = lambda v: f"{v:.2f}" if isinstance(v, float) else str(v)
    lines = [f"{'Dataset':<16}{'Metric':<10}" + "".join(f"{n:>12}" for n in names)]
    for metric, key in (("AUC-ROC", "auc_roc"), ("AUC-PR", "auc_pr")):
        row = [to_percent(getattr(reports[n]["amd"], key)) for n in names]
        lines.append(f"{dataset:<16}{metric:<10}" + "".join(f"{fmt(v):>12}" for v in row))
        dataset = ""
    lines.append("")
    lines.append(f"{'Lesion AUC-ROC':<26}" + "".join(f"{n:>12}" for n in names))
    for c in LESION_CLASSES:
        row = [to_percent(reports[n][c].auc_roc) for n in names]
        lines.append(f"{c:<26}" + "".join(f"{fmt(v):>12}" for v in row))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# activation maps


def shared_normalize(maps: np.ndarray) -> np.ndarray:
    """Scale all maps of one sample jointly to [0, 1]; constant input maps to 0."""
    lo, hi = float(maps.min()), float(maps.max())
    if hi <= lo:
        return np.zeros_like(maps, dtype=np.float64)
    return (maps - lo) / (hi - lo)


def upsample_map(m: np.ndarray, scale: int, shape: Tuple[int, int]) -> np.ndarray:
    """Bilinear ``scale``x upsampling, zero-padded or cropped to ``shape`` (top-left aligned)."""
    t = torch.from_numpy(np.asarray(m, dtype=np.float32))[None, None]
    up = F.interpolate(t, scale_factor=scale, mode="bilinear", align_corners=False)[0, 0].numpy()
    out = np.zeros(shape, dtype=np.float32)
    h, w = min(shape[0], up.shape[0]), min(shape[1], up.shape[1])
    out[:h, :w] = up[:h, :w]
    return out


def export_activation_overlay(
    image: np.ndarray,
    prediction: PredictionRecord,
    out_dir: PathLike,
    scale: int = 16,
    alpha: float = 0.5,
) -> List[Path]:
    """Write one grayscale map and one color overlay per lesion channel.

    All N maps share one min-max scale so their intensities are comparable.
    """
    from matplotlib import colormaps

    if prediction.activation_maps is None:
        raise ValueError(f"{prediction.sample_id}: prediction carries no activation maps")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    norm = shared_normalize(prediction.activation_maps)
    cmap = colormaps["jet"]
    h, w = image.shape[:2]
    paths = []
    for c, name in enumerate(LESION_CLASSES[: len(norm)]):
        gray = np.kron(norm[c], np.ones((scale, scale)))
        p = out / f"{prediction.sample_id}_map_{name}.png"
        try:
            Image.fromarray(np.round(gray * 255).astype(np.uint8), mode="L").save(p)
            heat = cmap(upsample_map(norm[c], scale, (h, w)))[..., :3]
            blend = (1 - alpha) * image + alpha * heat
            q = out / f"{prediction.sample_id}_overlay_{name}.png"
            Image.fromarray(np.round(np.clip(blend, 0, 1) * 255).astype(np.uint8)).save(q)
        except OSError as exc:
            raise OSError(f"cannot write activation images under {out}: {exc}") from exc
        paths += [p, q]
    return paths


def activation_peak(maps: np.ndarray, channel: int, scale: int = 16) -> Tuple[float, float]:
    """Image (row, col) of the center of the strongest cell in one activation channel."""
    m = maps[channel]
    i, j = np.unravel_index(int(np.argmax(m)), m.shape)
    return i * scale + (scale - 1) / 2.0, j * scale + (scale - 1) / 2.0
