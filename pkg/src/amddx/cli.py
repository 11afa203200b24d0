"""Command-line entry point: ``amddx {ingest,folds,cv,eval,maps,synth}``.

Exit codes: 0 success, 1 computation failure, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

from amddx.datamodel import (
    DatasetManifest,
    FoldPlan,
    load_fold_plan,
    load_manifest,
    load_predictions,
    save_fold_plan,
    save_manifest,
    save_predictions,
    validate_manifest,
)
from amddx.evaluation import export_activation_overlay, format_comparison, metric_report
from amddx.ingestion import (
    DatasetError,
    build_folds,
    check_fold_plan,
    load_evaluation_set,
    load_ichallenge,
    read_eye_groups,
    resize_to_width,
)
from amddx.model import load_params
from amddx.synthdata import SynthConfig, generate
from amddx.training import (
    ExperimentConfig,
    LossConfig,
    TrainingError,
    default_loader,
    predict,
    run_cross_validation,
)

log = logging.getLogger("amddx")

OUT_ENV = "AMDDX_OUT"
DATASETS = ("ichallenge", "aria", "stare")


class UsageError(Exception):
    """Bad arguments, config or input files (exit code 2)."""


@dataclass
class RunConfig:
    """One experiment: dataset, model/loss/optimizer/augmentation/training, folds, output.

    ``dataset`` holds ``kind`` (``manifest`` or a dataset tag) and the paths
    the kind needs: ``manifest`` for a manifest file, otherwise ``root`` and
    optionally ``eye_groups``. ``folds`` must give ``k``, ``repetitions`` and
    ``seed`` explicitly, and ``training`` must give ``seed``.
    """

    dataset: dict
    experiment: ExperimentConfig
    folds: dict
    output_dir: Optional[str] = None
    base_dir: Path = field(default_factory=Path)

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{p}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw, p.parent)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path = Path(".")) -> "RunConfig":
        unknown = set(raw) - {"dataset", "model", "loss", "optimizer", "augmentation", "training", "folds", "output_dir"}
        if unknown:
            raise UsageError(f"unknown config sections: {sorted(unknown)}")
        if "dataset" not in raw:
            raise UsageError("config needs a 'dataset' section")
        folds = raw.get("folds", {})
        missing = [k for k in ("k", "repetitions", "seed") if k not in folds]
        if missing:
            raise UsageError(f"folds section must set {missing} explicitly")
        if "seed" not in raw.get("training", {}):
            raise UsageError("training section must set 'seed' explicitly")
        try:
            exp = ExperimentConfig.from_dict(raw)
        except (TypeError, ValueError, KeyError) as exc:
            raise UsageError(f"invalid experiment config: {exc}") from exc
        cfg = cls(dict(raw["dataset"]), exp, dict(folds), raw.get("output_dir"), base_dir)
        cfg.check_paths()
        return cfg

    def path(self, value: str) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def check_paths(self) -> None:
        kind = self.dataset.get("kind", "manifest")
        keys = ["manifest"] if kind == "manifest" else ["root"]
        if kind not in DATASETS + ("manifest",):
            raise UsageError(f"unknown dataset kind {kind!r}")
        for key in keys:
            if key not in self.dataset:
                raise UsageError(f"dataset section needs '{key}' for kind {kind!r}")
        for key in ("manifest", "root", "eye_groups", "plan"):
            if key in self.dataset and not self.path(self.dataset[key]).exists():
                raise UsageError(f"dataset {key} not found: {self.path(self.dataset[key])}")
        trunk = self.experiment.training.pretrained_trunk
        if trunk and not self.path(trunk).exists():
            raise UsageError(f"pretrained trunk not found: {self.path(trunk)}")

    def manifest(self) -> DatasetManifest:
        kind = self.dataset.get("kind", "manifest")
        if kind == "manifest":
            return load_manifest(self.path(self.dataset["manifest"]))
        return _ingest(kind, self.path(self.dataset["root"]), self.dataset.get("eye_groups") and self.path(self.dataset["eye_groups"]))

    def fold_plan(self, manifest: DatasetManifest) -> FoldPlan:
        if "plan" in self.dataset:
            plan = load_fold_plan(self.path(self.dataset["plan"]))
            problems = check_fold_plan(plan, manifest)
            if problems:
                raise UsageError("fold plan does not match the manifest:\n  " + "\n  ".join(problems))
            return plan
        return build_folds(manifest, int(self.folds["k"]), int(self.folds["repetitions"]), int(self.folds["seed"]))


def _ingest(dataset: str, root: Path, eye_groups: Optional[Path] = None, strict: bool = False) -> DatasetManifest:
    if not Path(root).exists():
        raise UsageError(f"dataset root not found: {root}")
    if dataset == "ichallenge":
        groups = read_eye_groups(eye_groups) if eye_groups else None
        return load_ichallenge(root, eye_groups=groups, strict=strict)
    if eye_groups:
        log.warning("--eye-groups is ignored for %s", dataset)
    return load_evaluation_set(root, dataset, strict=strict)


def _output_dir(flag: Optional[str], config_value: Optional[str] = None) -> Path:
    """``--out`` wins, then the AMDDX_OUT variable, then the config file."""
    value = flag or os.environ.get(OUT_ENV) or config_value
    if not value:
        raise UsageError(f"no output directory: pass --out, set {OUT_ENV} or set output_dir in the config")
    return Path(value)


def _write_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> int:
    manifest = _ingest(args.dataset, Path(args.root), args.eye_groups and Path(args.eye_groups), args.strict)
    violations = validate_manifest(manifest, check_files=True)
    out = Path(args.out)
    report = out.with_name(out.stem + ".validation.json")
    _write_json({"samples": len(manifest), "violations": violations}, report)
    if violations:
        for v in violations:
            print(v, file=sys.stderr)
        return 1
    save_manifest(manifest, out)
    print(f"{len(manifest)} samples -> {out}")
    return 0


def cmd_folds(args) -> int:
    manifest = load_manifest(_require_file(args.manifest, "manifest"))
    plan = build_folds(manifest, args.k, args.repetitions, args.seed)
    save_fold_plan(plan, Path(args.out))
    print(f"{plan.k}-fold x {len(plan.repetitions)} repetitions -> {args.out}")
    return 0


def cmd_cv(args) -> int:
    cfg = RunConfig.load(args.config)
    exp = cfg.experiment
    if args.mode == "ao":
        loss = exp.loss
        exp = ExperimentConfig(
            exp.model,
            LossConfig.amd_only(
                n_lesions=loss.n_lesions,
                epsilon_clamp=loss.epsilon_clamp,
                unlabeled_lesion_policy=loss.unlabeled_lesion_policy,
            ),
            exp.optimizer,
            exp.augmentation,
            exp.training,
        )
    manifest = cfg.manifest()
    plan = cfg.fold_plan(manifest)
    out = _output_dir(args.out, cfg.output_dir and str(cfg.path(cfg.output_dir))) / args.mode
    out.mkdir(parents=True, exist_ok=True)
    save_manifest(manifest, out / "manifest.json")
    save_fold_plan(plan, out / "folds.json")
    _write_json({"mode": args.mode, **exp.to_dict()}, out / "config.json")
    result = run_cross_validation(manifest, plan, exp, out, jobs=args.jobs, threads=args.threads)
    save_predictions(result.predictions, out / "predictions.json")
    print(f"{len(result.folds)} runs, {len(result.predictions)} predictions -> {out}")
    return 0


def _external_predictions(params_dir: Path, manifest: DatasetManifest, resize_width: Optional[int]):
    archives = sorted(params_dir.glob("*.npz"))
    if not archives:
        raise UsageError(f"no parameter archives in {params_dir}")
    load = default_loader(manifest)
    preds = []
    for run, path in enumerate(archives):
        params = load_params(path)
        preds.extend(predict(params, manifest.samples, load, resize_width, repetition=run))
    return preds


def cmd_eval(args) -> int:
    out = _output_dir(args.out)
    if args.external:
        manifest = load_manifest(_require_file(args.external, "external manifest"))
        params_dir = Path(args.params)
        if not params_dir.is_dir():
            raise UsageError(f"parameter directory not found: {params_dir}")
        preds = _external_predictions(params_dir, manifest, args.resize_width)
        save_predictions(preds, out / "predictions.json")
    else:
        if not args.predictions:
            raise UsageError("eval needs --predictions or --external")
        manifest = load_manifest(_require_file(args.manifest, "manifest"))
        preds = load_predictions(_require_file(args.predictions, "predictions file"))
    try:
        report = metric_report(preds, manifest, args.method)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    report.write(out)

    reports = {args.label: report}
    for item in args.compare or []:
        name, _, path = item.partition("=")
        if not path:
            raise UsageError(f"--compare expects NAME=PATH, got {item!r}")
        try:
            reports[name] = metric_report(load_predictions(_require_file(path, "predictions file")), manifest, args.method)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    table = format_comparison(reports, manifest.name)
    (out / "comparison.txt").write_text(table + "\n")
    print(table)
    return 0


def cmd_maps(args) -> int:
    params = load_params(_require_file(args.params, "parameter archive"))
    manifest = load_manifest(_require_file(args.manifest, "manifest"))
    by_id = manifest.by_id()
    ids = [i for i in args.ids.split(",") if i]
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise UsageError(f"sample ids not in manifest: {missing}")
    load = default_loader(manifest, cache=False)
    out = Path(args.out)
    for rec, sid in zip(predict(params, [by_id[i] for i in ids], load, args.resize_width), ids):
        image = load(by_id[sid])
        if args.resize_width:
            image = resize_to_width(image, args.resize_width)
        written = export_activation_overlay(image, rec, out, scale=params.config.downsampling, alpha=args.alpha)
        print(f"{sid}: {len(written)} files")
    return 0


def cmd_synth(args) -> int:
    ds = generate(SynthConfig(args.n, image_size=args.size, seed=args.seed), Path(args.out))
    print(f"{len(ds.manifest)} samples -> {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amddx", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build a manifest from a dataset directory")
    p.add_argument("--dataset", choices=DATASETS, required=True)
    p.add_argument("--root", required=True)
    p.add_argument("--eye-groups")
    p.add_argument("--strict", action="store_true", help="fail when class counts differ from the published ones")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("folds", help="write a grouped k-fold plan")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_folds)

    p = sub.add_parser("cv", help="repeated cross-validation")
    p.add_argument("--config", required=True)
    p.add_argument("--mode", choices=("al", "ao"), default="al", help="al: AMD + lesions, ao: AMD only")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--threads", type=int, default=1, help="torch threads per run")
    p.add_argument("--out")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("eval", help="metrics, merged curves and comparison table")
    p.add_argument("--predictions")
    p.add_argument("--manifest")
    p.add_argument("--external", help="manifest evaluated with saved models, no retraining")
    p.add_argument("--params", help="directory of parameter archives for --external")
    p.add_argument("--resize-width", type=int)
    p.add_argument("--method", choices=("pool", "vertical"), default="pool")
    p.add_argument("--label", default="A+L")
    p.add_argument("--compare", action="append", metavar="NAME=PATH")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("maps", help="activation maps and overlays")
    p.add_argument("--params", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ids", required=True, help="comma-separated sample ids")
    p.add_argument("--resize-width", type=int)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_maps)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "eval" and args.external and not args.params:
        parser.error("--external needs --params")
    if args.command == "eval" and not args.external and not args.manifest:
        parser.error("eval needs --manifest")
    try:
        return args.func(args)
    except (UsageError, DatasetError, FileNotFoundError, NotADirectoryError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, FloatingPointError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
