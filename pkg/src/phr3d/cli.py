"""Command-line surface: train, predict, eval, curve, synth, audit.

Every command exits 0 on success.  Failures print a single
machine-parseable line to stderr, ``<ErrorClass>: <message>``, and exit
with 2 for configuration errors, 3 for data errors, and 4 for numeric
failures.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .data import (
    PredictionRecord,
    RunConfig,
    config_hash,
    default_eye_indices,
    load_dataset,
    load_image_rgb,
    load_pairs,
    load_predictions,
    prepare_samples,
    resolve_pairs,
    write_predictions,
)
from .errors import ConfigError, DataError, NumericError
from .heatmaps import LandmarkSet3D
from .metrics import evaluate_batch
from .model import build_cascade, load_checkpoint, train_stagewise
from .report import render_curves, write_report, write_training_figure
from .synth import SyntheticFaceSpec, write_synthetic_dataset

__all__ = ["main", "build_parser"]


def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _cmd_train(args) -> int:
    cfg = RunConfig.from_json_file(args.config)
    if cfg.train_manifest is None or cfg.val_manifest is None:
        raise ConfigError("config must set train_manifest and val_manifest")
    # all validation happens before the datasets are touched
    eyes = cfg.metrics.resolved_eyes(cfg.n_landmarks)
    augment = cfg.augment_config()
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = config_hash(cfg)
    (out_dir / "config.json").write_text(
        json.dumps({"config": cfg.canonical_dict(), "config_sha256": digest},
                   indent=2, sort_keys=True) + "\n", encoding="utf-8")

    train_recs = load_dataset(cfg.train_manifest)
    val_recs = load_dataset(cfg.val_manifest)
    for name, recs in (("train", train_recs), ("val", val_recs)):
        if recs and recs[0].landmarks.n_points != cfg.n_landmarks:
            raise DataError(
                f"{name} manifest has {recs[0].landmarks.n_points} landmarks, "
                f"config expects {cfg.n_landmarks}"
            )
    train_samples = prepare_samples(train_recs, cfg.crop_size,
                                    image_root=Path(cfg.train_manifest).parent)
    val_samples = prepare_samples(val_recs, cfg.crop_size,
                                  image_root=Path(cfg.val_manifest).parent)

    rng = np.random.default_rng(cfg.seed)
    model = build_cascade(cfg.preset, n_landmarks=cfg.n_landmarks,
                          crop_size=cfg.crop_size, rng=rng)
    log = train_stagewise(
        model, train_samples, val_samples, cfg.schedule, rng,
        augment=augment, eye_indices=eyes,
        log_path=out_dir / "log.csv", checkpoint_dir=out_dir / "checkpoints",
        seed=cfg.seed,
    )
    write_training_figure(out_dir / "log.csv", out_dir / "training.png")
    final = log.records[-1]
    xy_records = [r for r in log.records if r.val_gte_xy is not None]
    print(f"trained {cfg.preset} preset: {len(log.records)} epochs, "
          f"config {digest[:12]}")
    print(f"final val gte_xy={xy_records[-1].val_gte_xy:.4f}% "
          f"gte_z={final.val_gte_z:.4f}%")
    print(f"checkpoint: {out_dir / 'checkpoints' / 'final.bin'}")
    return 0


def _cmd_predict(args) -> int:
    model = load_checkpoint(args.model)
    records = load_dataset(args.images)
    if not records:
        raise DataError(f"manifest {args.images} has no records")
    if records[0].landmarks.n_points != model.config.n_landmarks:
        raise DataError(
            f"manifest has {records[0].landmarks.n_points} landmarks, "
            f"model expects {model.config.n_landmarks}"
        )
    root = Path(args.images).parent
    preds: List[PredictionRecord] = []
    for rec in records:
        img_path = Path(rec.image_path)
        if not img_path.is_absolute():
            img_path = root / img_path
        image = load_image_rgb(img_path)
        lm = model.predict_landmarks_3d(image, rec.bbox)
        preds.append(PredictionRecord(rec.image_path, lm.xyz()))
    write_predictions(preds, args.out)
    print(f"wrote {len(preds)} predictions to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    preds = load_predictions(args.pred)
    gts = load_dataset(args.gt, require_images=False)
    if not preds or not gts:
        raise DataError("nothing to evaluate")
    by_path = {r.image_path: r for r in gts}
    gt_lms: List[LandmarkSet3D] = []
    pred_lms: List[LandmarkSet3D] = []
    for p in preds:
        if p.image_path not in by_path:
            raise DataError(f"prediction {p.image_path!r} missing from GT manifest")
        gt = by_path[p.image_path].landmarks
        gt_lms.append(gt)
        pred_lms.append(LandmarkSet3D(p.points[:, :2], p.points[:, 2],
                                      gt.crop_size))
    n = gt_lms[0].n_points
    eyes = tuple(args.eye_indices) if args.eye_indices else default_eye_indices(n)
    pair_idx = None
    if args.pairs:
        paths = [p.image_path for p in preds]
        pair_idx = resolve_pairs(load_pairs(args.pairs), paths, paths)
    config = {
        "pred_file": str(args.pred),
        "gt_manifest": str(args.gt),
        "pairs_file": None if not args.pairs else str(args.pairs),
        "eye_indices": list(eyes),
        "include_translation": not args.exclude_translation,
        "pred_sha256": _sha256_file(args.pred),
        "gt_sha256": _sha256_file(args.gt),
    }
    report = evaluate_batch(pred_lms, gt_lms, pairs=pair_idx, eye_indices=eyes,
                            include_translation=not args.exclude_translation,
                            config=config)
    paths = write_report(report, args.report)
    summary = f"gte_xyz={report.aggregate['xyz']:.4f}% over {report.n_images} images"
    if report.cvgtce_mean is not None:
        summary += f", cvgtce={report.cvgtce_mean:.4f}% over {len(report.cvgtce_per_pair)} pairs"
    print(summary)
    print(f"report: {paths['report_json']}")
    return 0


def _cmd_curve(args) -> int:
    paths = render_curves(args.report, args.out)
    print(f"rendered {sum(1 for k in paths if k.endswith('_csv'))} curves "
          f"under {args.out or args.report}")
    return 0


_SYNTH_KEYS = {"count", "val_fraction", "spec"}


def _cmd_synth(args) -> int:
    spec_path = Path(args.spec)
    if not spec_path.exists():
        raise ConfigError(f"spec file {spec_path} does not exist")
    try:
        raw = json.loads(spec_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"spec file is not valid JSON: {exc}") from None
    unknown = sorted(set(raw) - _SYNTH_KEYS)
    if unknown:
        raise ConfigError(f"unknown spec keys: {unknown}")
    count = int(raw.get("count", 600))
    val_fraction = float(raw.get("val_fraction", 1.0 / 6.0))
    spec_kw = dict(raw.get("spec", {}))
    if "template" in spec_kw and spec_kw["template"] is not None:
        spec_kw["template"] = np.asarray(spec_kw["template"], dtype=np.float64)
    for key, value in spec_kw.items():
        if isinstance(value, list):
            spec_kw[key] = tuple(value)
    try:
        spec = SyntheticFaceSpec(**spec_kw)
    except TypeError as exc:
        raise ConfigError(f"bad spec field: {exc}") from None
    paths = write_synthetic_dataset(spec, count, args.out,
                                    val_fraction=val_fraction)
    print(f"wrote {count} images under {args.out}")
    for key in ("train_manifest", "val_manifest", "train_pairs", "val_pairs"):
        print(f"{key}: {paths[key]}")
    return 0


def _cmd_audit(args) -> int:
    model = build_cascade(args.preset)
    census = model.census()
    print(json.dumps(census, indent=2))
    det_blocks = sum(s["bottlenecks"] for s in census["detection"]["stages"])
    z_blocks = sum(s["bottlenecks"] for s in census["z"]["stages"])
    print(f"detection trunk: {det_blocks} bottleneck modules; "
          f"depth trunk: {z_blocks} bottleneck modules; "
          f"{census['total_parameters']:,} parameters total", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phr3d",
        description="part-heatmap-regression cascade for 3D facial landmarks",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the stage-wise training schedule")
    p.add_argument("--config", required=True, help="run-config JSON file")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="predict 3D landmarks for a manifest")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--images", required=True, help="manifest with images + bboxes")
    p.add_argument("--out", required=True, help="prediction file to write")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="prediction file")
    p.add_argument("--gt", required=True, help="ground-truth manifest")
    p.add_argument("--pairs", help="cross-view pairs file for consistency scoring")
    p.add_argument("--report", required=True, help="output report directory")
    p.add_argument("--eye-indices", nargs=2, type=int, metavar=("L", "R"),
                   help="normalizer landmark indices (default: scheme-based)")
    p.add_argument("--exclude-translation", action="store_true",
                   help="drop the fitted translation from consistency scoring")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("curve", help="re-render curve CSVs/figures from a report")
    p.add_argument("--report", required=True, help="directory with report.json")
    p.add_argument("--out", help="output directory (default: report dir)")
    p.set_defaults(func=_cmd_curve)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="generator spec JSON file")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("audit", help="print the structural census of a preset")
    p.add_argument("--preset", required=True,
                   help="model preset: desk, full (alias: paper)")
    p.set_defaults(func=_cmd_audit)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _report_failure(exc)
        return 2
    except DataError as exc:
        _report_failure(exc)
        return 3
    except NumericError as exc:
        _report_failure(exc)
        return 4


def _report_failure(exc: Exception) -> None:
    message = " ".join(str(exc).split())
    print(f"{type(exc).__name__}: {message}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
