"""Command-line interface: train, segment, evaluate, protocol, compare.

Exit codes: 0 on success, 2 for configuration problems (bad config files,
unknown variants, malformed flags), 3 for data problems (missing or
unreadable inputs, contract violations in the data).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .bundle import load_bundle, save_bundle, train_bundle
from .crf import LAMBDA_DEFAULT, PAIRWISE_CHANNELS, Labeling, segment_image
from .errors import ConfigError, DataError
from .evaluation import (
    TRIMAP_RADII,
    accumulate_confusion,
    class_accuracy,
    dumps_metrics,
    empty_confusion,
    jaccard_index,
    overall_accuracy,
    per_class_accuracy,
    per_class_jaccard,
    plot_trimap,
    trimap_curve,
    write_confusion_csv,
    write_trimap_csv,
)
from .errors import EmptyBand
from .experiment import (
    base_train_settings,
    compare_reports,
    load_config,
    parse_descriptor_spec,
    render_comparison,
    resolve_workers,
    run_fold_protocol,
)
from .imageio import (
    MODES,
    VOID_ID,
    DatasetManifest,
    MODE_OUTDOOR,
    load_image_pair,
    load_manifest,
    load_mask,
    write_mask,
)

log = logging.getLogger("mscrf")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mscrf",
        description="RGB+NIR semantic segmentation: Fisher-vector unaries with a "
        "contrast-sensitive CRF.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on manifest folds")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument(
        "--folds",
        default=None,
        help="comma-separated folds to train on (default: every fold in the manifest)",
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="segment one image with a trained model")
    p.add_argument("--model", required=True, help="model file from `train`")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument(
        "--image",
        help="image stem: reads STEM_rgb.png and, when present, STEM_nir.png",
    )
    group.add_argument("--rgb", help="explicit RGB image path")
    p.add_argument("--nir", default=None, help="explicit NIR image path (with --rgb)")
    p.add_argument("--out", required=True, help="output mask PNG")
    p.add_argument("--lam", type=float, default=LAMBDA_DEFAULT, help="CRF weight")
    p.add_argument(
        "--pairwise-mode",
        choices=sorted(PAIRWISE_CHANNELS),
        default=None,
        help="contrast channels (default: all channels the image has)",
    )
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="score predicted masks against ground truth")
    p.add_argument("--pred", required=True, help="directory of predicted mask PNGs")
    p.add_argument("--gt", required=True, help="directory of ground-truth mask PNGs")
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument(
        "--labels",
        type=int,
        default=None,
        help="number of named classes (default: inferred from the ground truth)",
    )
    p.add_argument(
        "--radii", type=int, nargs="+", default=list(TRIMAP_RADII), help="trimap radii"
    )
    p.add_argument("--plot", action="store_true", help="also render the trimap curve")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("protocol", help="run the five-fold protocol end to end")
    p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--cache-dir", default=None, help="unary-field cache directory")
    p.add_argument(
        "--workers",
        type=int,
        default=None,
        help="parallel image workers (default: MSCRF_WORKERS or 1)",
    )
    p.add_argument(
        "--tune",
        action="store_true",
        help="pick the CRF weight per rotation on the validation fold",
    )
    p.add_argument("--plot", action="store_true", help="also render the trimap curve")
    p.set_defaults(func=cmd_protocol)

    p = sub.add_parser("compare", help="compare two protocol reports")
    p.add_argument("report_a", help="first report directory")
    p.add_argument("report_b", help="second report directory")
    p.add_argument("--out", default=None, help="optional comparison JSON path")
    p.set_defaults(func=cmd_compare)

    return parser


def _parse_folds(raw: str | None, manifest: DatasetManifest):
    if raw is None:
        return sorted({e.fold for e in manifest.entries})
    try:
        folds = sorted({int(tok) for tok in raw.split(",") if tok.strip() != ""})
    except ValueError:
        raise ConfigError(f"--folds must be comma-separated integers, got {raw!r}") from None
    if not folds or any(f not in range(5) for f in folds):
        raise ConfigError(f"--folds entries must lie in 0..4, got {raw!r}")
    return folds


def cmd_train(args) -> int:
    config = load_config(args.config)
    manifest = load_manifest(config.manifest)
    folds = _parse_folds(args.folds, manifest)
    streams = parse_descriptor_spec(config.descriptor)
    log.info(
        "training %s on folds %s (%d entries)",
        config.descriptor,
        folds,
        len(manifest.fold_entries(folds)),
    )
    bundle = train_bundle(
        manifest, folds, streams, base_train_settings(config, config.seed)
    )
    save_bundle(bundle, args.out)
    log.info("wrote model to %s", args.out)
    return 0


def cmd_segment(args) -> int:
    bundle = load_bundle(args.model)
    if args.image is not None:
        rgb = Path(f"{args.image}_rgb.png")
        nir = Path(f"{args.image}_nir.png")
        nir = nir if nir.exists() else None
    else:
        rgb = Path(args.rgb)
        nir = None if args.nir is None else Path(args.nir)
    img = load_image_pair(rgb, nir)
    labeling = segment_image(bundle, img, lam=args.lam, pairwise_mode=args.pairwise_mode)
    write_mask(labeling.labels, args.out)
    log.info("wrote %s", args.out)
    return 0


def _infer_label_count(gt_arrays, mode: str) -> int:
    ids = np.concatenate([np.unique(a) for a in gt_arrays])
    if mode == MODE_OUTDOOR:
        ids = ids[ids != VOID_ID]
        if ids.size == 0:
            raise DataError("ground truth is entirely void; cannot infer label count")
        return int(ids.max()) + 1
    # Indoor: background is the largest id (one past the named classes).
    return max(int(ids.max()), 1)


def cmd_evaluate(args) -> int:
    pred_dir = Path(args.pred)
    gt_dir = Path(args.gt)
    gt_files = sorted(gt_dir.glob("*.png"))
    if not gt_files:
        raise DataError(f"no ground-truth PNGs found in {gt_dir}")

    gt_arrays = [np.asarray(Image.open(p).convert("L"), dtype=np.int32) for p in gt_files]
    n_labels = args.labels if args.labels is not None else _infer_label_count(gt_arrays, args.mode)
    if n_labels < 1:
        raise ConfigError("--labels must be positive")
    manifest = DatasetManifest(
        mode=args.mode,
        label_names=tuple(f"class_{k}" for k in range(n_labels)),
        entries=(),
    )

    pooled = empty_confusion(manifest)
    preds, gts, per_image = [], [], []
    for path, _ in zip(gt_files, gt_arrays):
        pred_path = pred_dir / path.name
        if not pred_path.exists():
            raise DataError(f"missing prediction for {path.name}")
        gt = load_mask(path, manifest)
        pred = Labeling(np.asarray(Image.open(pred_path).convert("L"), dtype=np.int32))
        cm = accumulate_confusion(pred, gt, manifest)
        pooled = pooled + cm
        if cm.total > 0:
            per_image.append([path.stem, overall_accuracy(cm)])
        preds.append(pred)
        gts.append(gt)

    try:
        curve = trimap_curve(preds, gts, tuple(args.radii))
    except EmptyBand:
        curve = None

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = {
        "mode": args.mode,
        "n_labels": n_labels,
        "n_images": len(gt_files),
        "overall_accuracy": overall_accuracy(pooled),
        "class_accuracy": class_accuracy(pooled),
        "jaccard_index": jaccard_index(pooled),
        "per_class_accuracy": {str(k): v for k, v in per_class_accuracy(pooled).items()},
        "per_class_jaccard": {str(k): v for k, v in per_class_jaccard(pooled).items()},
        "per_image": per_image,
        "trimap": None
        if curve is None
        else {
            "radii": list(curve.radii),
            "accuracy": list(curve.accuracy),
            "correct": list(curve.correct),
            "total": list(curve.total),
        },
    }
    (out / "metrics.json").write_text(dumps_metrics(metrics))
    write_confusion_csv(pooled, out / "confusion.csv")
    if curve is not None:
        write_trimap_csv(curve, out / "trimap.csv")
        if args.plot:
            plot_trimap({"prediction": curve}, out / "trimap.png")
    log.info(
        "OA %.4f  CA %.4f  JI %.4f  (%d images)",
        metrics["overall_accuracy"],
        metrics["class_accuracy"],
        metrics["jaccard_index"],
        len(gt_files),
    )
    return 0


def cmd_protocol(args) -> int:
    config = load_config(args.config)
    workers = resolve_workers(args.workers)
    report = run_fold_protocol(
        config,
        args.out,
        cache_dir=args.cache_dir,
        workers=workers,
        tune=args.tune,
        plot=args.plot,
    )
    log.info(
        "%s: OA %.4f  CA %.4f  JI %.4f",
        config.descriptor,
        report["overall_accuracy"],
        report["class_accuracy"],
        report["jaccard_index"],
    )
    return 0


def cmd_compare(args) -> int:
    cmp = compare_reports(args.report_a, args.report_b)
    sys.stdout.write(render_comparison(cmp))
    if args.out:
        Path(args.out).write_text(dumps_metrics(cmp))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    except (DataError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return 3


def entrypoint() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entrypoint()
