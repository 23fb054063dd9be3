"""Experiment configs, the five-fold protocol, caching, and comparisons.

A JSON config names a dataset manifest, a descriptor variant (for example
``SIFT_rgbn`` or a fused pair ``SIFT_rgbn+COL_rgb``), the CRF settings, and
optional training overrides.  The protocol runs five rotations: rotation r
tests on fold r, holds out fold (r+1) mod 5 for validation (used when
tuning the smoothing weight), and trains on the remaining three folds.
Scores are pooled over all rotations into a single report.

Unary probability fields depend only on the trained model and the image --
not on the CRF weight or pairwise mode -- so they can be cached on disk
keyed by the unary-relevant part of the config and reused bit-exactly
across CRF sweeps.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bundle import ModelBundle, TrainSettings, predict_unary_field, train_bundle
from .channels import CHANNEL_SETS
from .classify import UnaryField
from .crf import (
    LAMBDA_DEFAULT,
    PAIRWISE_CHANNELS,
    PAIRWISE_VIS,
    Labeling,
    alpha_expansion,
    argmax_labeling,
    build_energy_model,
)
from .descriptors import DESCRIPTOR_KINDS, descriptor_dim
from .errors import ConfigError, FoldMismatch, EmptyBand, ManifestError
from .evaluation import (
    TRIMAP_RADII,
    accumulate_confusion,
    class_accuracy,
    dumps_metrics,
    empty_confusion,
    jaccard_index,
    overall_accuracy,
    paired_t_test,
    per_class_accuracy,
    per_class_jaccard,
    plot_trimap,
    scored_class_ids,
    trimap_curve,
    write_confusion_csv,
    write_trimap_csv,
    TrimapCurve,
)
from .imageio import (
    MODE_INDOOR,
    DatasetManifest,
    ManifestEntry,
    load_image_pair,
    load_manifest,
    write_mask,
)

WORKERS_ENV = "MSCRF_WORKERS"
DEFAULT_TUNE_LAMS = (0.0, 0.5, 1.0, 2.0, 5.0, 10.0)

#: The named descriptor variants and their raw dimensionalities.
DESCRIPTOR_VARIANTS = {
    "COL_rgb": 96,
    "COL_rgbn": 128,
    "COL_p1234": 128,
    "SIFT_l": 128,
    "SIFT_n": 128,
    "SIFT_p1": 128,
    "SIFT_rgb": 384,
    "SIFT_rgbn": 512,
    "SIFT_p1234": 512,
}


def parse_descriptor_spec(spec: str) -> tuple[tuple[str, tuple[str, ...]], ...]:
    """Parse a descriptor spec like ``SIFT_rgbn`` or ``COL_rgb+SIFT_l``.

    Each ``+``-separated term is KIND_subset, with KIND one of SIFT/COL and
    subset one of rgb, rgbn, l, n, p1, p1234.  Returns (kind, channel_set)
    pairs in order.
    """
    if not spec or not isinstance(spec, str):
        raise ConfigError("descriptor spec must be a non-empty string")
    streams = []
    for term in spec.split("+"):
        term = term.strip()
        kind, _, subset = term.partition("_")
        if kind not in DESCRIPTOR_KINDS or subset not in CHANNEL_SETS:
            raise ConfigError(
                f"unknown descriptor variant {term!r}; expected KIND_subset with "
                f"KIND in {DESCRIPTOR_KINDS} and subset in {sorted(CHANNEL_SETS)}"
            )
        streams.append((kind, CHANNEL_SETS[subset]))
    return tuple(streams)


def descriptor_spec_dims(spec: str) -> tuple[int, ...]:
    """Raw descriptor dimensionality of each stream of a spec."""
    return tuple(descriptor_dim(kind, cs) for kind, cs in parse_descriptor_spec(spec))


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one protocol run depends on."""

    manifest: Path
    descriptor: str
    lam: float = LAMBDA_DEFAULT
    pairwise_mode: str = PAIRWISE_VIS
    threshold: float = 0.5
    seed: int = 0
    pca_dim: int = TrainSettings.pca_dim
    gmm_components: int = TrainSettings.gmm_components
    descriptor_budget: int = TrainSettings.descriptor_budget
    channel_pixel_budget: int = TrainSettings.channel_pixel_budget
    slr_penalty: float = TrainSettings.slr_penalty
    slr_max_iter: int = TrainSettings.slr_max_iter
    slr_tol: float = TrainSettings.slr_tol
    trimap_radii: tuple[int, ...] = TRIMAP_RADII
    tune_lams: tuple[float, ...] = DEFAULT_TUNE_LAMS

    def __post_init__(self):
        parse_descriptor_spec(self.descriptor)  # validates
        if self.pairwise_mode not in PAIRWISE_CHANNELS:
            raise ConfigError(
                f"pairwise_mode {self.pairwise_mode!r} not in {sorted(PAIRWISE_CHANNELS)}"
            )
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie strictly between 0 and 1")
        for name in ("pca_dim", "gmm_components", "descriptor_budget",
                     "channel_pixel_budget", "slr_max_iter"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if any(int(r) < 1 for r in self.trimap_radii):
            raise ConfigError("trimap radii must be positive integers")
        object.__setattr__(self, "manifest", Path(self.manifest))
        object.__setattr__(self, "trimap_radii", tuple(int(r) for r in self.trimap_radii))
        object.__setattr__(self, "tune_lams", tuple(float(l) for l in self.tune_lams))


_CONFIG_KEYS = {
    "manifest", "descriptor", "lam", "pairwise_mode", "threshold", "seed",
    "pca_dim", "gmm_components", "descriptor_budget", "channel_pixel_budget",
    "slr_penalty", "slr_max_iter", "slr_tol", "trimap_radii", "tune_lams",
}


def load_config(path: str | Path) -> ExperimentConfig:
    """Read and validate an experiment config JSON file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"config {path} has unknown keys: {sorted(unknown)}")
    for key in ("manifest", "descriptor"):
        if key not in raw:
            raise ConfigError(f"config {path} is missing required key {key!r}")
    raw = dict(raw)
    raw["manifest"] = (path.parent / raw["manifest"]).resolve()
    if "trimap_radii" in raw:
        raw["trimap_radii"] = tuple(raw["trimap_radii"])
    if "tune_lams" in raw:
        raw["tune_lams"] = tuple(raw["tune_lams"])
    try:
        return ExperimentConfig(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config {path} is invalid: {exc}") from exc


def base_train_settings(config: ExperimentConfig, seed: int) -> TrainSettings:
    """Training knobs from a config, with an explicit seed."""
    return TrainSettings(
        pca_dim=config.pca_dim,
        gmm_components=config.gmm_components,
        descriptor_budget=config.descriptor_budget,
        channel_pixel_budget=config.channel_pixel_budget,
        slr_penalty=config.slr_penalty,
        slr_max_iter=config.slr_max_iter,
        slr_tol=config.slr_tol,
        threshold=config.threshold,
        seed=seed,
    )


def train_settings(config: ExperimentConfig, rotation: int) -> TrainSettings:
    """Training knobs for one rotation (each rotation gets its own seed)."""
    return base_train_settings(config, config.seed * 1000 + rotation)


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def unary_cache_key(
    config: ExperimentConfig, manifest_sha: str, train_folds
) -> str:
    """Digest of everything the unary fields depend on.

    The CRF weight, pairwise mode, and evaluation knobs are deliberately
    excluded: configs differing only in those reuse each other's cached
    fields.
    """
    doc = {
        "manifest_sha": manifest_sha,
        "descriptor": config.descriptor,
        "threshold": config.threshold,
        "seed": config.seed,
        "pca_dim": config.pca_dim,
        "gmm_components": config.gmm_components,
        "descriptor_budget": config.descriptor_budget,
        "channel_pixel_budget": config.channel_pixel_budget,
        "slr_penalty": config.slr_penalty,
        "slr_max_iter": config.slr_max_iter,
        "slr_tol": config.slr_tol,
        "train_folds": sorted(int(f) for f in train_folds),
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:24]


def config_digest(config: ExperimentConfig, manifest_sha: str) -> str:
    doc = {
        "manifest_sha": manifest_sha,
        "descriptor": config.descriptor,
        "lam": config.lam,
        "pairwise_mode": config.pairwise_mode,
        "threshold": config.threshold,
        "seed": config.seed,
        "pca_dim": config.pca_dim,
        "gmm_components": config.gmm_components,
        "descriptor_budget": config.descriptor_budget,
        "channel_pixel_budget": config.channel_pixel_budget,
        "slr_penalty": config.slr_penalty,
        "slr_max_iter": config.slr_max_iter,
        "slr_tol": config.slr_tol,
        "trimap_radii": list(config.trimap_radii),
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:24]


def resolve_workers(explicit: int | None = None) -> int:
    """Worker count: explicit CLI value, else the MSCRF_WORKERS env, else 1."""
    if explicit is not None:
        if explicit < 1:
            raise ConfigError("worker count must be a positive integer")
        return int(explicit)
    raw = os.environ.get(WORKERS_ENV)
    if raw is None or raw == "":
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV}={raw!r} is not an integer") from None
    if value < 1:
        raise ConfigError(f"{WORKERS_ENV} must be a positive integer")
    return value


# --- unary-field computation (optionally parallel, optionally cached) --------

_WORKER_BUNDLE: ModelBundle | None = None


def _init_worker(bundle: ModelBundle) -> None:
    global _WORKER_BUNDLE
    _WORKER_BUNDLE = bundle


def _predict_probs_task(paths: tuple[str, str | None]) -> np.ndarray:
    rgb, nir = paths
    img = load_image_pair(rgb, nir)
    return predict_unary_field(_WORKER_BUNDLE, img).probs


def _field_from_probs(probs: np.ndarray, manifest: DatasetManifest) -> UnaryField:
    ids = scored_class_ids(manifest)
    bg_index = len(ids) - 1 if manifest.mode == MODE_INDOOR else None
    return UnaryField(probs, ids, manifest.mode, background_index=bg_index)


def compute_unary_fields(
    bundle: ModelBundle,
    entries,
    manifest: DatasetManifest,
    cache_dir: Path | None = None,
    cache_key: str = "",
    workers: int = 1,
) -> list[UnaryField]:
    """Unary fields for a list of manifest entries, with optional caching.

    Cached fields are stored per image as float64 arrays and reload
    bit-exactly, so a cache hit is indistinguishable from recomputation.
    """
    entries = list(entries)
    probs_list: list[np.ndarray | None] = [None] * len(entries)
    pending: list[int] = []

    key_dir = None
    if cache_dir is not None:
        key_dir = Path(cache_dir) / "unary" / cache_key
        key_dir.mkdir(parents=True, exist_ok=True)
        for i, entry in enumerate(entries):
            hit = key_dir / f"{entry.image_id}.npz"
            if hit.exists():
                with np.load(hit, allow_pickle=False) as data:
                    probs_list[i] = data["probs"]
            else:
                pending.append(i)
    else:
        pending = list(range(len(entries)))

    if pending:
        tasks = [
            (str(entries[i].rgb), None if entries[i].nir is None else str(entries[i].nir))
            for i in pending
        ]
        if workers > 1 and len(pending) > 1:
            with ProcessPoolExecutor(
                max_workers=workers, initializer=_init_worker, initargs=(bundle,)
            ) as pool:
                results = list(pool.map(_predict_probs_task, tasks))
        else:
            _init_worker(bundle)
            results = [_predict_probs_task(t) for t in tasks]
        for i, probs in zip(pending, results):
            probs_list[i] = probs
            if key_dir is not None:
                with open(key_dir / f"{entries[i].image_id}.npz", "wb") as fh:
                    np.savez(fh, probs=probs)

    return [_field_from_probs(p, manifest) for p in probs_list]


def _crf_labeling(
    field: UnaryField, entry: ManifestEntry, lam: float, pairwise_mode: str
) -> Labeling:
    init = argmax_labeling(field)
    if lam == 0.0:
        return init
    img = load_image_pair(entry.rgb, entry.nir)
    model = build_energy_model(field, img, lam=lam, pairwise_mode=pairwise_mode)
    return alpha_expansion(model, init=init)


# --- the protocol -------------------------------------------------------------

ALL_FOLDS = (0, 1, 2, 3, 4)


def run_fold_protocol(
    config: ExperimentConfig,
    out_dir: str | Path,
    cache_dir: str | Path | None = None,
    workers: int = 1,
    tune: bool = False,
    plot: bool = False,
) -> dict:
    """Run the full five-rotation protocol and write a report directory.

    Writes ``metrics.json`` (deterministic byte-for-byte for a fixed
    config and dataset), ``confusion.csv``, ``trimap.csv``, one predicted
    mask PNG per test image under ``preds/``, and optionally a trimap
    plot.  Returns the metrics document as a dict.
    """
    manifest = load_manifest(config.manifest)
    folds_present = {e.fold for e in manifest.entries}
    if folds_present != set(ALL_FOLDS):
        raise ManifestError(
            f"five-fold protocol needs every fold 0..4 populated, got {sorted(folds_present)}"
        )
    for e in manifest.entries:
        if e.mask is None:
            raise ManifestError(f"protocol entry {e.image_id!r} has no mask")

    manifest_sha = _sha256_file(config.manifest)
    streams = parse_descriptor_spec(config.descriptor)
    out = Path(out_dir)
    preds_dir = out / "preds"
    preds_dir.mkdir(parents=True, exist_ok=True)
    cache = None if cache_dir is None else Path(cache_dir)

    pooled = empty_confusion(manifest)
    rotations = []
    per_image: list[tuple[str, float]] = []
    trimap_pairs: list[tuple[Labeling, object]] = []

    for r in ALL_FOLDS:
        val_fold = (r + 1) % 5
        train_folds = tuple(f for f in ALL_FOLDS if f not in (r, val_fold))
        bundle = train_bundle(manifest, train_folds, streams, train_settings(config, r))
        key = unary_cache_key(config, manifest_sha, train_folds)

        lam_r = config.lam
        if tune:
            lam_r = _tune_lambda(
                config, bundle, manifest, val_fold, key, cache, workers
            )

        test_entries = manifest.fold_entries([r])
        fields = compute_unary_fields(
            bundle, test_entries, manifest, cache, key, workers
        )
        rot_cm = empty_confusion(manifest)
        for entry, field in zip(test_entries, fields):
            labeling = _crf_labeling(field, entry, lam_r, config.pairwise_mode)
            write_mask(labeling.labels, preds_dir / f"{entry.image_id}.png")
            gt = entry.load_mask(manifest)
            cm = accumulate_confusion(labeling, gt, manifest)
            rot_cm = rot_cm + cm
            if cm.total > 0:
                per_image.append((entry.image_id, overall_accuracy(cm)))
            trimap_pairs.append((labeling, gt))
        pooled = pooled + rot_cm
        rotations.append(
            {
                "test_fold": r,
                "validation_fold": val_fold,
                "train_folds": list(train_folds),
                "lam": lam_r,
                "n_images": len(test_entries),
                "confusion": rot_cm.counts.tolist(),
            }
        )

    curve: TrimapCurve | None
    try:
        curve = trimap_curve(
            [p for p, _ in trimap_pairs],
            [g for _, g in trimap_pairs],
            config.trimap_radii,
        )
    except EmptyBand:
        curve = None

    metrics = {
        "config": {
            "descriptor": config.descriptor,
            "lam": config.lam,
            "pairwise_mode": config.pairwise_mode,
            "threshold": config.threshold,
            "seed": config.seed,
            "pca_dim": config.pca_dim,
            "gmm_components": config.gmm_components,
            "tuned": tune,
        },
        "config_digest": config_digest(config, manifest_sha),
        "manifest_sha": manifest_sha,
        "mode": manifest.mode,
        "labels": list(manifest.label_names),
        "n_images": len(manifest.entries),
        "overall_accuracy": overall_accuracy(pooled),
        "class_accuracy": class_accuracy(pooled),
        "jaccard_index": jaccard_index(pooled),
        "per_class_accuracy": {str(k): v for k, v in per_class_accuracy(pooled).items()},
        "per_class_jaccard": {str(k): v for k, v in per_class_jaccard(pooled).items()},
        "per_image": [[image_id, oa] for image_id, oa in per_image],
        "trimap": None
        if curve is None
        else {
            "radii": list(curve.radii),
            "accuracy": list(curve.accuracy),
            "correct": list(curve.correct),
            "total": list(curve.total),
        },
        "rotations": rotations,
    }

    (out / "metrics.json").write_text(dumps_metrics(metrics))
    write_confusion_csv(pooled, out / "confusion.csv")
    if curve is not None:
        write_trimap_csv(curve, out / "trimap.csv")
        if plot:
            plot_trimap({config.descriptor: curve}, out / "trimap.png")
    return metrics


def _tune_lambda(
    config: ExperimentConfig,
    bundle: ModelBundle,
    manifest: DatasetManifest,
    val_fold: int,
    cache_key: str,
    cache_dir: Path | None,
    workers: int,
) -> float:
    """Pick the smoothing weight with the best validation overall accuracy.

    Candidates are tried in config order; ties keep the earlier candidate,
    so the sweep is deterministic.
    """
    val_entries = manifest.fold_entries([val_fold])
    fields = compute_unary_fields(
        bundle, val_entries, manifest, cache_dir, cache_key, workers
    )
    best_lam = None
    best_oa = -1.0
    for lam in config.tune_lams:
        cm = empty_confusion(manifest)
        for entry, field in zip(val_entries, fields):
            labeling = _crf_labeling(field, entry, lam, config.pairwise_mode)
            cm = cm + accumulate_confusion(labeling, entry.load_mask(manifest), manifest)
        oa = overall_accuracy(cm) if cm.total else 0.0
        if oa > best_oa:
            best_oa = oa
            best_lam = lam
    return float(best_lam if best_lam is not None else config.lam)


# --- report comparison ---------------------------------------------------------


def load_report(report_dir: str | Path) -> dict:
    path = Path(report_dir) / "metrics.json"
    return json.loads(path.read_text())


def compare_reports(dir_a: str | Path, dir_b: str | Path) -> dict:
    """Compare two protocol reports produced on the same dataset and split.

    Raises FoldMismatch unless both reports cover the same manifest and the
    same test images in the same order; the significance test pairs the
    per-image overall accuracies.
    """
    a = load_report(dir_a)
    b = load_report(dir_b)
    if a["manifest_sha"] != b["manifest_sha"]:
        raise FoldMismatch("reports were produced on different manifests")
    ids_a = [row[0] for row in a["per_image"]]
    ids_b = [row[0] for row in b["per_image"]]
    if ids_a != ids_b:
        raise FoldMismatch("reports score different image sets; cannot pair them")
    scores_a = np.array([row[1] for row in a["per_image"]], dtype=np.float64)
    scores_b = np.array([row[1] for row in b["per_image"]], dtype=np.float64)
    t, p = paired_t_test(scores_a, scores_b)
    return {
        "a": {"dir": str(dir_a), "descriptor": a["config"]["descriptor"]},
        "b": {"dir": str(dir_b), "descriptor": b["config"]["descriptor"]},
        "metrics": {
            name: {
                "a": a[name],
                "b": b[name],
                "delta": b[name] - a[name],
            }
            for name in ("overall_accuracy", "class_accuracy", "jaccard_index")
        },
        "paired_t": {"t": t, "p": p, "n_pairs": int(scores_a.size)},
    }


def render_comparison(cmp: dict) -> str:
    """Human-readable table for one comparison dict."""
    lines = [
        f"A: {cmp['a']['descriptor']}  ({cmp['a']['dir']})",
        f"B: {cmp['b']['descriptor']}  ({cmp['b']['dir']})",
        "",
        f"{'metric':<20}{'A':>10}{'B':>10}{'B-A':>10}",
    ]
    for name, row in cmp["metrics"].items():
        lines.append(
            f"{name:<20}{row['a']:>10.4f}{row['b']:>10.4f}{row['delta']:>+10.4f}"
        )
    t = cmp["paired_t"]
    lines.append("")
    lines.append(
        f"paired t-test on per-image accuracy ({t['n_pairs']} pairs): "
        f"t = {t['t']:.4f}, p = {t['p']:.6f}"
    )
    return "\n".join(lines) + "\n"
