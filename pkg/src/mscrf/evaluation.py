"""Segmentation scoring: confusion counts, summary metrics, boundary curves.

Outdoor-style datasets reserve a void id whose pixels never count; indoor
datasets score everything and treat background as one more class.  All
summary metrics derive from a single pooled confusion matrix:

    overall accuracy  = sum_k c_kk / sum_kl c_kl
    class accuracy    = mean_k c_kk / G_k           (rows with G_k > 0)
    Jaccard index     = mean_k c_kk / (G_k + P_k - c_kk)   (classes present)

with G_k the ground-truth count and P_k the prediction count of class k.
The trimap curve restricts scoring to bands of growing width around
ground-truth label boundaries, and the paired t-test compares two systems
on per-image score pairs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_cdt
from scipy.special import betainc

from .crf import Labeling
from .errors import (
    EmptyBand,
    EmptyMatrix,
    LengthMismatch,
    ShapeMismatch,
    UnknownLabel,
)
from .imageio import MODE_INDOOR, DatasetManifest, LabelMask

TRIMAP_RADII = tuple(range(1, 11))


@dataclass(frozen=True)
class ConfusionMatrix:
    """Pooled confusion counts; rows are ground truth, columns predictions."""

    counts: np.ndarray
    class_ids: tuple[int, ...]

    def __post_init__(self):
        arr = np.array(self.counts, dtype=np.int64)
        c = len(self.class_ids)
        if arr.shape != (c, c):
            raise ShapeMismatch(
                f"confusion counts {arr.shape} disagree with {c} class ids"
            )
        arr.flags.writeable = False
        object.__setattr__(self, "counts", arr)
        object.__setattr__(self, "class_ids", tuple(int(i) for i in self.class_ids))

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.class_ids != other.class_ids:
            raise ShapeMismatch("cannot add confusion matrices over different classes")
        return ConfusionMatrix(self.counts + other.counts, self.class_ids)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def scored_class_ids(manifest: DatasetManifest) -> tuple[int, ...]:
    """Class ids that participate in scoring, in matrix order."""
    ids = list(range(manifest.n_labels))
    if manifest.mode == MODE_INDOOR:
        ids.append(manifest.background_id)
    return tuple(ids)


def empty_confusion(manifest: DatasetManifest) -> ConfusionMatrix:
    ids = scored_class_ids(manifest)
    return ConfusionMatrix(np.zeros((len(ids), len(ids)), dtype=np.int64), ids)


def accumulate_confusion(
    pred: Labeling, gt: LabelMask, manifest: DatasetManifest
) -> ConfusionMatrix:
    """Confusion counts of one prediction against its ground truth.

    Void pixels (outdoor mode) are skipped entirely; indoor background is
    scored as the last class.  Because scored ids are contiguous from 0,
    matrix position equals class id.
    """
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise ShapeMismatch(
            f"prediction {pred.height}x{pred.width} and ground truth "
            f"{gt.height}x{gt.width} disagree"
        )
    ids = scored_class_ids(manifest)
    c = len(ids)
    scored = gt.scored()
    g = gt.labels[scored].astype(np.int64)
    p = pred.labels[scored].astype(np.int64)
    if g.size:
        if g.min() < 0 or g.max() >= c:
            raise UnknownLabel("ground truth contains out-of-range scored ids")
        if p.min() < 0 or p.max() >= c:
            raise UnknownLabel("prediction contains ids outside the scored classes")
    counts = np.bincount(g * c + p, minlength=c * c).reshape(c, c)
    return ConfusionMatrix(counts, ids)


def _require_nonempty(cm: ConfusionMatrix):
    if cm.total == 0:
        raise EmptyMatrix("confusion matrix has zero scored pixels")


def overall_accuracy(cm: ConfusionMatrix) -> float:
    """Fraction of scored pixels labelled correctly."""
    _require_nonempty(cm)
    return float(np.trace(cm.counts) / cm.total)


def per_class_accuracy(cm: ConfusionMatrix) -> dict[int, float]:
    """Recall of every class with at least one ground-truth pixel."""
    _require_nonempty(cm)
    g = cm.counts.sum(axis=1)
    return {
        cid: float(cm.counts[k, k] / g[k])
        for k, cid in enumerate(cm.class_ids)
        if g[k] > 0
    }


def class_accuracy(cm: ConfusionMatrix) -> float:
    """Mean per-class recall over classes present in the ground truth."""
    per = per_class_accuracy(cm)
    if not per:
        raise EmptyMatrix("no class has ground-truth pixels")
    return float(np.mean(list(per.values())))


def per_class_jaccard(cm: ConfusionMatrix) -> dict[int, float]:
    """Intersection-over-union of every class present in truth or prediction."""
    _require_nonempty(cm)
    g = cm.counts.sum(axis=1)
    p = cm.counts.sum(axis=0)
    out = {}
    for k, cid in enumerate(cm.class_ids):
        denom = g[k] + p[k] - cm.counts[k, k]
        if denom > 0:
            out[cid] = float(cm.counts[k, k] / denom)
    return out


def jaccard_index(cm: ConfusionMatrix) -> float:
    """Mean per-class intersection-over-union (absent classes excluded)."""
    per = per_class_jaccard(cm)
    if not per:
        raise EmptyMatrix("no class appears in truth or prediction")
    return float(np.mean(list(per.values())))


def boundary_pixels(gt: LabelMask) -> np.ndarray:
    """Scored pixels with a 4-neighbour of a different scored label."""
    lab = gt.labels
    scored = gt.scored()
    b = np.zeros_like(scored)
    h = scored[:, 1:] & scored[:, :-1] & (lab[:, 1:] != lab[:, :-1])
    b[:, 1:] |= h
    b[:, :-1] |= h
    v = scored[1:, :] & scored[:-1, :] & (lab[1:, :] != lab[:-1, :])
    b[1:, :] |= v
    b[:-1, :] |= v
    return b


@dataclass(frozen=True)
class TrimapCurve:
    """Accuracy restricted to bands of growing radius around boundaries."""

    radii: tuple[int, ...]
    accuracy: tuple[float, ...]
    correct: tuple[int, ...]
    total: tuple[int, ...]


def trimap_curve(preds, gts, radii=TRIMAP_RADII) -> TrimapCurve:
    """Pooled boundary-band accuracy over a list of (pred, gt) pairs.

    The band of radius r contains every scored pixel whose Chebyshev
    distance to the nearest ground-truth boundary pixel is at most r - 1,
    so radius 1 scores exactly the boundary pixels themselves and the
    bands grow one pixel ring at a time.  Images without any label
    boundary contribute nothing; if no image has one, EmptyBand is raised.
    """
    radii = tuple(int(r) for r in radii)
    if not radii or min(radii) < 1:
        raise ValueError("radii must be positive integers")
    correct = np.zeros(len(radii), dtype=np.int64)
    total = np.zeros(len(radii), dtype=np.int64)

    preds = list(preds)
    gts = list(gts)
    if len(preds) != len(gts):
        raise LengthMismatch("prediction and ground-truth lists differ in length")
    for pred, gt in zip(preds, gts):
        if (pred.height, pred.width) != (gt.height, gt.width):
            raise ShapeMismatch("prediction and ground truth disagree in size")
        b = boundary_pixels(gt)
        if not b.any():
            continue
        dist = distance_transform_cdt(~b, metric="chessboard")
        scored = gt.scored()
        hits = pred.labels == gt.labels
        for k, r in enumerate(radii):
            band = scored & (dist <= r - 1)
            total[k] += int(band.sum())
            correct[k] += int((hits & band).sum())

    if int(total.max(initial=0)) == 0:
        raise EmptyBand("no ground-truth boundaries anywhere in the dataset")
    accuracy = tuple(float(c) / t if t else float("nan") for c, t in zip(correct, total))
    return TrimapCurve(radii, accuracy, tuple(map(int, correct)), tuple(map(int, total)))


def paired_t_test(a, b) -> tuple[float, float]:
    """Two-sided paired t-test on per-image score pairs.

    Returns (t, p).  Degenerate cases follow the usual conventions: all
    differences zero gives (0, 1); a non-zero mean with zero spread gives
    (+/-inf, 0).  The p-value uses the regularised incomplete beta
    function, p = I_{df/(df+t^2)}(df/2, 1/2).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"paired scores disagree: {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise LengthMismatch("paired t-test needs at least two pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return float(np.copysign(np.inf, mean)), 0.0
    t = mean / (sd / np.sqrt(n))
    df = n - 1
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    return float(t), p


# --- report files ---------------------------------------------------------


def dumps_metrics(doc: dict) -> str:
    """Deterministic JSON rendering used for all metric files."""
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_confusion_csv(cm: ConfusionMatrix, path: str | Path) -> None:
    lines = ["gt\\pred," + ",".join(str(c) for c in cm.class_ids)]
    for k, cid in enumerate(cm.class_ids):
        lines.append(f"{cid}," + ",".join(str(int(v)) for v in cm.counts[k]))
    Path(path).write_text("\n".join(lines) + "\n")


def write_trimap_csv(curve: TrimapCurve, path: str | Path) -> None:
    lines = ["radius,accuracy,correct,total"]
    for r, acc, c, t in zip(curve.radii, curve.accuracy, curve.correct, curve.total):
        lines.append(f"{r},{acc!r},{c},{t}")
    Path(path).write_text("\n".join(lines) + "\n")


def plot_trimap(curves: dict[str, TrimapCurve], path: str | Path) -> None:
    """Render one or more trimap curves to a PNG (headless backend)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, curve in curves.items():
        ax.plot(curve.radii, curve.accuracy, marker="o", label=name)
    ax.set_xlabel("band radius (px)")
    ax.set_ylabel("accuracy in band")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
