"""Patch classification and per-pixel posterior fields.

One sparse logistic regression head is trained per class (one-vs-all, L1
penalty on the weights, unpenalised bias).  At inference each patch gets a
per-class sigmoid score; pixel posteriors are the distance-weighted average
of the scores of every patch whose window contains the pixel.  Indoor
datasets additionally apply a background rule that routes low-confidence
pixels to an extra background class, and multi-descriptor systems fuse
their fields by averaging probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatch,
    ShapeMismatch,
    SingleClassData,
    UncoveredPixel,
    WrongMode,
)
from .imageio import MODE_INDOOR, MODE_OUTDOOR, LabelMask
from .patches import PatchSpec, clipped_window

#: Indoor confidence threshold: below it a pixel is called background.
BACKGROUND_THRESHOLD = 0.5

SLR_PENALTY = 1e-4
SLR_MAX_ITER = 500
SLR_TOL = 1e-7


@dataclass(frozen=True)
class LinearClassifier:
    """One-vs-all linear heads: class ids, weights (C, D) and biases (C,)."""

    class_ids: tuple[int, ...]
    weights: np.ndarray
    biases: np.ndarray
    penalty: float = SLR_PENALTY
    #: Per-head training objective traces (diagnostic; dropped on save/load).
    objective_traces: tuple[np.ndarray, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        W = np.array(self.weights, dtype=np.float64)
        b = np.array(self.biases, dtype=np.float64)
        if W.ndim != 2 or b.shape != (W.shape[0],) or len(self.class_ids) != W.shape[0]:
            raise ShapeMismatch("classifier weights, biases and class ids disagree")
        W.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "biases", b)
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


def _logistic_objective(scores_z: np.ndarray) -> float:
    """Mean logistic loss given margin values z_i * s_i (stable log1p-exp)."""
    return float(np.logaddexp(0.0, -scores_z).mean())


def _soft_threshold(v: np.ndarray, t: float) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def _fit_one_head(
    X: np.ndarray, z: np.ndarray, penalty: float, max_iter: int, tol: float
) -> tuple[np.ndarray, float, np.ndarray]:
    """L1-penalised logistic regression by proximal gradient with backtracking.

    Minimises  mean_i log(1 + exp(-z_i (w.x_i + b))) + penalty * ||w||_1
    over (w, b); the bias is not penalised.  Backtracking halves the step
    until the smooth part satisfies its quadratic upper bound, which makes
    the full objective non-increasing across iterations.

    Matrix products run in the dtype of ``X`` so float32 feature matrices
    are never copied up to float64; the objective bookkeeping itself stays
    in float64.
    """
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    step = 1.0

    def _scores(weights: np.ndarray, bias: float) -> np.ndarray:
        return (X @ weights.astype(X.dtype, copy=False)).astype(np.float64) + bias

    scores = np.zeros(n)  # X @ w + b
    margins = z * scores
    smooth = _logistic_objective(margins)
    trace = [smooth + penalty * np.abs(w).sum()]

    for _ in range(max_iter):
        # gradient of the smooth part
        sig = 1.0 / (1.0 + np.exp(margins))  # sigmoid(-margin)
        zs = (z * sig).astype(X.dtype, copy=False)
        gw = -(X.T @ zs).astype(np.float64) / n
        gb = -float((z * sig).mean())

        while True:
            w_new = _soft_threshold(w - step * gw, step * penalty)
            b_new = b - step * gb
            scores_new = _scores(w_new, b_new)
            margins_new = z * scores_new
            smooth_new = _logistic_objective(margins_new)
            dw = w_new - w
            db = b_new - b
            bound = (
                smooth
                + float(gw @ dw) + gb * db
                + (float(dw @ dw) + db * db) / (2.0 * step)
            )
            if smooth_new <= bound + 1e-12 or step < 1e-12:
                break
            step *= 0.5

        w, b, scores, margins, smooth = w_new, b_new, scores_new, margins_new, smooth_new
        obj = smooth + penalty * np.abs(w).sum()
        trace.append(obj)
        if abs(trace[-2] - obj) <= tol * max(1.0, abs(trace[-2])):
            break
        step *= 1.2  # let the step recover between iterations

    return w, b, np.asarray(trace)


def train_slr(
    features: np.ndarray,
    labels: np.ndarray,
    class_ids,
    penalty: float = SLR_PENALTY,
    max_iter: int = SLR_MAX_ITER,
    tol: float = SLR_TOL,
) -> LinearClassifier:
    """Train the one-vs-all sparse logistic regression bank.

    Parameters
    ----------
    features : (N, D) patch codes.
    labels : (N,) integer class ids, each appearing in ``class_ids``.
    class_ids : the full ordered class list; one head is trained per id,
        including ids with no positives (their head sees all-negative data).

    Training data must contain at least two distinct classes.  Features
    may be float32 (kept as-is, to bound memory on wide codes) or any
    other dtype (converted to float64).
    """
    X = np.asarray(features)
    if X.dtype not in (np.float32, np.float64):
        X = X.astype(np.float64)
    y = np.asarray(labels)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ShapeMismatch(f"features {X.shape} and labels {y.shape} disagree")
    if np.unique(y).size < 2:
        raise SingleClassData("training data contains fewer than two classes")

    class_ids = tuple(int(c) for c in class_ids)
    W = np.empty((len(class_ids), X.shape[1]))
    b = np.empty(len(class_ids))
    traces = []
    for i, cid in enumerate(class_ids):
        z = np.where(y == cid, 1.0, -1.0)
        W[i], b[i], trace = _fit_one_head(X, z, penalty, max_iter, tol)
        traces.append(trace)
    return LinearClassifier(class_ids, W, b, penalty, objective_traces=tuple(traces))


def patch_probability(clf: LinearClassifier, features: np.ndarray) -> np.ndarray:
    """Per-class sigmoid scores, (C,) for one code or (N, C) for a batch.

    Scores are independent one-vs-all probabilities in (0, 1); they do not
    sum to one across classes.
    """
    X = np.asarray(features)
    if X.dtype not in (np.float32, np.float64):
        X = X.astype(np.float64)
    single = X.ndim == 1
    if single:
        X = X[None]
    if X.shape[1] != clf.dim:
        raise DimensionMismatch(
            f"features have dim {X.shape[1]}, classifier expects {clf.dim}"
        )
    scores = (X @ clf.weights.T.astype(X.dtype, copy=False)).astype(np.float64) + clf.biases
    probs = 1.0 / (1.0 + np.exp(-scores))
    return probs[0] if single else probs


@dataclass(frozen=True)
class UnaryField:
    """Per-pixel class probabilities (H, W, C) with their class ids.

    ``background_index`` is the position of the appended background plane
    when the indoor rule has been applied, else None.
    """

    probs: np.ndarray
    class_ids: tuple[int, ...]
    mode: str
    background_index: int | None = None

    def __post_init__(self):
        arr = np.array(self.probs, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != len(self.class_ids):
            raise ShapeMismatch(
                f"field shape {arr.shape} disagrees with {len(self.class_ids)} classes"
            )
        arr.flags.writeable = False
        object.__setattr__(self, "probs", arr)
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))

    @property
    def height(self) -> int:
        return self.probs.shape[0]

    @property
    def width(self) -> int:
        return self.probs.shape[1]

    @property
    def n_classes(self) -> int:
        return self.probs.shape[2]


def _patch_weight_block(spec: PatchSpec, width: int, height: int):
    """Clipped window plus the Gaussian distance weights over that window.

    The weight of patch p at pixel i is exp(-d^2 / (2 sigma_p^2)) with d
    the Euclidean centre distance and sigma_p a quarter of the window
    side, so small patches are sharply peaked and large ones vote broadly.
    """
    x0, y0, x1, y1 = clipped_window(spec, width, height)
    if x0 >= x1 or y0 >= y1:
        return None
    cx, cy = spec.center
    sigma = spec.side / 4.0
    xs = np.arange(x0, x1) - cx
    ys = np.arange(y0, y1) - cy
    d2 = ys[:, None] ** 2 + xs[None, :] ** 2
    return (x0, y0, x1, y1), np.exp(-d2 / (2.0 * sigma * sigma))


def aggregate_pixel_posteriors(
    patch_probs: np.ndarray,
    specs,
    width: int,
    height: int,
    class_ids,
    mode: str,
) -> UnaryField:
    """Blend patch scores into a dense per-pixel probability field.

    Every patch votes on the pixels inside its (clipped) window with a
    Gaussian weight in the distance to the patch centre; each pixel's
    posterior is the weight-normalised average.  Raises UncoveredPixel if
    some pixel receives no vote at all.
    """
    P = np.asarray(patch_probs, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != len(specs):
        raise ShapeMismatch(
            f"patch probabilities {P.shape} disagree with {len(specs)} patches"
        )
    acc = np.zeros((height, width, P.shape[1]))
    wsum = np.zeros((height, width))
    for probs, spec in zip(P, specs):
        block = _patch_weight_block(spec, width, height)
        if block is None:
            continue
        (x0, y0, x1, y1), w = block
        acc[y0:y1, x0:x1] += w[:, :, None] * probs
        wsum[y0:y1, x0:x1] += w
    if np.any(wsum == 0.0):
        n_bad = int((wsum == 0.0).sum())
        raise UncoveredPixel(f"{n_bad} pixels are covered by no patch window")
    return UnaryField(acc / wsum[:, :, None], tuple(class_ids), mode)


def apply_background_rule(
    unary: UnaryField,
    threshold: float = BACKGROUND_THRESHOLD,
    background_id: int | None = None,
) -> UnaryField:
    """Append the indoor background plane as a constant-threshold pseudo-class.

    The background plane holds ``threshold`` everywhere, so an argmax over
    the extended field picks a real class only when its probability
    strictly exceeds the threshold (ties go to background).  Existing
    class probabilities are untouched.  ``background_id`` defaults to one
    past the largest class id.
    """
    if unary.mode != MODE_INDOOR:
        raise WrongMode(f"background rule applies to {MODE_INDOOR!r} fields only")
    if unary.background_index is not None:
        raise WrongMode("background rule was already applied to this field")
    if background_id is None:
        background_id = max(unary.class_ids) + 1
    plane = np.full((unary.height, unary.width, 1), float(threshold))
    probs = np.concatenate([unary.probs, plane], axis=2)
    return UnaryField(
        probs,
        unary.class_ids + (int(background_id),),
        unary.mode,
        background_index=unary.n_classes,
    )


def late_fuse(fields) -> UnaryField:
    """Average the probability planes of several unary fields.

    All fields must agree on geometry, class list, mode and background
    state; the fused probability is the arithmetic mean, which keeps the
    operation commutative and idempotent on identical inputs.
    """
    fields = list(fields)
    if not fields:
        raise ShapeMismatch("nothing to fuse")
    first = fields[0]
    for f in fields[1:]:
        if f.probs.shape != first.probs.shape or f.class_ids != first.class_ids:
            raise ShapeMismatch("fused fields disagree in shape or class layout")
        if f.mode != first.mode or f.background_index != first.background_index:
            raise ShapeMismatch("fused fields disagree in mode or background state")
    stacked = np.mean([f.probs for f in fields], axis=0)
    return UnaryField(stacked, first.class_ids, first.mode, first.background_index)


def patch_majority_labels(mask: LabelMask, specs) -> np.ndarray:
    """Majority ground-truth label inside each patch window, (P,) int32.

    Ties break toward the smaller label id.  Returned values may include
    the reserved void/background ids; training drops those patches.
    """
    labels = mask.labels
    out = np.empty(len(specs), dtype=np.int32)
    for i, spec in enumerate(specs):
        x0, y0, x1, y1 = clipped_window(spec, mask.width, mask.height)
        window = labels[y0:y1, x0:x1]
        counts = np.bincount(window.ravel())
        out[i] = int(np.argmax(counts))
    return out


def training_patch_set(mask: LabelMask, specs) -> tuple[np.ndarray, np.ndarray]:
    """Indices of trainable patches and their labels for one image.

    Patches whose majority label is void (outdoor) or background (indoor)
    carry no class supervision and are excluded.
    """
    majority = patch_majority_labels(mask, specs)
    reserved = [v for v in (mask.void_id, mask.background_id) if v is not None]
    keep = ~np.isin(majority, reserved)
    return np.flatnonzero(keep), majority[keep]


def select_mode_checked(mode: str) -> str:
    if mode not in (MODE_OUTDOOR, MODE_INDOOR):
        raise WrongMode(f"unknown dataset mode {mode!r}")
    return mode
