"""Training, persistence, and dense prediction of full segmentation models.

A model bundle holds everything inference needs: the optional channel
decorrelation transform, and one stream per descriptor (its PCA, its GMM
codebook, and its one-vs-all classifier bank).  Bundles serialise to a
single uncompressed ``.npz``-format archive whose arrays round-trip
bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .channels import ChannelPCA, PCA_CHANNELS, ensure_channels, fit_channel_pca
from .classify import (
    BACKGROUND_THRESHOLD,
    LinearClassifier,
    SLR_MAX_ITER,
    SLR_PENALTY,
    SLR_TOL,
    UnaryField,
    aggregate_pixel_posteriors,
    apply_background_rule,
    late_fuse,
    patch_probability,
    train_slr,
    training_patch_set,
)
from .descriptors import DESCRIPTOR_KINDS, compute_descriptors
from .encoding import (
    DescriptorPCA,
    GMM_COMPONENTS,
    GmmCodebook,
    PCA_DIM,
    fisher_vectors_per_patch,
    fit_descriptor_pca,
    fit_gmm,
)
from .errors import DecodeError, InsufficientSamples, ManifestError
from .imageio import MODE_INDOOR, DatasetManifest, MultiChannelImage
from .patches import grid_patches

BUNDLE_VERSION = 1


@dataclass(frozen=True)
class TrainSettings:
    """Knobs of the training pipeline with full-fidelity defaults."""

    pca_dim: int = PCA_DIM
    gmm_components: int = GMM_COMPONENTS
    descriptor_budget: int = 200_000   # max descriptors used to fit PCA / GMM
    channel_pixel_budget: int = 200_000
    slr_penalty: float = SLR_PENALTY
    slr_max_iter: int = SLR_MAX_ITER
    slr_tol: float = SLR_TOL
    threshold: float = BACKGROUND_THRESHOLD
    seed: int = 0


@dataclass(frozen=True)
class StreamModel:
    """One descriptor stream: compression, codebook, and classifier bank."""

    kind: str
    channel_set: tuple[str, ...]
    pca: DescriptorPCA
    codebook: GmmCodebook
    classifier: LinearClassifier

    def __post_init__(self):
        if self.kind not in DESCRIPTOR_KINDS:
            raise ValueError(f"unknown descriptor kind {self.kind!r}")
        object.__setattr__(self, "channel_set", tuple(self.channel_set))


@dataclass(frozen=True)
class ModelBundle:
    """A trained segmentation model, ready to save or to run on images."""

    mode: str
    label_names: tuple[str, ...]
    streams: tuple[StreamModel, ...]
    channel_pca: ChannelPCA | None = None
    threshold: float = BACKGROUND_THRESHOLD
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "label_names", tuple(self.label_names))
        object.__setattr__(self, "streams", tuple(self.streams))
        if not self.streams:
            raise ValueError("a model bundle needs at least one stream")

    @property
    def n_labels(self) -> int:
        return len(self.label_names)

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(range(self.n_labels))


def _union_channels(streams) -> tuple[str, ...]:
    seen: list[str] = []
    for _, channel_set in streams:
        for cid in channel_set:
            if cid not in seen:
                seen.append(cid)
    return tuple(seen)


def train_bundle(
    manifest: DatasetManifest,
    train_folds,
    streams,
    settings: TrainSettings | None = None,
) -> ModelBundle:
    """Train a full model on the images of the given manifest folds.

    Parameters
    ----------
    manifest : dataset description; entries in ``train_folds`` must have masks.
    train_folds : iterable of fold indices to train on.
    streams : sequence of (kind, channel_set) pairs, e.g.
        ``[("SIFT", ("R", "G", "B", "NIR"))]``.
    settings : training knobs; defaults are the full-fidelity values.

    Per image, every grid patch whose window majority is a real class
    becomes one training example; its Fisher-vector code feeds the
    one-vs-all classifier bank of each stream.
    """
    settings = settings or TrainSettings()
    streams = [(kind, tuple(cs)) for kind, cs in streams]
    entries = manifest.fold_entries(train_folds)
    if not entries:
        raise ManifestError(f"no manifest entries in folds {sorted(set(train_folds))}")
    for e in entries:
        if e.mask is None:
            raise ManifestError(f"training entry {e.image_id!r} has no mask")

    union = _union_channels(streams)
    needs_channel_pca = any(c in PCA_CHANNELS for c in union)

    images = [e.load_image() for e in entries]
    channel_pca = None
    if needs_channel_pca:
        channel_pca = fit_channel_pca(
            images, sample_budget=settings.channel_pixel_budget, seed=settings.seed
        )
    images = [ensure_channels(img, union, channel_pca) for img in images]

    # Trainable patches (window-majority real class) per image.
    kept_specs: list[list] = []
    labels_blocks: list[np.ndarray] = []
    for entry, img in zip(entries, images):
        specs = grid_patches(img.width, img.height)
        mask = entry.load_mask(manifest)
        if (mask.height, mask.width) != (img.height, img.width):
            raise DecodeError(
                f"mask of {entry.image_id!r} does not match its image size"
            )
        keep_idx, labels = training_patch_set(mask, specs)
        kept_specs.append([specs[i] for i in keep_idx])
        labels_blocks.append(labels)
    labels_all = np.concatenate(labels_blocks)
    if labels_all.size == 0:
        raise InsufficientSamples("no trainable patches in the training folds")

    trained = []
    for s_index, (kind, channel_set) in enumerate(streams):
        blocks = [
            compute_descriptors(img, specs, kind, channel_set)
            for img, specs in zip(images, kept_specs)
            if specs
        ]
        X = np.concatenate(blocks, axis=0)

        rng = np.random.default_rng([settings.seed, s_index])
        if X.shape[0] > settings.descriptor_budget:
            fit_rows = rng.choice(X.shape[0], settings.descriptor_budget, replace=False)
            fit_rows.sort()
            X_fit = X[fit_rows]
        else:
            X_fit = X

        pca = fit_descriptor_pca(X_fit, out_dim=settings.pca_dim)
        proj_fit = pca.project(X_fit)
        codebook = fit_gmm(
            proj_fit,
            n_components=settings.gmm_components,
            seed=settings.seed + s_index,
        )
        codes = fisher_vectors_per_patch(
            pca.project(X), codebook, dtype=np.float32
        )
        classifier = train_slr(
            codes,
            labels_all,
            class_ids=range(manifest.n_labels),
            penalty=settings.slr_penalty,
            max_iter=settings.slr_max_iter,
            tol=settings.slr_tol,
        )
        trained.append(StreamModel(kind, channel_set, pca, codebook, classifier))

    return ModelBundle(
        mode=manifest.mode,
        label_names=manifest.label_names,
        streams=tuple(trained),
        channel_pca=channel_pca,
        threshold=settings.threshold,
        seed=settings.seed,
    )


def predict_unary_field(bundle: ModelBundle, img: MultiChannelImage) -> UnaryField:
    """Dense per-pixel class probabilities for one image.

    Each stream scores every grid patch and spreads the scores over the
    pixels its windows cover; streams are fused by probability averaging,
    and indoor bundles finish with the background rule.
    """
    specs = grid_patches(img.width, img.height)
    fields = []
    for stream in bundle.streams:
        ready = ensure_channels(img, stream.channel_set, bundle.channel_pca)
        descriptors = compute_descriptors(ready, specs, stream.kind, stream.channel_set)
        codes = fisher_vectors_per_patch(
            stream.pca.project(descriptors), stream.codebook, dtype=np.float32
        )
        probs = patch_probability(stream.classifier, codes)
        fields.append(
            aggregate_pixel_posteriors(
                probs, specs, img.width, img.height, bundle.class_ids, bundle.mode
            )
        )
    field = fields[0] if len(fields) == 1 else late_fuse(fields)
    if bundle.mode == MODE_INDOOR:
        field = apply_background_rule(
            field, bundle.threshold, background_id=bundle.n_labels
        )
    return field


# --- persistence ------------------------------------------------------------


def save_bundle(bundle: ModelBundle, path) -> None:
    """Write a bundle as one uncompressed archive; arrays keep exact bits."""
    meta = {
        "version": BUNDLE_VERSION,
        "mode": bundle.mode,
        "label_names": list(bundle.label_names),
        "threshold": bundle.threshold,
        "seed": bundle.seed,
        "has_channel_pca": bundle.channel_pca is not None,
        "channel_pca_seed": bundle.channel_pca.seed if bundle.channel_pca else 0,
        "streams": [
            {
                "kind": s.kind,
                "channel_set": list(s.channel_set),
                "class_ids": list(s.classifier.class_ids),
                "penalty": s.classifier.penalty,
            }
            for s in bundle.streams
        ],
    }
    arrays: dict[str, np.ndarray] = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    if bundle.channel_pca is not None:
        cp = bundle.channel_pca
        arrays.update(
            cpca_mean=cp.mean,
            cpca_basis=cp.basis,
            cpca_eigenvalues=cp.eigenvalues,
            cpca_proj_min=cp.proj_min,
            cpca_proj_max=cp.proj_max,
        )
    for i, s in enumerate(bundle.streams):
        arrays[f"s{i}_pca_mean"] = s.pca.mean
        arrays[f"s{i}_pca_basis"] = s.pca.basis
        arrays[f"s{i}_pca_eigenvalues"] = s.pca.eigenvalues
        arrays[f"s{i}_gmm_weights"] = s.codebook.weights
        arrays[f"s{i}_gmm_means"] = s.codebook.means
        arrays[f"s{i}_gmm_variances"] = s.codebook.variances
        arrays[f"s{i}_clf_weights"] = s.classifier.weights
        arrays[f"s{i}_clf_biases"] = s.classifier.biases
    # An explicit file handle stops numpy from appending its own extension.
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_bundle(path) -> ModelBundle:
    """Read a bundle written by :func:`save_bundle`."""
    with np.load(path, allow_pickle=False) as data:
        try:
            meta = json.loads(bytes(data["meta"]).decode())
        except (KeyError, ValueError) as exc:
            raise DecodeError(f"{path} is not a model bundle: {exc}") from exc
        if meta.get("version") != BUNDLE_VERSION:
            raise DecodeError(
                f"unsupported bundle version {meta.get('version')!r} in {path}"
            )
        channel_pca = None
        if meta["has_channel_pca"]:
            channel_pca = ChannelPCA(
                mean=data["cpca_mean"],
                basis=data["cpca_basis"],
                eigenvalues=data["cpca_eigenvalues"],
                proj_min=data["cpca_proj_min"],
                proj_max=data["cpca_proj_max"],
                seed=meta["channel_pca_seed"],
            )
        streams = []
        for i, s_meta in enumerate(meta["streams"]):
            streams.append(
                StreamModel(
                    kind=s_meta["kind"],
                    channel_set=tuple(s_meta["channel_set"]),
                    pca=DescriptorPCA(
                        mean=data[f"s{i}_pca_mean"],
                        basis=data[f"s{i}_pca_basis"],
                        eigenvalues=data[f"s{i}_pca_eigenvalues"],
                    ),
                    codebook=GmmCodebook(
                        weights=data[f"s{i}_gmm_weights"],
                        means=data[f"s{i}_gmm_means"],
                        variances=data[f"s{i}_gmm_variances"],
                    ),
                    classifier=LinearClassifier(
                        class_ids=tuple(s_meta["class_ids"]),
                        weights=data[f"s{i}_clf_weights"],
                        biases=data[f"s{i}_clf_biases"],
                        penalty=s_meta["penalty"],
                    ),
                )
            )
    return ModelBundle(
        mode=meta["mode"],
        label_names=tuple(meta["label_names"]),
        streams=tuple(streams),
        channel_pca=channel_pca,
        threshold=meta["threshold"],
        seed=meta["seed"],
    )
