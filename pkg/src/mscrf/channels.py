"""Derived channels: luma and PCA-decorrelated planes.

Starting from the four raw planes (R, G, B, NIR) the pipeline can derive a
luma plane L and four decorrelated planes P1..P4 obtained by a principal
component analysis of pixel values pooled over the training images.  The
decorrelated planes are rescaled to [0, 1] per component so they can be fed
to the same descriptor code as raw channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientSamples, MissingChannel, MissingNIR
from .imageio import MultiChannelImage

#: Weights of the ITU-601 luma combination.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

#: Channel ids understood by the pipeline.
RAW_CHANNELS = ("R", "G", "B", "NIR")
DERIVED_CHANNELS = ("L", "P1", "P2", "P3", "P4")
PCA_CHANNELS = ("P1", "P2", "P3", "P4")

#: Named channel subsets usable in descriptor variant names.
CHANNEL_SETS = {
    "rgb": ("R", "G", "B"),
    "rgbn": ("R", "G", "B", "NIR"),
    "l": ("L",),
    "n": ("NIR",),
    "p1": ("P1",),
    "p1234": ("P1", "P2", "P3", "P4"),
}


def compute_luma(img: MultiChannelImage) -> np.ndarray:
    """Luma plane L = 0.299 R + 0.587 G + 0.114 B, same geometry as the inputs."""
    wr, wg, wb = LUMA_WEIGHTS
    return wr * img.plane("R") + wg * img.plane("G") + wb * img.plane("B")


@dataclass(frozen=True)
class ChannelPCA:
    """A 4x4 orthonormal decorrelating transform fitted on pooled pixels.

    ``basis`` holds the principal directions as rows, ordered by descending
    ``eigenvalues``.  ``proj_min``/``proj_max`` record the range of the
    training projections per component and drive the [0, 1] rescaling of
    the derived planes.
    """

    mean: np.ndarray          # (4,)
    basis: np.ndarray         # (4, 4), rows are principal directions
    eigenvalues: np.ndarray   # (4,), descending
    proj_min: np.ndarray      # (4,)
    proj_max: np.ndarray      # (4,)
    seed: int = 0

    def __post_init__(self):
        for name in ("mean", "basis", "eigenvalues", "proj_min", "proj_max"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if self.mean.shape != (4,) or self.basis.shape != (4, 4):
            raise ValueError("channel PCA must be a 4-channel transform")

    def project(self, pixels: np.ndarray) -> np.ndarray:
        """Project (N, 4) pixel rows onto the principal axes (no rescaling)."""
        pixels = np.asarray(pixels, dtype=np.float64)
        return (pixels - self.mean) @ self.basis.T

    def reconstruct(self, projected: np.ndarray) -> np.ndarray:
        """Invert :meth:`project`; exact up to rounding since the basis is orthonormal."""
        return np.asarray(projected, dtype=np.float64) @ self.basis + self.mean


def _pixel_matrix(img: MultiChannelImage) -> np.ndarray:
    if not img.has_nir:
        raise MissingNIR(
            f"image {img.source_id!r} has no NIR plane; channel PCA needs all four channels"
        )
    return np.stack(
        [img.plane(c).ravel() for c in RAW_CHANNELS], axis=1
    )


def fit_channel_pca(
    images, sample_budget: int = 200_000, seed: int = 0
) -> ChannelPCA:
    """Fit the 4-channel decorrelating PCA on pixels pooled from ``images``.

    At most ``sample_budget`` pixels are kept, drawn uniformly without
    replacement from the pooled pixel rows using a seeded generator, so the
    fit is deterministic for a given image list and seed.
    """
    blocks = [_pixel_matrix(img) for img in images]
    if not blocks:
        raise InsufficientSamples("channel PCA needs at least one image")
    data = np.concatenate(blocks, axis=0)
    if data.shape[0] < 4:
        raise InsufficientSamples(
            f"channel PCA needs at least 4 pixels, got {data.shape[0]}"
        )
    if data.shape[0] > sample_budget:
        rng = np.random.default_rng(seed)
        keep = rng.choice(data.shape[0], size=sample_budget, replace=False)
        keep.sort()
        data = data[keep]

    mean = data.mean(axis=0)
    centered = data - mean
    cov = centered.T @ centered / data.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.maximum(evals[order], 0.0)
    basis = evecs[:, order].T
    # Fix signs deterministically: largest-magnitude entry of each direction
    # is made positive.
    for k in range(4):
        j = int(np.argmax(np.abs(basis[k])))
        if basis[k, j] < 0:
            basis[k] = -basis[k]

    proj = (data - mean) @ basis.T
    return ChannelPCA(
        mean=mean,
        basis=basis,
        eigenvalues=evals,
        proj_min=proj.min(axis=0),
        proj_max=proj.max(axis=0),
        seed=seed,
    )


def apply_channel_pca(img: MultiChannelImage, pca: ChannelPCA) -> MultiChannelImage:
    """Attach decorrelated planes P1..P4 to ``img``.

    Projections are rescaled to [0, 1] using the training range stored on
    the transform and clipped, so unseen extremes cannot escape the
    intensity contract.  A component with zero training spread maps to a
    constant 0.5 plane.
    """
    pixels = _pixel_matrix(img)
    proj = pca.project(pixels)
    span = pca.proj_max - pca.proj_min
    safe = np.where(span > 0, span, 1.0)
    scaled = (proj - pca.proj_min) / safe
    scaled = np.where(span > 0, scaled, 0.5)
    np.clip(scaled, 0.0, 1.0, out=scaled)

    planes = {
        cid: scaled[:, k].reshape(img.height, img.width)
        for k, cid in enumerate(PCA_CHANNELS)
    }
    return img.with_channels(planes)


def ensure_channels(
    img: MultiChannelImage,
    channel_ids,
    pca: ChannelPCA | None = None,
) -> MultiChannelImage:
    """Return ``img`` with every channel in ``channel_ids`` present.

    Luma is derived on demand; decorrelated planes require a fitted
    ``pca``.  Raw channels must already be present (a missing NIR raises
    MissingNIR rather than being silently invented).
    """
    needed = [c for c in channel_ids if c not in img.channels]
    if not needed:
        return img
    extra: dict[str, np.ndarray] = {}
    want_pca = [c for c in needed if c in PCA_CHANNELS]
    for cid in needed:
        if cid == "L":
            extra["L"] = compute_luma(img)
        elif cid == "NIR":
            raise MissingNIR(
                f"image {img.source_id!r} has no NIR plane but channel set needs it"
            )
        elif cid in PCA_CHANNELS:
            continue  # handled in one shot below
        else:
            raise MissingChannel(f"unknown channel id {cid!r}")
    out = img.with_channels(extra) if extra else img
    if want_pca:
        if pca is None:
            raise MissingChannel(
                "decorrelated channels requested but no channel PCA was provided"
            )
        out = apply_channel_pca(out, pca)
    return out
