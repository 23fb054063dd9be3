"""Patch descriptors: upright dense SIFT and mean/std colour statistics.

Both descriptors consume a 32x32 resampled tile per channel and know
nothing about patch scale.  Multi-channel descriptors are the plain
concatenation of the per-channel vectors in channel-set order, so e.g.
SIFT over (R, G, B, NIR) is 4 x 128 = 512 dimensions and the colour
statistics descriptor over (R, G, B) is 3 x 32 = 96.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imageio import MultiChannelImage
from .patches import PATCH_SIZE, PatchSpec, extract_tiles

KIND_SIFT = "SIFT"
KIND_COL = "COL"
DESCRIPTOR_KINDS = (KIND_SIFT, KIND_COL)

SIFT_GRID = 4          # spatial cells per axis
SIFT_ORIENTATIONS = 8  # orientation bins over [0, 2pi)
SIFT_CLAMP = 0.2       # per-entry clamp between the two normalisations
SIFT_DIM = SIFT_GRID * SIFT_GRID * SIFT_ORIENTATIONS  # 128 per channel

COL_GRID = 4           # 4x4 cells of 8x8 pixels
COL_DIM = 2 * COL_GRID * COL_GRID  # mean + std per cell = 32 per channel

_CELL_SIZE = PATCH_SIZE // SIFT_GRID  # 8 pixels per SIFT cell axis


def _spatial_weights() -> np.ndarray:
    """(32, 4) soft-assignment weights of each pixel row/column to the cells.

    Cell centres sit at 3.5 + 8k; each pixel splits its vote linearly
    between the two nearest centres, with no wrap-around at the tile edge.
    """
    coords = (np.arange(PATCH_SIZE) - 3.5) / _CELL_SIZE
    lo = np.floor(coords).astype(int)
    frac = coords - lo
    weights = np.zeros((PATCH_SIZE, SIFT_GRID))
    for p in range(PATCH_SIZE):
        if 0 <= lo[p] < SIFT_GRID:
            weights[p, lo[p]] += 1.0 - frac[p]
        if 0 <= lo[p] + 1 < SIFT_GRID:
            weights[p, lo[p] + 1] += frac[p]
    return weights


_W_SPATIAL = _spatial_weights()

# Clamped-index helpers for central differences on a 32-wide axis.
_IDX_PLUS = np.minimum(np.arange(PATCH_SIZE) + 1, PATCH_SIZE - 1)
_IDX_MINUS = np.maximum(np.arange(PATCH_SIZE) - 1, 0)


def _check_tiles(tiles: np.ndarray) -> np.ndarray:
    tiles = np.asarray(tiles, dtype=np.float64)
    if tiles.ndim == 2:
        tiles = tiles[None]
    if tiles.shape[-2:] != (PATCH_SIZE, PATCH_SIZE):
        raise ValueError(f"expected (..., 32, 32) tiles, got {tiles.shape}")
    return tiles


def sift_descriptors(tiles: np.ndarray, block: int = 128) -> np.ndarray:
    """Upright SIFT vectors for a batch of tiles, shape (N, 128).

    Gradients use central differences with clamped indices (halved
    one-sided differences on the border).  Magnitude is soft-binned over
    8 orientations (centres at 2*pi*k/8) and a 4x4 spatial grid, then the
    vector is L2-normalised, clamped at 0.2 per entry, and renormalised.
    A constant tile has no gradient energy and maps to the zero vector.
    Large batches are processed ``block`` tiles at a time to bound the
    soft-binning temporaries.
    """
    tiles = _check_tiles(tiles)
    if tiles.shape[0] > block:
        out = np.empty((tiles.shape[0], SIFT_DIM), dtype=np.float64)
        for start in range(0, tiles.shape[0], block):
            out[start : start + block] = _sift_block(tiles[start : start + block])
        return out
    return _sift_block(tiles)


def _sift_block(tiles: np.ndarray) -> np.ndarray:
    n = tiles.shape[0]

    gx = (tiles[:, :, _IDX_PLUS] - tiles[:, :, _IDX_MINUS]) * 0.5
    gy = (tiles[:, _IDX_PLUS, :] - tiles[:, _IDX_MINUS, :]) * 0.5
    mag = np.hypot(gx, gy)
    theta = np.arctan2(gy, gx)

    # Continuous orientation-bin coordinate in [0, 8).
    obin = np.mod(theta, 2.0 * np.pi) * (SIFT_ORIENTATIONS / (2.0 * np.pi))
    b0 = np.floor(obin).astype(np.int64) % SIFT_ORIENTATIONS
    w1 = obin - np.floor(obin)
    b1 = (b0 + 1) % SIFT_ORIENTATIONS

    eye = np.eye(SIFT_ORIENTATIONS)
    votes = (mag * (1.0 - w1))[..., None] * eye[b0] + (mag * w1)[..., None] * eye[b1]

    hist = np.einsum("yc,xd,nyxo->ncdo", _W_SPATIAL, _W_SPATIAL, votes, optimize=True)
    desc = hist.reshape(n, SIFT_DIM)

    norms = np.linalg.norm(desc, axis=1, keepdims=True)
    nonzero = norms[:, 0] > 1e-12
    desc[nonzero] /= norms[nonzero]
    np.clip(desc, None, SIFT_CLAMP, out=desc)
    norms = np.linalg.norm(desc, axis=1, keepdims=True)
    desc[nonzero] /= norms[nonzero]
    desc[~nonzero] = 0.0
    return desc


def sift_descriptor(tile: np.ndarray) -> np.ndarray:
    """SIFT vector (128,) of a single 32x32 tile."""
    return sift_descriptors(tile[None] if tile.ndim == 2 else tile)[0]


def col_descriptors(tiles: np.ndarray) -> np.ndarray:
    """Colour-statistics vectors for a batch of tiles, shape (N, 32).

    The tile is divided into 4x4 cells of 8x8 pixels; each cell
    contributes its mean and population standard deviation, interleaved
    (mean, std) in row-major cell order.
    """
    tiles = _check_tiles(tiles)
    n = tiles.shape[0]
    cell = PATCH_SIZE // COL_GRID
    cells = tiles.reshape(n, COL_GRID, cell, COL_GRID, cell)
    means = cells.mean(axis=(2, 4))
    stds = cells.std(axis=(2, 4))
    out = np.empty((n, COL_DIM), dtype=np.float64)
    out[:, 0::2] = means.reshape(n, COL_GRID * COL_GRID)
    out[:, 1::2] = stds.reshape(n, COL_GRID * COL_GRID)
    return out


def col_descriptor(tile: np.ndarray) -> np.ndarray:
    """Colour-statistics vector (32,) of a single 32x32 tile."""
    return col_descriptors(tile[None] if tile.ndim == 2 else tile)[0]


_PER_CHANNEL_DIM = {KIND_SIFT: SIFT_DIM, KIND_COL: COL_DIM}
_BATCH_FN = {KIND_SIFT: sift_descriptors, KIND_COL: col_descriptors}


def descriptor_dim(kind: str, channel_set) -> int:
    """Dimensionality of a descriptor of ``kind`` over ``channel_set``."""
    if kind not in _PER_CHANNEL_DIM:
        raise ValueError(f"unknown descriptor kind {kind!r}")
    n_channels = len(tuple(channel_set))
    if n_channels == 0:
        raise ValueError("channel set is empty")
    return _PER_CHANNEL_DIM[kind] * n_channels


@dataclass(frozen=True)
class PatchDescriptor:
    """A descriptor vector together with the patch and recipe it came from."""

    vector: np.ndarray
    kind: str
    channel_set: tuple[str, ...]
    spec: PatchSpec

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float64)
        vec.flags.writeable = False
        object.__setattr__(self, "vector", vec)
        object.__setattr__(self, "channel_set", tuple(self.channel_set))


def compute_descriptors(
    img: MultiChannelImage, specs, kind: str, channel_set
) -> np.ndarray:
    """Descriptor matrix (len(specs), dim) for one image.

    Channels must already be present on the image (see
    :func:`mscrf.channels.ensure_channels`); per-channel blocks are
    concatenated in channel-set order.
    """
    channel_set = tuple(channel_set)
    if kind not in _BATCH_FN:
        raise ValueError(f"unknown descriptor kind {kind!r}")
    fn = _BATCH_FN[kind]
    blocks = []
    for cid in channel_set:
        tiles = extract_tiles(img.plane(cid), specs)
        blocks.append(fn(tiles))
    return np.concatenate(blocks, axis=1) if blocks else np.empty((len(specs), 0))


def compose_descriptor(
    img: MultiChannelImage, spec: PatchSpec, kind: str, channel_set
) -> PatchDescriptor:
    """One patch's descriptor over an ordered channel set."""
    mat = compute_descriptors(img, [spec], kind, channel_set)
    return PatchDescriptor(mat[0], kind, tuple(channel_set), spec)
