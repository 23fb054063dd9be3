"""Dense multi-scale patch grid and patch resampling.

Patches are square windows centred on a fixed grid: the first centre sits
at (16, 16) and subsequent centres follow every 10 pixels in x and y, for
every centre that lies inside the image.  The same centres are reused at
five scales whose side lengths grow by a factor sqrt(2) from the base size
of 32, i.e. sides 32, 45, 64, 91 and 128.  A patch at any scale is
resampled to a 32x32 tile before descriptor extraction, so descriptor code
never sees the scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ImageTooSmall

PATCH_SIZE = 32
GRID_ORIGIN = 16
GRID_STRIDE = 10
N_SCALES = 5

#: Side length per scale index: round(32 * sqrt(2)**s).
SCALE_SIDES = tuple(
    int(round(PATCH_SIZE * np.sqrt(2.0) ** s)) for s in range(N_SCALES)
)


@dataclass(frozen=True)
class PatchSpec:
    """One square patch: grid centre (x, y) plus a scale index."""

    center: tuple[int, int]
    scale_index: int

    def __post_init__(self):
        if not 0 <= self.scale_index < N_SCALES:
            raise ValueError(f"scale index {self.scale_index} outside 0..{N_SCALES - 1}")

    @property
    def side(self) -> int:
        return SCALE_SIDES[self.scale_index]


def grid_centers(width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Grid centre coordinates along x and y for an image of the given size."""
    xs = np.arange(GRID_ORIGIN, width, GRID_STRIDE)
    ys = np.arange(GRID_ORIGIN, height, GRID_STRIDE)
    return xs, ys


def grid_patches(width: int, height: int) -> list[PatchSpec]:
    """Enumerate the full multi-scale patch grid for an image.

    Order is deterministic: scale-major, then row-major over centres
    (y outer, x inner).  Raises ImageTooSmall when the image cannot host a
    base-size patch.
    """
    if width < PATCH_SIZE or height < PATCH_SIZE:
        raise ImageTooSmall(
            f"image {width}x{height} is smaller than the {PATCH_SIZE}x{PATCH_SIZE} base patch"
        )
    xs, ys = grid_centers(width, height)
    return [
        PatchSpec((int(x), int(y)), s)
        for s in range(N_SCALES)
        for y in ys
        for x in xs
    ]


def patch_window(spec: PatchSpec) -> tuple[int, int, int, int]:
    """Integer pixel window (x0, y0, x1, y1), half-open, of a patch.

    The window is the ``side``-pixel-wide span centred on the patch centre
    and may extend past the image bounds; callers clip as needed.
    """
    cx, cy = spec.center
    side = spec.side
    x0 = int(np.ceil(cx - side / 2.0))
    y0 = int(np.ceil(cy - side / 2.0))
    return x0, y0, x0 + side, y0 + side


def clipped_window(spec: PatchSpec, width: int, height: int) -> tuple[int, int, int, int]:
    """The patch window intersected with the image rectangle."""
    x0, y0, x1, y1 = patch_window(spec)
    return max(x0, 0), max(y0, 0), min(x1, width), min(y1, height)


def _axis_samples(center: int, side: int, size: int):
    """Sample coordinates along one axis plus bilinear interpolation terms.

    The tile pixel t (0..31) samples the source coordinate
    ``center - side/2 + (t + 0.5) * side/32 - 0.5`` so that the 32 samples
    cover the window uniformly; at scale 0 this lands exactly on the raw
    pixel grid.  Indices are clamped to the image, which replicates edge
    rows/columns for windows that overhang the border.
    """
    coords = center - side / 2.0 + (np.arange(PATCH_SIZE) + 0.5) * (side / PATCH_SIZE) - 0.5
    base = np.floor(coords)
    frac = coords - base
    i0 = np.clip(base.astype(np.int64), 0, size - 1)
    i1 = np.clip(base.astype(np.int64) + 1, 0, size - 1)
    return i0, i1, frac


def extract_patch(plane: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """Resample one patch of a channel plane to a 32x32 float64 tile.

    Bilinear interpolation with edge clamping; at scale 0 the tile equals
    the raw 32x32 window exactly (interior windows).
    """
    plane = np.asarray(plane, dtype=np.float64)
    height, width = plane.shape
    cx, cy = spec.center
    x0, x1, fx = _axis_samples(cx, spec.side, width)
    y0, y1, fy = _axis_samples(cy, spec.side, height)

    # Separable gather: four corner grids combined with outer-product weights.
    p00 = plane[np.ix_(y0, x0)]
    p01 = plane[np.ix_(y0, x1)]
    p10 = plane[np.ix_(y1, x0)]
    p11 = plane[np.ix_(y1, x1)]
    wy = fy[:, None]
    wx = fx[None, :]
    return (
        (1.0 - wy) * ((1.0 - wx) * p00 + wx * p01)
        + wy * ((1.0 - wx) * p10 + wx * p11)
    )


def extract_tiles(plane: np.ndarray, specs) -> np.ndarray:
    """Stack :func:`extract_patch` over many specs into an (N, 32, 32) array."""
    tiles = np.empty((len(specs), PATCH_SIZE, PATCH_SIZE), dtype=np.float64)
    for i, spec in enumerate(specs):
        tiles[i] = extract_patch(plane, spec)
    return tiles
