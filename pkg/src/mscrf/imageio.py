"""Image pairs, label masks, and dataset manifests.

On disk every plane is an 8-bit PNG: RGB images as 3-channel files, the
near-infrared plane as a single-channel file registered pixel-for-pixel with
its RGB partner, and ground-truth masks as single-channel files whose pixel
values are label ids.  In memory intensities live in [0, 1] as float64 and
all containers are immutable after construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    DecodeError,
    DimensionMismatch,
    ManifestError,
    MissingChannel,
    UnknownLabel,
)

#: Reserved mask value for unlabelled pixels in outdoor-style datasets.
VOID_ID = 255

#: Dataset modes.  Outdoor data carries a void id for unlabelled pixels;
#: indoor data instead scores everything, with an implicit background class.
MODE_OUTDOOR = "outdoor_void"
MODE_INDOOR = "indoor_background"
MODES = (MODE_OUTDOOR, MODE_INDOOR)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class MultiChannelImage:
    """Registered image planes keyed by channel id.

    The raw channels are ``R``, ``G``, ``B`` and optionally ``NIR``.
    Derived planes (``L`` for luma, ``P1``..``P4`` for decorrelated
    channels) may be attached later; every plane shares one geometry and
    holds float64 intensities in [0, 1].
    """

    width: int
    height: int
    channels: dict[str, np.ndarray]
    source_id: str = ""

    def __post_init__(self):
        for cid in ("R", "G", "B"):
            if cid not in self.channels:
                raise MissingChannel(f"required channel {cid!r} is absent")
        clean: dict[str, np.ndarray] = {}
        for cid, plane in self.channels.items():
            plane = np.asarray(plane, dtype=np.float64)
            if plane.shape != (self.height, self.width):
                raise DimensionMismatch(
                    f"channel {cid!r} has shape {plane.shape}, expected "
                    f"{(self.height, self.width)}"
                )
            if plane.size and (plane.min() < 0.0 or plane.max() > 1.0):
                raise ValueError(f"channel {cid!r} has intensities outside [0, 1]")
            clean[cid] = _freeze(plane)
        object.__setattr__(self, "channels", clean)

    @property
    def has_nir(self) -> bool:
        return "NIR" in self.channels

    def plane(self, channel_id: str) -> np.ndarray:
        """Return one channel plane, raising MissingChannel if absent."""
        try:
            return self.channels[channel_id]
        except KeyError:
            raise MissingChannel(
                f"channel {channel_id!r} not present on image {self.source_id!r}"
            ) from None

    def with_channels(self, extra: dict[str, np.ndarray]) -> "MultiChannelImage":
        """A copy of this image with additional derived planes attached."""
        merged = dict(self.channels)
        merged.update(extra)
        return MultiChannelImage(self.width, self.height, merged, self.source_id)


def _open_image(path: str | Path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError:
        raise
    except Exception as exc:  # PIL raises a zoo of decode errors
        raise DecodeError(f"cannot decode image file {path}: {exc}") from exc
    return img


def load_image_pair(rgb_path: str | Path, nir_path: str | Path | None = None) -> MultiChannelImage:
    """Load an RGB PNG and (optionally) its registered NIR PNG.

    Parameters
    ----------
    rgb_path : path to a 3-channel PNG (palette images are expanded).
    nir_path : path to a single-channel PNG of identical size, or None.

    Returns
    -------
    MultiChannelImage with channels R, G, B and, when given, NIR.
    """
    rgb_path = Path(rgb_path)
    img = _open_image(rgb_path)
    if img.mode == "P":
        img = img.convert("RGB")
    if img.mode != "RGB":
        raise DecodeError(
            f"{rgb_path} decodes to mode {img.mode!r}, expected a 3-channel RGB file"
        )
    arr = np.asarray(img, dtype=np.float64) / 255.0
    channels = {"R": arr[:, :, 0], "G": arr[:, :, 1], "B": arr[:, :, 2]}

    if nir_path is not None:
        nir_path = Path(nir_path)
        nimg = _open_image(nir_path)
        if nimg.mode != "L":
            raise DecodeError(
                f"{nir_path} decodes to mode {nimg.mode!r}, expected a single-channel file"
            )
        nir = np.asarray(nimg, dtype=np.float64) / 255.0
        if nir.shape != arr.shape[:2]:
            raise DimensionMismatch(
                f"NIR plane {nir.shape} does not match RGB {arr.shape[:2]}"
            )
        channels["NIR"] = nir

    height, width = arr.shape[:2]
    return MultiChannelImage(width, height, channels, source_id=rgb_path.stem)


@dataclass(frozen=True)
class LabelMask:
    """Per-pixel ground-truth label ids for one image.

    ``void_id`` is set in outdoor mode (those pixels are never scored);
    ``background_id`` is set in indoor mode, where it behaves as an extra
    class appended after the named labels.
    """

    width: int
    height: int
    labels: np.ndarray
    void_id: int | None = None
    background_id: int | None = None

    def __post_init__(self):
        arr = np.asarray(self.labels, dtype=np.int32)
        if arr.shape != (self.height, self.width):
            raise DimensionMismatch(
                f"mask has shape {arr.shape}, expected {(self.height, self.width)}"
            )
        object.__setattr__(self, "labels", _freeze(arr))

    def scored(self) -> np.ndarray:
        """Boolean plane of pixels that participate in evaluation."""
        if self.void_id is None:
            return np.ones((self.height, self.width), dtype=bool)
        return self.labels != self.void_id


def load_mask(path: str | Path, manifest: "DatasetManifest") -> LabelMask:
    """Load a mask PNG and validate its label ids against the manifest."""
    img = _open_image(path)
    if img.mode == "P":
        img = img.convert("L")
    if img.mode != "L":
        raise DecodeError(
            f"{path} decodes to mode {img.mode!r}, expected a single-channel mask"
        )
    arr = np.asarray(img, dtype=np.int32)

    allowed = set(range(manifest.n_labels))
    if manifest.mode == MODE_OUTDOOR:
        allowed.add(VOID_ID)
    else:
        allowed.add(manifest.background_id)
    present = set(np.unique(arr).tolist())
    bad = sorted(present - allowed)
    if bad:
        raise UnknownLabel(f"mask {path} contains unknown label ids {bad}")

    height, width = arr.shape
    return LabelMask(
        width,
        height,
        arr,
        void_id=manifest.void_id,
        background_id=manifest.background_id,
    )


def write_mask(labels: np.ndarray, path: str | Path) -> None:
    """Write a per-pixel label-id array as a single-channel 8-bit PNG."""
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise DimensionMismatch(f"expected a 2-d label array, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError("label ids must fit in one byte")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path, format="PNG")


@dataclass(frozen=True)
class ManifestEntry:
    """One image record: file paths plus its cross-validation fold."""

    image_id: str
    rgb: Path
    fold: int
    nir: Path | None = None
    mask: Path | None = None

    def load_image(self) -> MultiChannelImage:
        img = load_image_pair(self.rgb, self.nir)
        return MultiChannelImage(img.width, img.height, dict(img.channels), self.image_id)

    def load_mask(self, manifest: "DatasetManifest") -> LabelMask:
        if self.mask is None:
            raise ManifestError(f"entry {self.image_id!r} has no mask path")
        return load_mask(self.mask, manifest)


@dataclass(frozen=True)
class DatasetManifest:
    """A dataset description: mode, named labels, and per-image records."""

    mode: str
    label_names: tuple[str, ...]
    entries: tuple[ManifestEntry, ...]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ManifestError(f"unknown dataset mode {self.mode!r}")
        if not self.label_names:
            raise ManifestError("manifest declares no labels")
        if len(self.label_names) >= VOID_ID:
            raise ManifestError("too many labels to leave room for reserved ids")
        seen = set()
        for entry in self.entries:
            if not 0 <= entry.fold <= 4:
                raise ManifestError(
                    f"entry {entry.image_id!r} has fold {entry.fold}, expected 0..4"
                )
            if entry.image_id in seen:
                raise ManifestError(f"duplicate image id {entry.image_id!r}")
            seen.add(entry.image_id)

    @property
    def n_labels(self) -> int:
        return len(self.label_names)

    @property
    def void_id(self) -> int | None:
        return VOID_ID if self.mode == MODE_OUTDOOR else None

    @property
    def background_id(self) -> int | None:
        """In indoor mode the background class id, appended after the labels."""
        return self.n_labels if self.mode == MODE_INDOOR else None

    def fold_entries(self, folds) -> tuple[ManifestEntry, ...]:
        wanted = {int(f) for f in folds}
        return tuple(e for e in self.entries if e.fold in wanted)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse a manifest JSON file.

    Expected shape::

        {"mode": "outdoor_void" | "indoor_background",
         "labels": ["sky", "tree", ...],
         "entries": [{"rgb": "...", "nir": "...", "mask": "...", "fold": 0}, ...]}

    Relative paths resolve against the manifest's directory.  ``nir`` and
    ``mask`` are optional per entry.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError:
        raise
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ManifestError(f"manifest {path} must be a JSON object")

    root = path.parent
    try:
        mode = raw["mode"]
        labels = raw["labels"]
        raw_entries = raw["entries"]
    except KeyError as exc:
        raise ManifestError(f"manifest {path} is missing key {exc}") from exc
    if not isinstance(labels, list) or not all(isinstance(x, str) for x in labels):
        raise ManifestError("manifest 'labels' must be a list of strings")
    if not isinstance(raw_entries, list):
        raise ManifestError("manifest 'entries' must be a list")

    def _resolve(value):
        return None if value is None else root / value

    entries = []
    for i, rec in enumerate(raw_entries):
        if not isinstance(rec, dict) or "rgb" not in rec:
            raise ManifestError(f"entry #{i} must be an object with an 'rgb' path")
        rgb = root / rec["rgb"]
        image_id = rec.get("id") or Path(rec["rgb"]).stem
        try:
            fold = int(rec.get("fold", 0))
        except (TypeError, ValueError):
            raise ManifestError(f"entry #{i} has a non-integer fold") from None
        entries.append(
            ManifestEntry(
                image_id=image_id,
                rgb=rgb,
                fold=fold,
                nir=_resolve(rec.get("nir")),
                mask=_resolve(rec.get("mask")),
            )
        )
    return DatasetManifest(mode=mode, label_names=tuple(labels), entries=tuple(entries), root=root)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write a manifest back to JSON with paths relative to ``path``'s directory."""
    path = Path(path)
    root = path.parent

    def _rel(p: Path | None):
        if p is None:
            return None
        try:
            return str(Path(p).relative_to(root))
        except ValueError:
            return str(p)

    doc = {
        "mode": manifest.mode,
        "labels": list(manifest.label_names),
        "entries": [
            {
                "id": e.image_id,
                "rgb": _rel(e.rgb),
                "nir": _rel(e.nir),
                "mask": _rel(e.mask),
                "fold": e.fold,
            }
            for e in manifest.entries
        ],
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
