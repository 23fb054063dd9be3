"""Shared fixtures: synthetic corpora, image writers, small helpers."""

import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from mscrf.imageio import VOID_ID


# --- low-level writers --------------------------------------------------------


def save_rgb(path, arr):
    """Write an (H, W, 3) float array in [0, 1] as an 8-bit RGB PNG."""
    Image.fromarray(np.clip(np.rint(arr * 255), 0, 255).astype(np.uint8), "RGB").save(path)


def save_gray(path, arr):
    """Write an (H, W) float array in [0, 1] as an 8-bit grayscale PNG."""
    Image.fromarray(np.clip(np.rint(arr * 255), 0, 255).astype(np.uint8), "L").save(path)


def save_ids(path, arr):
    """Write an (H, W) integer label array as an 8-bit PNG."""
    Image.fromarray(np.asarray(arr, dtype=np.uint8), "L").save(path)


# --- texture generators ---------------------------------------------------------


def smooth_noise(rng, shape, passes=3):
    """Low-frequency noise in [0, 1] via repeated 4-neighbour averaging."""
    a = rng.random(shape)
    for _ in range(passes):
        a = (
            a
            + np.roll(a, 1, axis=0)
            + np.roll(a, -1, axis=0)
            + np.roll(a, 1, axis=1)
            + np.roll(a, -1, axis=1)
        ) / 5.0
    lo, hi = a.min(), a.max()
    return (a - lo) / max(hi - lo, 1e-12)


def stripes(shape, axis, period, phase=0.0, amplitude=0.35):
    """Sinusoidal stripes across one axis, values in (0, 1)."""
    h, w = shape
    coord = np.arange(h)[:, None] if axis == 0 else np.arange(w)[None, :]
    return 0.5 + amplitude * np.sin(2.0 * np.pi * coord / period + phase) * np.ones(shape)


# --- tiny five-fold corpus (fast protocol / CLI tests) --------------------------

TINY_SIZE = 36
TINY_IMAGES = 20


def build_tiny_corpus(root: Path) -> dict:
    """A 20-image, two-class, five-fold corpus of 36x36 RGB+NIR pairs.

    Class 0 regions carry horizontal luminance stripes, class 1 regions
    vertical ones, so a luma SIFT descriptor separates them at every
    scale.  Most images are single-class (clean patch supervision even
    for windows larger than the image); the four fold-4 images are
    left/right splits so the corpus has label boundaries for band
    metrics.
    """
    root.mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    entries = []
    shape = (TINY_SIZE, TINY_SIZE)
    half = TINY_SIZE // 2
    for i in range(TINY_IMAGES):
        rng = np.random.default_rng([1234, i])
        # fixed stripe phase: per-image variation comes from the noise term,
        # keeping held-out descriptors inside the training clusters
        tex0 = stripes(shape, axis=0, period=6)
        tex1 = stripes(shape, axis=1, period=6)
        if i % 5 == 4:
            region1 = np.broadcast_to(np.arange(TINY_SIZE)[None, :] >= half, shape)
        elif i % 2 == 0:
            region1 = np.zeros(shape, dtype=bool)
        else:
            region1 = np.ones(shape, dtype=bool)
        noise = 0.05 * smooth_noise(rng, shape)
        luma = np.clip(np.where(region1, tex1, tex0) + noise, 0.0, 1.0)
        rgb = np.stack([luma, luma, luma], axis=2)
        nir = np.clip(smooth_noise(rng, shape), 0.0, 1.0)
        mask = region1.astype(np.uint8)

        stem = f"img{i:02d}"
        save_rgb(root / "images" / f"{stem}_rgb.png", rgb)
        save_gray(root / "images" / f"{stem}_nir.png", nir)
        save_ids(root / "masks" / f"{stem}.png", mask)
        entries.append(
            {
                "id": stem,
                "rgb": f"images/{stem}_rgb.png",
                "nir": f"images/{stem}_nir.png",
                "mask": f"masks/{stem}.png",
                "fold": i % 5,
            }
        )
    manifest = {"mode": "outdoor_void", "labels": ["stripe_h", "stripe_v"], "entries": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))

    config = {
        "manifest": "manifest.json",
        "descriptor": "SIFT_l",
        "lam": 1.0,
        "pairwise_mode": "VIS",
        "seed": 0,
        "pca_dim": 16,
        "gmm_components": 8,
        "slr_max_iter": 60,
        "tune_lams": [0.0, 1.0],
    }
    (root / "config.json").write_text(json.dumps(config, indent=2))
    return {
        "root": root,
        "manifest": root / "manifest.json",
        "config": root / "config.json",
        "masks": root / "masks",
        "images": root / "images",
    }


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    return build_tiny_corpus(tmp_path_factory.mktemp("tiny_corpus"))


@pytest.fixture(scope="session")
def tiny_bundle(tiny_corpus):
    """One trained model on folds 0-2 of the tiny corpus, shared per session."""
    from mscrf.bundle import TrainSettings, train_bundle
    from mscrf.experiment import parse_descriptor_spec
    from mscrf.imageio import load_manifest

    manifest = load_manifest(tiny_corpus["manifest"])
    settings = TrainSettings(pca_dim=16, gmm_components=8, slr_max_iter=60, seed=0)
    bundle = train_bundle(
        manifest, [0, 1, 2], parse_descriptor_spec("SIFT_l"), settings
    )
    return manifest, bundle


# --- NIR-benefit corpus (acceptance) --------------------------------------------

NIR_SIZE = 64
NIR_IMAGES = 40


def build_nir_benefit_corpus(root: Path) -> dict:
    """40 two-region RGB+NIR images whose classes differ only in NIR texture.

    Every scene is one class region next to an unlabeled (void) backdrop.
    All regions of all images share one smooth-noise RGB process, so
    visible-only descriptors carry no class signal; the class region's NIR
    plane carries horizontal stripes for class 0 and vertical stripes for
    class 1 (same period and amplitude), while the backdrop's NIR is
    unstructured noise.

    The images are far smaller than the coarsest patch scale, so most
    patch windows cover (nearly) the whole image.  With a void backdrop
    those windows' majority label is the image's single class and their
    votes agree with every scored pixel; splitting one image between two
    scored classes instead would hand all of them one side's label and
    the aggregation would drown the fine patches that carry the per-pixel
    signal.  The backdrop width and side vary per image.
    """
    root.mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(exist_ok=True)
    (root / "masks").mkdir(exist_ok=True)
    entries = []
    shape = (NIR_SIZE, NIR_SIZE)
    for i in range(NIR_IMAGES):
        rng = np.random.default_rng([777, i])
        rgb = np.stack([smooth_noise(rng, shape) for _ in range(3)], axis=2)
        class_id = i % 2
        class_nir = stripes(shape, axis=class_id, period=8)
        void_nir = smooth_noise(rng, shape)
        split = int(rng.integers(24, NIR_SIZE - 24 + 1))
        in_class = np.arange(NIR_SIZE)[None, :] < split
        if (i // 2) % 2:
            in_class = ~in_class
        in_class = np.broadcast_to(in_class, shape)
        nir = np.where(in_class, class_nir, void_nir) + 0.05 * smooth_noise(rng, shape)
        nir = np.clip(nir, 0.0, 1.0)
        mask = np.where(in_class, class_id, VOID_ID).astype(np.uint8)

        stem = f"pair{i:02d}"
        save_rgb(root / "images" / f"{stem}_rgb.png", rgb)
        save_gray(root / "images" / f"{stem}_nir.png", nir)
        save_ids(root / "masks" / f"{stem}.png", mask)
        # folds 0..2 hold the 30 training images, fold 3 the 10 test images
        entries.append(
            {
                "id": stem,
                "rgb": f"images/{stem}_rgb.png",
                "nir": f"images/{stem}_nir.png",
                "mask": f"masks/{stem}.png",
                "fold": i % 3 if i < 30 else 3,
            }
        )
    manifest = {"mode": "outdoor_void", "labels": ["ground", "canopy"], "entries": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return {"root": root, "manifest": root / "manifest.json"}


@pytest.fixture(scope="session")
def nir_benefit_corpus(tmp_path_factory):
    return build_nir_benefit_corpus(tmp_path_factory.mktemp("nir_corpus"))


# --- misc helpers ----------------------------------------------------------------


def make_image(channels: dict, source_id="test"):
    from mscrf.imageio import MultiChannelImage

    first = next(iter(channels.values()))
    h, w = np.asarray(first).shape
    return MultiChannelImage(w, h, channels, source_id)
