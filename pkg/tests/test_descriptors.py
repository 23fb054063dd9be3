import numpy as np
import pytest

from mscrf.channels import CHANNEL_SETS, ensure_channels
from mscrf.descriptors import (
    COL_DIM,
    KIND_COL,
    KIND_SIFT,
    SIFT_CLAMP,
    SIFT_DIM,
    PatchDescriptor,
    col_descriptor,
    col_descriptors,
    compose_descriptor,
    compute_descriptors,
    descriptor_dim,
    sift_descriptor,
    sift_descriptors,
)
from mscrf.errors import MissingChannel
from mscrf.patches import PATCH_SIZE, PatchSpec, grid_patches

from conftest import make_image


def ramp_tile(axis=1):
    """Tile increasing along one axis; gradient points along +x or +y."""
    coord = np.arange(PATCH_SIZE) / (PATCH_SIZE - 1)
    return np.broadcast_to(
        coord[None, :] if axis == 1 else coord[:, None], (PATCH_SIZE, PATCH_SIZE)
    ).copy()


# --- SIFT ------------------------------------------------------------------------


def test_constant_tile_is_zero_vector():
    for v in (0.0, 0.5, 1.0):
        d = sift_descriptor(np.full((PATCH_SIZE, PATCH_SIZE), v))
        assert d.shape == (SIFT_DIM,)
        assert np.array_equal(d, np.zeros(SIFT_DIM))


def test_sift_is_unit_norm():
    rng = np.random.default_rng(0)
    descs = sift_descriptors(rng.random((20, PATCH_SIZE, PATCH_SIZE)))
    assert np.allclose(np.linalg.norm(descs, axis=1), 1.0)


def test_horizontal_ramp_votes_single_bin():
    d = sift_descriptor(ramp_tile(axis=1))
    hist = d.reshape(4, 4, 8)
    # gradient +x everywhere -> orientation angle 0 -> bin 0 only
    assert np.all(hist[:, :, 1:] == 0.0)
    assert np.all(hist[:, :, 0] > 0.0)
    assert np.count_nonzero(d) == 16


def test_vertical_ramp_votes_quarter_turn_bin():
    d = sift_descriptor(ramp_tile(axis=0))
    hist = d.reshape(4, 4, 8)
    # gradient +y -> angle pi/2 -> bin 2
    nz = np.nonzero(hist.sum(axis=(0, 1)))[0]
    assert nz.tolist() == [2]


def test_quarter_rotation_permutes_entries():
    rng = np.random.default_rng(1)
    tile = rng.random((PATCH_SIZE, PATCH_SIZE))
    a = sift_descriptor(tile)
    b = sift_descriptor(np.rot90(tile))
    # rotation by 90 degrees permutes (cell, orientation) pairs
    assert np.allclose(np.sort(a), np.sort(b), atol=1e-9)
    assert not np.allclose(a, b)


def test_rotation_shifts_pure_orientation_bins():
    d = sift_descriptor(np.rot90(ramp_tile(axis=1)))
    nz = np.nonzero(d.reshape(4, 4, 8).sum(axis=(0, 1)))[0]
    # +x gradient rotated CCW by 90 degrees points down the row axis: bin 6
    assert nz.tolist() == [6]


def test_entries_respect_soft_clamp():
    rng = np.random.default_rng(2)
    descs = sift_descriptors(rng.random((50, PATCH_SIZE, PATCH_SIZE)))
    # after clamp + renormalisation entries can exceed 0.2 only slightly
    assert descs.max() <= SIFT_CLAMP + 0.05
    assert descs.min() >= 0.0


def test_sift_is_invariant_to_affine_intensity():
    rng = np.random.default_rng(3)
    tile = rng.random((PATCH_SIZE, PATCH_SIZE))
    a = sift_descriptor(tile)
    b = sift_descriptor(np.clip(0.4 * tile + 0.1, 0, 1))
    assert np.allclose(a, b, atol=1e-10)


def test_sift_batch_matches_singles_across_block_boundary():
    rng = np.random.default_rng(4)
    tiles = rng.random((7, PATCH_SIZE, PATCH_SIZE))
    batch = sift_descriptors(tiles, block=3)  # forces multiple blocks
    for i in range(7):
        # block boundaries must not change results beyond summation order
        assert np.allclose(batch[i], sift_descriptor(tiles[i]), rtol=0, atol=1e-12)


def test_sift_rejects_wrong_tile_shape():
    with pytest.raises(ValueError):
        sift_descriptors(np.zeros((2, 16, 16)))


# --- colour statistics ----------------------------------------------------------------


def test_col_matches_hand_loop():
    rng = np.random.default_rng(5)
    tile = rng.random((PATCH_SIZE, PATCH_SIZE))
    d = col_descriptor(tile)
    expected = np.empty(COL_DIM)
    k = 0
    for cy in range(4):
        for cx in range(4):
            cellpix = tile[cy * 8 : (cy + 1) * 8, cx * 8 : (cx + 1) * 8]
            expected[2 * k] = cellpix.mean()
            expected[2 * k + 1] = cellpix.std()
            k += 1
    # reductions over strided views may differ from the loop in the last ulp
    assert np.allclose(d, expected, rtol=0, atol=1e-14)


def test_col_constant_tile():
    d = col_descriptor(np.full((PATCH_SIZE, PATCH_SIZE), 0.3))
    assert np.allclose(d[0::2], 0.3)
    assert np.allclose(d[1::2], 0.0)


def test_col_affine_intensity_maps_mean_and_std():
    rng = np.random.default_rng(6)
    tile = rng.random((PATCH_SIZE, PATCH_SIZE))
    a, b = 0.5, 0.2
    d0 = col_descriptor(tile)
    d1 = col_descriptor(a * tile + b)
    assert np.allclose(d1[0::2], a * d0[0::2] + b, atol=1e-12)
    assert np.allclose(d1[1::2], a * d0[1::2], atol=1e-12)


def test_col_batch_matches_singles():
    rng = np.random.default_rng(7)
    tiles = rng.random((5, PATCH_SIZE, PATCH_SIZE))
    batch = col_descriptors(tiles)
    for i in range(5):
        assert np.array_equal(batch[i], col_descriptor(tiles[i]))


# --- dimensionality table ---------------------------------------------------------------


@pytest.mark.parametrize(
    "kind,set_name,dim",
    [
        (KIND_COL, "rgb", 96),
        (KIND_COL, "rgbn", 128),
        (KIND_COL, "p1234", 128),
        (KIND_SIFT, "l", 128),
        (KIND_SIFT, "n", 128),
        (KIND_SIFT, "p1", 128),
        (KIND_SIFT, "rgb", 384),
        (KIND_SIFT, "rgbn", 512),
        (KIND_SIFT, "p1234", 512),
    ],
)
def test_descriptor_dims(kind, set_name, dim):
    assert descriptor_dim(kind, CHANNEL_SETS[set_name]) == dim


def test_descriptor_dim_rejects_bad_input():
    with pytest.raises(ValueError):
        descriptor_dim("HOG", ("R",))
    with pytest.raises(ValueError):
        descriptor_dim(KIND_SIFT, ())


# --- per-image composition -----------------------------------------------------------


def two_channel_image(h=64, w=64, seed=8):
    rng = np.random.default_rng(seed)
    return make_image(
        {
            "R": rng.random((h, w)),
            "G": rng.random((h, w)),
            "B": rng.random((h, w)),
            "NIR": rng.random((h, w)),
        }
    )


def test_compute_descriptors_concatenates_channel_blocks():
    img = two_channel_image()
    specs = grid_patches(64, 64)[:6]
    full = compute_descriptors(img, specs, KIND_COL, ("R", "NIR"))
    assert full.shape == (6, 2 * COL_DIM)
    just_r = compute_descriptors(img, specs, KIND_COL, ("R",))
    just_n = compute_descriptors(img, specs, KIND_COL, ("NIR",))
    assert np.array_equal(full[:, :COL_DIM], just_r)
    assert np.array_equal(full[:, COL_DIM:], just_n)


def test_channel_order_matters():
    img = two_channel_image(seed=9)
    specs = grid_patches(64, 64)[:3]
    ab = compute_descriptors(img, specs, KIND_COL, ("R", "G"))
    ba = compute_descriptors(img, specs, KIND_COL, ("G", "R"))
    assert not np.array_equal(ab, ba)
    assert np.array_equal(ab[:, :COL_DIM], ba[:, COL_DIM:])


def test_compute_descriptors_missing_channel():
    img = make_image({c: np.zeros((64, 64)) for c in "RGB"})
    specs = grid_patches(64, 64)[:1]
    with pytest.raises(MissingChannel):
        compute_descriptors(img, specs, KIND_SIFT, ("NIR",))


def test_compose_descriptor_uses_derived_luma():
    img = ensure_channels(two_channel_image(seed=10), ("L",))
    spec = grid_patches(64, 64)[0]
    d = compose_descriptor(img, spec, KIND_SIFT, ("L",))
    assert d.vector.shape == (SIFT_DIM,)
    assert d.kind == KIND_SIFT and d.channel_set == ("L",)
    assert d.spec == spec


def test_patch_descriptor_vector_read_only():
    d = PatchDescriptor(np.ones(4), KIND_COL, ("R",), PatchSpec((16, 16), 0))
    with pytest.raises(ValueError):
        d.vector[0] = 2.0
