import numpy as np
import pytest
import scipy.stats

from mscrf.crf import Labeling
from mscrf.errors import (
    EmptyBand,
    EmptyMatrix,
    LengthMismatch,
    ShapeMismatch,
    UnknownLabel,
)
from mscrf.evaluation import (
    ConfusionMatrix,
    accumulate_confusion,
    boundary_pixels,
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
)
from mscrf.imageio import (
    MODE_INDOOR,
    MODE_OUTDOOR,
    VOID_ID,
    DatasetManifest,
    LabelMask,
)


def outdoor_manifest(n=2):
    return DatasetManifest(
        mode=MODE_OUTDOOR,
        label_names=tuple(f"c{i}" for i in range(n)),
        entries=(),
    )


def indoor_manifest(n=2):
    return DatasetManifest(
        mode=MODE_INDOOR,
        label_names=tuple(f"c{i}" for i in range(n)),
        entries=(),
    )


def mask_of(arr, manifest):
    arr = np.asarray(arr, dtype=np.int32)
    return LabelMask(
        arr.shape[1],
        arr.shape[0],
        arr,
        void_id=manifest.void_id,
        background_id=manifest.background_id,
    )


def cm(counts, ids=None):
    counts = np.asarray(counts)
    if ids is None:
        ids = tuple(range(counts.shape[0]))
    return ConfusionMatrix(counts, ids)


# --- confusion accumulation -----------------------------------------------------------


def test_perfect_prediction_is_diagonal():
    m = outdoor_manifest()
    gt = mask_of([[0, 0], [1, 1]], m)
    pred = Labeling(gt.labels.copy())
    got = accumulate_confusion(pred, gt, m)
    assert np.array_equal(got.counts, [[2, 0], [0, 2]])


def test_void_pixels_are_skipped():
    m = outdoor_manifest()
    gt = mask_of([[0, VOID_ID], [1, VOID_ID]], m)
    pred = Labeling(np.array([[1, 0], [1, 1]], dtype=np.int32))
    got = accumulate_confusion(pred, gt, m)
    assert got.total == 2
    assert got.counts[0, 1] == 1 and got.counts[1, 1] == 1


def test_indoor_background_is_scored_as_last_class():
    m = indoor_manifest()
    gt = mask_of([[0, 2], [1, 2]], m)  # 2 == background id
    pred = Labeling(np.array([[0, 2], [2, 1]], dtype=np.int32))
    got = accumulate_confusion(pred, gt, m)
    assert got.class_ids == (0, 1, 2)
    assert got.counts[0, 0] == 1
    assert got.counts[2, 2] == 1
    assert got.counts[1, 2] == 1
    assert got.counts[2, 1] == 1


def test_confusion_addition_pools_counts():
    m = outdoor_manifest()
    gt1 = mask_of([[0, 1]], m)
    gt2 = mask_of([[1, 1]], m)
    p1 = Labeling(np.array([[0, 0]], dtype=np.int32))
    p2 = Labeling(np.array([[1, 0]], dtype=np.int32))
    pooled = accumulate_confusion(p1, gt1, m) + accumulate_confusion(p2, gt2, m)
    both = np.concatenate([gt1.labels, gt2.labels], axis=1)
    preds = np.concatenate([p1.labels, p2.labels], axis=1)
    direct = accumulate_confusion(
        Labeling(preds), mask_of(both, m), m
    )
    assert np.array_equal(pooled.counts, direct.counts)


def test_out_of_range_prediction_rejected():
    m = outdoor_manifest()
    gt = mask_of([[0, 1]], m)
    with pytest.raises(UnknownLabel):
        accumulate_confusion(Labeling(np.array([[0, 5]], dtype=np.int32)), gt, m)


def test_shape_mismatch_rejected():
    m = outdoor_manifest()
    gt = mask_of([[0, 1]], m)
    with pytest.raises(ShapeMismatch):
        accumulate_confusion(Labeling(np.zeros((2, 2), dtype=np.int32)), gt, m)


def test_scored_ids_and_empty_matrix():
    assert scored_class_ids(outdoor_manifest(3)) == (0, 1, 2)
    assert scored_class_ids(indoor_manifest(3)) == (0, 1, 2, 3)
    e = empty_confusion(indoor_manifest(2))
    assert e.counts.shape == (3, 3) and e.total == 0


# --- scalar metrics -----------------------------------------------------------------------


def test_overall_accuracy_fixture():
    assert abs(overall_accuracy(cm([[3, 1], [1, 3]])) - 0.75) < 1e-12


def test_class_accuracy_fixture():
    # recalls 0.9 and 0.5 -> mean 0.7
    assert abs(class_accuracy(cm([[9, 1], [5, 5]])) - 0.7) < 1e-12


def test_jaccard_fixture():
    # each class: intersection 2, union 6
    assert abs(jaccard_index(cm([[2, 2], [2, 2]])) - 1.0 / 3.0) < 1e-12


def test_perfect_scores():
    perfect = cm([[7, 0], [0, 4]])
    assert overall_accuracy(perfect) == 1.0
    assert class_accuracy(perfect) == 1.0
    assert jaccard_index(perfect) == 1.0


def test_per_class_views():
    matrix = cm([[9, 1], [5, 5]])
    assert per_class_accuracy(matrix) == {0: 0.9, 1: 0.5}
    jac = per_class_jaccard(matrix)
    assert np.isclose(jac[0], 9 / 15)
    assert np.isclose(jac[1], 5 / 11)


def test_absent_class_excluded_from_means():
    # class 2 never appears in truth or prediction
    matrix = cm([[4, 0, 0], [1, 3, 0], [0, 0, 0]])
    assert 2 not in per_class_accuracy(matrix)
    assert 2 not in per_class_jaccard(matrix)
    assert np.isclose(class_accuracy(matrix), (1.0 + 0.75) / 2)


def test_predicted_only_class_counts_for_jaccard():
    # class 1 absent from truth but predicted once: IoU 0 must count
    matrix = cm([[3, 1], [0, 0]])
    jac = per_class_jaccard(matrix)
    assert jac[1] == 0.0
    assert 1 not in per_class_accuracy(matrix)


def test_empty_matrix_raises():
    with pytest.raises(EmptyMatrix):
        overall_accuracy(cm([[0, 0], [0, 0]]))
    with pytest.raises(EmptyMatrix):
        jaccard_index(cm([[0, 0], [0, 0]]))


def test_confusion_addition_requires_same_classes():
    with pytest.raises(ShapeMismatch):
        cm([[1]]) + cm([[1, 0], [0, 1]])


# --- boundary bands -------------------------------------------------------------------------


def split_mask(manifest, h=4, w=4):
    arr = np.zeros((h, w), dtype=np.int32)
    arr[:, w // 2 :] = 1
    return mask_of(arr, manifest)


def test_boundary_pixels_vertical_split():
    m = outdoor_manifest()
    b = boundary_pixels(split_mask(m))
    expected = np.zeros((4, 4), dtype=bool)
    expected[:, 1:3] = True
    assert np.array_equal(b, expected)


def test_boundary_ignores_void_edges():
    m = outdoor_manifest()
    arr = np.zeros((2, 3), dtype=np.int32)
    arr[:, 1] = VOID_ID
    arr[:, 2] = 1
    b = boundary_pixels(mask_of(arr, m))
    # the 0|void and void|1 contacts are not label boundaries
    assert not b.any()


def test_trimap_radius_one_scores_boundary_only():
    m = outdoor_manifest()
    gt = split_mask(m)
    pred_arr = gt.labels.copy()
    pred_arr[0, 1] = 1  # one wrong boundary pixel
    pred_arr[3, 3] = 0  # one wrong pixel outside the radius-1 band
    curve = trimap_curve([Labeling(pred_arr)], [gt], radii=(1, 2))
    assert curve.total[0] == 8
    assert curve.correct[0] == 7
    assert abs(curve.accuracy[0] - 7 / 8) < 1e-12
    # radius 2 covers the whole 4-wide image; both errors now count
    assert curve.total[1] == 16
    assert curve.correct[1] == 14


def test_trimap_bands_nest():
    m = outdoor_manifest()
    rng = np.random.default_rng(0)
    gt_arr = (rng.random((12, 12)) < 0.5).astype(np.int32)
    gt = mask_of(gt_arr, m)
    pred = Labeling((rng.random((12, 12)) < 0.5).astype(np.int32))
    curve = trimap_curve([pred], [gt], radii=(1, 2, 3, 4))
    assert list(curve.total) == sorted(curve.total)
    for c, t in zip(curve.correct, curve.total):
        assert 0 <= c <= t


def test_trimap_pools_across_images():
    m = outdoor_manifest()
    gt = split_mask(m)
    good = Labeling(gt.labels.copy())
    bad_arr = gt.labels.copy()
    bad_arr[:, 1] = 1  # all four left-boundary pixels wrong
    curve = trimap_curve([good, Labeling(bad_arr)], [gt, gt], radii=(1,))
    assert curve.total[0] == 16
    assert curve.correct[0] == 12


def test_trimap_skips_boundary_free_images():
    m = outdoor_manifest()
    flat = mask_of(np.zeros((4, 4), dtype=np.int32), m)
    gt = split_mask(m)
    pred = Labeling(gt.labels.copy())
    curve = trimap_curve(
        [Labeling(flat.labels.copy()), pred], [flat, gt], radii=(1,)
    )
    assert curve.total[0] == 8  # only the split image contributes


def test_trimap_all_flat_raises_empty_band():
    m = outdoor_manifest()
    flat = mask_of(np.zeros((4, 4), dtype=np.int32), m)
    with pytest.raises(EmptyBand):
        trimap_curve([Labeling(flat.labels.copy())], [flat], radii=(1, 2))


def test_trimap_void_pixels_not_scored():
    m = outdoor_manifest()
    arr = np.zeros((4, 4), dtype=np.int32)
    arr[:, 2:] = 1
    arr[0, 1] = VOID_ID  # void pixel adjacent to the boundary
    gt = mask_of(arr, m)
    pred = Labeling(np.where(arr == VOID_ID, 0, arr).astype(np.int32))
    curve = trimap_curve([pred], [gt], radii=(1,))
    band_total = curve.total[0]
    # the void pixel is inside the band region but must not be counted
    assert band_total < 8


def test_trimap_input_validation():
    m = outdoor_manifest()
    gt = split_mask(m)
    with pytest.raises(LengthMismatch):
        trimap_curve([], [gt])
    with pytest.raises(ValueError):
        trimap_curve([Labeling(gt.labels.copy())], [gt], radii=(0,))


# --- paired t-test --------------------------------------------------------------------------


def test_t_test_identical_scores():
    assert paired_t_test([0.5, 0.6, 0.7], [0.5, 0.6, 0.7]) == (0.0, 1.0)


def test_t_test_constant_nonzero_difference():
    # exact binary fractions so every pairwise difference is exactly 0.25
    a, b = [0.75, 1.25, 1.5], [0.5, 1.0, 1.25]
    t, p = paired_t_test(a, b)
    assert t == np.inf and p == 0.0
    t, p = paired_t_test(b, a)
    assert t == -np.inf and p == 0.0


def test_t_test_matches_scipy():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a = rng.random(12)
        b = a + 0.05 * rng.standard_normal(12)
        t, p = paired_t_test(a, b)
        ref = scipy.stats.ttest_rel(a, b)
        assert np.isclose(t, ref.statistic, atol=1e-10)
        assert np.isclose(p, ref.pvalue, atol=1e-10)


def test_t_test_antisymmetric():
    rng = np.random.default_rng(2)
    a, b = rng.random(8), rng.random(8)
    t1, p1 = paired_t_test(a, b)
    t2, p2 = paired_t_test(b, a)
    assert np.isclose(t1, -t2) and np.isclose(p1, p2)


def test_t_test_needs_pairs():
    with pytest.raises(LengthMismatch):
        paired_t_test([1.0], [0.5])
    with pytest.raises(LengthMismatch):
        paired_t_test([1.0, 2.0], [0.5])


# --- report rendering --------------------------------------------------------------------------


def test_dumps_metrics_is_deterministic():
    doc = {"b": 1, "a": [1.5, 2.5], "c": {"y": None, "x": "s"}}
    assert dumps_metrics(doc) == dumps_metrics(dict(reversed(doc.items())))
    assert dumps_metrics(doc).endswith("\n")


def test_confusion_csv(tmp_path):
    path = tmp_path / "cm.csv"
    write_confusion_csv(cm([[3, 1], [0, 2]]), path)
    lines = path.read_text().strip().splitlines()
    assert lines[0].endswith("0,1")
    assert lines[1].endswith("3,1")
    assert lines[2].endswith("0,2")


def test_trimap_csv_and_plot(tmp_path):
    m = outdoor_manifest()
    gt = split_mask(m)
    curve = trimap_curve([Labeling(gt.labels.copy())], [gt], radii=(1, 2))
    csv_path = tmp_path / "t.csv"
    write_trimap_csv(curve, csv_path)
    body = csv_path.read_text()
    assert "1," in body and "2," in body
    png_path = tmp_path / "t.png"
    plot_trimap({"run": curve}, png_path)
    assert png_path.stat().st_size > 0
