import numpy as np
import pytest

from ganodet.errors import (
    EmptyInputError,
    EmptyMaskError,
    ShapeMismatchError,
    SingleClassError,
)
from ganodet.evalharness import (
    ScoredItem,
    best_f1_sweep,
    f1_at_threshold,
    histogram_csv_rows,
    localization_overlap,
    make_eval_report,
    per_class_histogram,
    pixel_difference_histogram,
    roc_auc,
)


def items_from(abnormal, normal):
    out = [ScoredItem(f"a{i}", 1, s) for i, s in enumerate(abnormal)]
    out += [ScoredItem(f"n{i}", 0, s) for i, s in enumerate(normal)]
    return out


def brute_force_auc(items):
    abn = [i.score for i in items if i.true_label == 1]
    nor = [i.score for i in items if i.true_label != 1]
    total = 0.0
    for a in abn:
        for n in nor:
            total += 1.0 if a > n else (0.5 if a == n else 0.0)
    return total / (len(abn) * len(nor))


def brute_force_f1(items):
    best = (-1.0, None)
    for t in sorted({i.score for i in items}):
        tp = sum(1 for i in items if i.true_label == 1 and i.score >= t)
        fp = sum(1 for i in items if i.true_label != 1 and i.score >= t)
        fn = sum(1 for i in items if i.true_label == 1 and i.score < t)
        f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
        if f1 > best[0]:
            best = (f1, t)
    return best


# ---- ROC-AUC ----------------------------------------------------------------------

def test_auc_perfect_separation():
    assert roc_auc(items_from([3.0, 2.5], [1.0, 0.5])) == 1.0


def test_auc_all_ties():
    assert roc_auc(items_from([1.0, 1.0], [1.0, 1.0, 1.0])) == 0.5


def test_auc_six_item_hand_case():
    items = items_from([0.9, 0.7, 0.4], [0.8, 0.4, 0.1])
    # pairs: (.9 beats all 3) + (.7 beats .4, .1) + (.4 ties .4, beats .1)
    expected = (3 + 2 + 1.5) / 9
    assert roc_auc(items) == pytest.approx(expected)
    assert roc_auc(items) == brute_force_auc(items)


def test_auc_equals_brute_force_on_random_fixtures(rng):
    for _ in range(200):
        n_a = int(rng.integers(1, 12))
        n_n = int(rng.integers(1, 12))
        # quantized scores force plenty of ties
        abn = rng.integers(0, 6, n_a) / 5.0
        nor = rng.integers(0, 6, n_n) / 5.0
        items = items_from(abn.tolist(), nor.tolist())
        assert roc_auc(items) == brute_force_auc(items)


def test_auc_invariant_under_monotone_transform(rng):
    abn = rng.normal(1.0, 1.0, 30).tolist()
    nor = rng.normal(0.0, 1.0, 30).tolist()
    base = roc_auc(items_from(abn, nor))
    warped = roc_auc(items_from([np.exp(s) for s in abn],
                                [np.exp(s) for s in nor]))
    assert base == pytest.approx(warped, abs=1e-15)


def test_auc_single_class_rejected():
    with pytest.raises(SingleClassError):
        roc_auc([ScoredItem("a", 1, 1.0)])


# ---- F1 sweep ---------------------------------------------------------------------------

def test_f1_perfect_separation():
    f1, threshold, confusion = best_f1_sweep(items_from([3.0, 2.0], [1.0, 0.1]))
    assert f1 == 1.0
    assert threshold == 2.0
    assert confusion == {"tp": 2, "fp": 0, "fn": 0, "tn": 2}


def test_f1_hand_case_matches_enumeration():
    items = items_from([0.9, 0.8], [0.1, 0.85])
    f1, threshold, confusion = best_f1_sweep(items)
    bf1, bt = brute_force_f1(items)
    assert f1 == bf1 and threshold == bt
    assert confusion["tp"] + confusion["fn"] == 2
    assert confusion["tn"] + confusion["fp"] == 2


def test_f1_single_top_abnormal():
    items = items_from([0.99], [0.5, 0.4, 0.3])
    f1, threshold, _ = best_f1_sweep(items)
    assert f1 == 1.0 and threshold == 0.99


def test_f1_fixed_point():
    rng = np.random.default_rng(8)
    items = items_from(rng.normal(1, 1, 15).tolist(),
                       rng.normal(0, 1, 15).tolist())
    f1, threshold, _ = best_f1_sweep(items)
    assert f1_at_threshold(items, threshold) == f1


def test_f1_matches_enumeration_on_random_fixtures(rng):
    for _ in range(1000):
        n_a = int(rng.integers(1, 10))
        n_n = int(rng.integers(1, 10))
        abn = (rng.integers(0, 8, n_a) / 7.0).tolist()
        nor = (rng.integers(0, 8, n_n) / 7.0).tolist()
        items = items_from(abn, nor)
        f1, threshold, _ = best_f1_sweep(items)
        bf1, bt = brute_force_f1(items)
        assert f1 == bf1
        assert threshold == bt      # ties break toward the lower threshold


def test_scored_item_rejects_non_finite():
    with pytest.raises(ValueError):
        ScoredItem("x", 1, float("nan"))


# ---- histograms -----------------------------------------------------------------------------

def test_histogram_single_value_occupies_one_bin():
    hist = per_class_histogram([2.0, 2.0, 2.0], [0, 0, 1], bins=4)
    assert hist["classes"]["0"] == [2, 0, 0, 0]
    assert hist["classes"]["1"] == [1, 0, 0, 0]


def test_histogram_counts_conserved(rng):
    values = rng.uniform(0, 10, 200)
    labels = rng.integers(0, 3, 200)
    hist = per_class_histogram(values, labels, bins=16)
    for cls in range(3):
        assert sum(hist["classes"][str(cls)]) == int(np.sum(labels == cls))


def test_histogram_rebinning_pairwise_merge(rng):
    values = rng.uniform(0, 1, 300)
    labels = np.zeros(300, dtype=int)
    fine = per_class_histogram(values, labels, bins=16)["classes"]["0"]
    coarse = per_class_histogram(values, labels, bins=8)["classes"]["0"]
    merged = [fine[2 * i] + fine[2 * i + 1] for i in range(8)]
    assert merged == coarse


def test_histogram_boundary_assignment():
    # 1.0 is an interior edge of [0, 2] with 2 bins: goes to the lower bin;
    # the max goes to the last bin
    hist = per_class_histogram([0.0, 1.0, 2.0], [0, 0, 0], bins=2)
    assert hist["classes"]["0"] == [2, 1]


def test_histogram_validation():
    with pytest.raises(EmptyInputError):
        per_class_histogram([], [], bins=4)
    with pytest.raises(ValueError):
        per_class_histogram([1.0], [0], bins=1)


def test_pixel_histogram_shifts_right_for_abnormal():
    class FakeResult:
        def __init__(self, level):
            self.residual_map = np.full(16, level)

    results = [FakeResult(0.1)] * 10 + [FakeResult(0.9)] * 10
    labels = [0] * 10 + [1] * 10
    hist = pixel_difference_histogram(results, labels, bins=4)
    normal_mass = hist["classes"]["0"]
    abnormal_mass = hist["classes"]["1"]
    assert np.argmax(normal_mass) < np.argmax(abnormal_mass)


def test_pixel_histogram_empty():
    with pytest.raises(EmptyInputError):
        pixel_difference_histogram([], [], bins=4)


def test_histogram_csv_rows_cover_all_bins(rng):
    hist = per_class_histogram(rng.uniform(0, 1, 50),
                               rng.integers(0, 2, 50), bins=5)
    rows = histogram_csv_rows(hist)
    assert len(rows) == 10    # 2 classes x 5 bins
    assert all(len(r) == 4 for r in rows)


# ---- localization ------------------------------------------------------------------------------

def test_localization_perfect():
    residual = np.zeros(25)
    mask = np.zeros(25, dtype=bool)
    mask[[3, 7, 11]] = True
    residual[mask] = 5.0
    assert localization_overlap(residual, mask, top_k=3) == 1.0


def test_localization_disjoint_by_construction():
    residual = np.zeros(25)
    residual[:5] = 9.0
    mask = np.zeros(25, dtype=bool)
    mask[20:] = True
    assert localization_overlap(residual, mask, top_k=5) == 0.0


def test_localization_uniform_residual_matches_permutation_baseline(rng):
    # deterministic top-k on a constant map takes the first k pixels;
    # random masks then recover ~ top_k / total of themselves on average
    total, top_k, mask_size = 100, 20, 10
    residual = np.ones(total)
    recalls = []
    for _ in range(400):
        mask = np.zeros(total, dtype=bool)
        mask[rng.choice(total, mask_size, replace=False)] = True
        recalls.append(localization_overlap(residual, mask, top_k))
    assert np.mean(recalls) == pytest.approx(top_k / total, abs=0.03)


def test_localization_validation():
    with pytest.raises(EmptyMaskError):
        localization_overlap(np.ones(4), np.zeros(4, dtype=bool), 2)
    with pytest.raises(ShapeMismatchError):
        localization_overlap(np.ones(4), np.ones(5, dtype=bool), 2)


# ---- report assembly ------------------------------------------------------------------------------

def test_make_eval_report_fields(rng):
    items = items_from(rng.normal(2, 0.5, 40).tolist(),
                       rng.normal(0, 0.5, 40).tolist())
    report = make_eval_report(items, bins=8)
    assert 0.0 <= report.auc <= 1.0
    assert 0.0 <= report.best_f1 <= 1.0
    conf = report.confusion
    assert conf["tp"] + conf["fp"] + conf["fn"] + conf["tn"] == 80
    payload = report.to_dict()
    assert set(payload) == {"auc", "best_f1", "best_threshold", "confusion",
                            "histogram"}
