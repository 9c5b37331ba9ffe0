import os
import pathlib

import numpy as np
import pytest

import covsev

FIXTURES = pathlib.Path(os.environ.get("COVSEV_FIXTURE_DIR", pathlib.Path(__file__).parents[1] / "fixtures"))


def brute_force_macro_f1(t, p):
    total = 0.0
    for c in range(4):
        tp = sum(1 for a, b in zip(t, p) if a == c and b == c)
        fp = sum(1 for a, b in zip(t, p) if a != c and b == c)
        fn = sum(1 for a, b in zip(t, p) if a == c and b != c)
        den = 2 * tp + fp + fn
        total += 0.0 if den == 0 else 2 * tp / den
    return 100.0 * total / 4


def test_worked_macro_f1_example():
    assert round(covsev.macro_f1([0, 0, 1, 2, 3], [0, 1, 1, 2, 3]), 2) == 83.33


def test_macro_f1_matches_counting_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 30))
        t = rng.integers(0, 4, n).tolist()
        p = rng.integers(0, 4, n).tolist()
        assert abs(covsev.macro_f1(t, p) - brute_force_macro_f1(t, p)) < 1e-9


def test_confusion_matrix_rows_are_truth():
    cm = np.array(covsev.confusion_matrix([0, 1, 1], [0, 0, 1]))
    assert cm[1, 0] == 1 and cm[0, 1] == 0 and cm.sum() == 3


def test_ensemble_mean_and_vote():
    a = np.array([[0.1, 0.2, 0.3, 0.4], [0.7, 0.1, 0.1, 0.1]])
    b = np.array([[0.4, 0.3, 0.2, 0.1], [0.1, 0.7, 0.1, 0.1]])
    np.testing.assert_allclose(covsev.ensemble([a, b]), (a + b) / 2)
    np.testing.assert_array_equal(covsev.ensemble([a, a]), a)
    votes = covsev.ensemble([a, b, b], rule="vote")
    assert votes.argmax(axis=1).tolist() == [0, 1]
    with pytest.raises(covsev.ShapeError):
        covsev.ensemble([np.zeros((2, 3))])


def test_report_dict():
    probs = np.eye(4)[[0, 1, 1, 2, 3]]
    r = covsev.report([0, 0, 1, 2, 3], probs, scenario="x", model="m")
    assert round(r["macro_f1"], 2) == 83.33
    assert r["n"] == 5 and len(r["per_class"]) == 4


def test_schedule():
    ref = covsev.reference_schedule("2d")
    lrs = [covsev.lr_at_epoch(ref["lr"], ref["lr_decay_epochs"], ref["lr_decay_factor"], e) for e in (0, 15, 30)]
    np.testing.assert_allclose(lrs, [1e-4, 1e-5, 1e-6], rtol=1e-12)
    assert covsev.reference_schedule("3d")["epochs"] == 100


def test_fixture_folds():
    rows = covsev.load_manifest(FIXTURES / "cov19ctdb_train.csv")
    assert len(rows) == 462
    ids = [r["scan_id"] for r in rows]
    grades = [r["label"] for r in rows]
    assert covsev.class_distribution(grades) == [133, 124, 166, 39]
    folds = covsev.stratified_kfold(ids, grades, 5, 42)
    assert sorted(folds) == sorted(ids)
    critical = sorted((sum(1 for i, g in zip(ids, grades) if g == 4 and folds[i] == f) for f in range(5)), reverse=True)
    assert critical == [8, 8, 8, 8, 7]
    assert folds == covsev.stratified_kfold(ids, grades, 5, 42)


def test_synthetic_scans_and_packing():
    scans = covsev.synthetic_dataset(1, 3, slices=12, height=24, width=20)
    assert [s["label"] for s in scans] == [1, 2, 3, 4]
    s = scans[0]
    assert s["slices"].shape == (12, 24, 20) and s["slices"].dtype == np.float32
    assert s["lung_masks"].shape == (12, 24, 20)
    assert not (s["infection_masks"] & ~s["lung_masks"].astype(bool)).any()

    same = covsev.pack_volume(s["slices"], (12, 24, 20))
    np.testing.assert_array_equal(same, s["slices"])
    flat = np.full((5, 8, 8), 0.375, dtype=np.float32)
    assert (covsev.pack_volume(flat, (3, 13, 17)) == np.float32(0.375)).all()
    with pytest.raises(covsev.ShapeError):
        covsev.pack_volume(np.zeros((4, 4), dtype=np.float32), (2, 2, 2))


def test_slice_selection():
    assert covsev.select_slices([0.9, 0.1, 0.8], 0.5, 1) == [0, 2]
    assert covsev.select_slices([0.1, 0.3, 0.2], 0.5, 2) == [1, 2]
    scans = covsev.synthetic_dataset(1, 4, slices=10, height=32, width=32)
    scores = [covsev.heuristic_lung_score(sl) for sl in scans[0]["slices"]]
    assert all(0.0 <= v <= 1.0 for v in scores)


def test_manifest_errors(tmp_path):
    bad = tmp_path / "m.csv"
    bad.write_text("scan_id,path,severity,split\na,a,5,train\n")
    with pytest.raises(covsev.ParseError):
        covsev.load_manifest(bad)
    with pytest.raises(covsev.IoError):
        covsev.load_manifest(tmp_path / "missing.csv")
