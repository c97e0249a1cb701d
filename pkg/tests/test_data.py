import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitqoe.data import (DatasetError, FeatureRanking, QualityDataset, dataset_to_csv,
                         detect_diff_scale, load_dataset_csv, reorder_by_ranking,
                         select_top_k, shuffle, write_dataset_csv)

from conftest import make_dataset


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_basic(tmp_path):
    p = _write(tmp_path, "a,b,MOS,CI95\n1,2,3.5,0.2\n4,5,4.0,0.1\n")
    ds = load_dataset_csv(p)
    assert ds.column_names == ("a", "b")
    assert ds.X.tolist() == [[1, 2], [4, 5]]
    assert ds.mos.tolist() == [3.5, 4.0]
    assert ds.ci95.tolist() == [0.2, 0.1]


def test_load_without_ci(tmp_path):
    ds = load_dataset_csv(_write(tmp_path, "MOS,x\n2,7\n"))
    assert not ds.has_ci and ds.column_names == ("x",)


def test_load_whitelist(tmp_path):
    p = _write(tmp_path, "a,b,c,MOS\n1,2,3,3\n")
    assert load_dataset_csv(p, ["c", "a"]).column_names == ("a", "c")
    with pytest.raises(DatasetError, match="whitelisted"):
        load_dataset_csv(p, ["zzz"])


def test_non_numeric_cell_reports_row_and_column(tmp_path):
    p = _write(tmp_path, "x,MOS\n1,3\n2,3\nabc,3\n")
    with pytest.raises(DatasetError) as e:
        load_dataset_csv(p)
    msg = str(e.value)
    assert "'abc'" in msg and "row 3" in msg and "'x'" in msg


def test_header_only_is_empty_dataset(tmp_path):
    with pytest.raises(DatasetError, match="empty dataset"):
        load_dataset_csv(_write(tmp_path, "x,MOS\n"))


@pytest.mark.parametrize("text,match", [
    ("", "empty file"),
    ("x,y\n1,2\n", "MOS"),
    ("x,MOS\n1,2,3\n", "cells"),
    ("x,MOS\n1,7\n", r"\[1,5\]"),
    ("x,MOS\n1,nan\n", "non-finite"),
    ("x,MOS,CI95\n1,3,-0.1\n", "non-negative"),
])
def test_load_rejects(tmp_path, text, match):
    with pytest.raises(DatasetError, match=match):
        load_dataset_csv(_write(tmp_path, text))


def test_dataset_validation():
    with pytest.raises(DatasetError):
        QualityDataset(("a",), np.zeros((0, 1)), np.zeros(0))
    with pytest.raises(DatasetError):
        QualityDataset(("a", "a"), np.ones((1, 2)), [3.0])
    with pytest.raises(DatasetError):
        QualityDataset(("a",), np.ones((2, 1)), [3.0])
    with pytest.raises(DatasetError):
        QualityDataset(("a",), np.ones(2), [3.0, 3.0])


def test_arrays_are_read_only(small_ds):
    with pytest.raises(ValueError):
        small_ds.X[0, 0] = 1.0
    with pytest.raises(ValueError):
        small_ds.mos[0] = 1.0


def test_samples_view(small_ds):
    s = small_ds.samples[3]
    assert s.features == tuple(small_ds.X[3])
    assert s.mos == small_ds.mos[3] and s.ci95 == small_ds.ci95[3]


def test_csv_round_trip_exact(tmp_path, small_ds):
    p = tmp_path / "rt.csv"
    write_dataset_csv(small_ds, p)
    back = load_dataset_csv(p)
    assert back.column_names == small_ds.column_names
    np.testing.assert_array_equal(back.X, small_ds.X)
    np.testing.assert_array_equal(back.mos, small_ds.mos)
    np.testing.assert_array_equal(back.ci95, small_ds.ci95)
    assert dataset_to_csv(back) == dataset_to_csv(small_ds)


def test_ranking_from_importances_sorted_and_normalized():
    r = FeatureRanking.from_importances(["a", "b", "c", "d"], [1.0, 3.0, 1.0, 0.0])
    assert r.names == ["b", "a", "c", "d"]
    assert sum(v for _, v in r.entries) == pytest.approx(1.0)


def test_ranking_csv_round_trip(tmp_path):
    r = FeatureRanking.from_importances(["x", "y"], [0.3, 0.7])
    r.to_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "feature,importance"
    assert FeatureRanking.from_csv(tmp_path / "r.csv") == r


def test_ranking_rejects_negative():
    with pytest.raises(DatasetError):
        FeatureRanking((("a", -1.0),))


def test_reorder_and_top_k(small_ds):
    ds = reorder_by_ranking(small_ds, ["c", "a"])
    assert ds.column_names == ("c", "a")
    np.testing.assert_array_equal(ds.X[:, 0], small_ds.X[:, 2])
    assert select_top_k(ds, 1).column_names == ("c",)
    with pytest.raises(DatasetError):
        select_top_k(ds, 3)
    with pytest.raises(DatasetError):
        reorder_by_ranking(small_ds, ["nope"])


def test_shuffle_is_seeded_permutation(small_ds):
    a, b = shuffle(small_ds, 3), shuffle(small_ds, 3)
    np.testing.assert_array_equal(a.X, b.X)
    assert sorted(a.mos.tolist()) == sorted(small_ds.mos.tolist())
    assert not np.array_equal(shuffle(small_ds, 4).mos, a.mos)


def test_detect_diff_scale():
    assert detect_diff_scale(make_dataset([[50.0], [0.0]], [3, 3], names=["xDiff"])) == "percent"
    assert detect_diff_scale(make_dataset([[0.5], [0.0]], [3, 3], names=["xDiff"])) == "fraction"
    assert detect_diff_scale(make_dataset([[50.0]], [3], names=["x"])) == "none"


@given(st.integers(1, 20), st.integers(1, 5), st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_take_rows_columns_consistent(n, f, seed):
    rng = np.random.default_rng(seed)
    ds = make_dataset(rng.normal(size=(n, f)), rng.uniform(1, 5, n), rng.uniform(0, 1, n))
    idx = rng.permutation(n)
    sub = ds.take_rows(idx)
    np.testing.assert_array_equal(sub.X, ds.X[idx])
    np.testing.assert_array_equal(sub.ci95, ds.ci95[idx])
    cols = list(reversed(range(f)))
    assert ds.take_columns(cols).column_names == tuple(ds.column_names[c] for c in cols)


@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_reorder_then_top_k_equals_prefix_selection(f, seed):
    rng = np.random.default_rng(seed)
    ds = make_dataset(rng.normal(size=(6, f)), rng.uniform(1, 5, 6))
    ranking = FeatureRanking.from_importances(list(ds.column_names), rng.random(f))
    ordered = reorder_by_ranking(ds, ranking)
    for k in range(1, f + 1):
        top = select_top_k(ordered, k)
        direct = reorder_by_ranking(ds, ranking.names[:k])
        assert top.column_names == direct.column_names
        np.testing.assert_array_equal(top.X, direct.X)


@given(st.integers(1, 30), st.integers(0, 2**31 - 1), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_shuffle_preserves_row_multiset(n, data_seed, seed):
    rng = np.random.default_rng(data_seed)
    ds = make_dataset(np.round(rng.normal(size=(n, 2)), 1), rng.integers(1, 6, n),
                      rng.uniform(0, 1, n))
    out = shuffle(ds, seed)

    def rows(d):
        return sorted(zip(map(tuple, d.X.tolist()), d.mos.tolist(), d.ci95.tolist()))
    assert rows(out) == rows(ds)
    if n == 1:
        np.testing.assert_array_equal(out.X, ds.X)
