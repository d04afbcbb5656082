import math
import warnings

import numpy as np
import pytest
from conftest import make_table
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from shapegnn.dataset import (
    NodeTable,
    SyntheticSpec,
    generate_synthetic,
    load_csv,
    row_normalize_features,
    write_csv,
)
from shapegnn.errors import DataError, SchemaError


def test_load_three_rows_one_label(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("0,0,0,0,0,1.5,2,0.01,\n1,0,1,0,0,1,2,,\n2,1,2,0,0,1,2,,1\n")
    table = load_csv(p)
    assert table.n == 3 and table.d == 2 and table.n_labeled == 1
    assert table.labels[0] == 0.01
    assert table.groups.tolist() == [-1, -1, 1]


def test_header_line_is_skipped(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("id,t,x,y,z,f0,f1,label,group\n0,3,0,0,0,1,2,0.5,0\n1,4,1,0,0,1,2,,0\n")
    table = load_csv(p)
    assert table.n == 2
    assert table.time_steps.tolist() == [3, 4]


def test_wrong_column_count_names_row(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("id,time_step,x,y,z,f0,label,group\n0,0,0,0,0,1,0.5,0\n1,0,0,0,0,1,0.5\n")
    with pytest.raises(SchemaError, match="row 3"):
        load_csv(p)


def test_non_numeric_cell_names_row(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("0,0,0,0,0,abc,0.5,0\n")
    with pytest.raises(SchemaError, match="row 1.*f0"):
        load_csv(p)


def test_unlabeled_file_warns_but_loads(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("0,0,0,0,0,1,,\n1,0,1,0,0,1,,\n")
    with pytest.warns(UserWarning, match="no labeled"):
        table = load_csv(p)
    with pytest.raises(DataError):
        table.require_labels()


def test_invariants_enforced():
    with pytest.raises(DataError):
        make_table([[0, 0, 0]], steps=np.array([-1]))
    with pytest.raises(DataError):
        make_table([[0, 0, np.inf]])
    with pytest.raises(DataError):
        make_table([[0, 0, 0]], features=np.array([[np.nan, 1.0]]))


def test_tables_are_read_only():
    t = make_table([[0, 0, 0], [1, 0, 0]])
    with pytest.raises(ValueError):
        t.features[0, 0] = 5.0


def test_synthetic_counts():
    t = generate_synthetic(SyntheticSpec(n_time_steps=10, points_per_step=10, label_ratio=0.1))
    assert t.n == 100 and t.n_labeled == 10
    assert np.bincount(t.time_steps).tolist() == [10] * 10


def test_synthetic_constant_field_without_noise():
    t = generate_synthetic(SyntheticSpec(field="constant", constant=0.02, noise_sd=0.0, label_ratio=0.5))
    assert np.all(t.labels[t.labeled_mask] == 0.02)
    assert np.all(t.truth == 0.02)


def test_synthetic_is_deterministic(tmp_path):
    spec = SyntheticSpec(seed=7)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert a.equals(b)
    write_csv(a, tmp_path / "a.csv")
    write_csv(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert not a.equals(generate_synthetic(SyntheticSpec(seed=8)))


def test_synthetic_has_informative_and_noise_features():
    t = generate_synthetic(SyntheticSpec(seed=3, noise_sd=0.0))
    corr = [abs(np.corrcoef(t.features[:, j], t.truth)[0, 1]) for j in range(t.d)]
    assert corr[0] > 0.5
    assert corr[-1] < 0.1


@pytest.mark.parametrize("ratio,n", [(0.061, 1000), (0.25, 100), (1.0, 20), (0.035, 100)])
def test_label_count_is_rounded_ratio(ratio, n):
    spec = SyntheticSpec(n_time_steps=n // 10, points_per_step=10, label_ratio=ratio)
    expected = int(math.floor(ratio * n + 0.5))
    assert generate_synthetic(spec).n_labeled == expected


def test_synthetic_spec_preconditions():
    with pytest.raises(ValueError):
        SyntheticSpec(n_time_steps=0)
    with pytest.raises(ValueError):
        SyntheticSpec(label_ratio=0.0)
    with pytest.raises(ValueError):
        SyntheticSpec(field="wavy")


@pytest.mark.parametrize(
    "row,expected",
    [([3.0, 1.0], [0.75, 0.25]), ([0.0, 0.0], [0.0, 0.0]), ([-2.0, 2.0], [-0.5, 0.5])],
)
def test_row_normalize_examples(row, expected):
    t = make_table([[0, 0, 0]], features=np.array([row]))
    out = row_normalize_features(t)
    assert out.features[0].tolist() == expected
    assert t.features[0].tolist() == row


@given(arrays(np.float64, (6, 3), elements=st.floats(-1e6, 1e6)))
def test_row_normalize_unit_l1(feats):
    t = make_table(np.zeros((6, 3)) + np.arange(6)[:, None], features=feats)
    out = row_normalize_features(t).features
    for before, after in zip(feats, out):
        if np.abs(before).sum() > 0:
            assert abs(np.abs(after).sum() - 1.0) < 1e-12
        else:
            assert np.all(after == 0)


finite = st.floats(-1e9, 1e9, allow_nan=False, allow_infinity=False)


@st.composite
def node_tables(draw):
    n = draw(st.integers(1, 8))
    d = draw(st.integers(1, 4))
    pos = draw(arrays(np.float64, (n, 3), elements=finite))
    feats = draw(arrays(np.float64, (n, d), elements=finite))
    labels = draw(arrays(np.float64, (n,), elements=st.one_of(finite, st.just(np.nan))))
    groups = draw(arrays(np.int64, (n,), elements=st.integers(-1, 5)))
    steps = draw(arrays(np.int64, (n,), elements=st.integers(0, 50)))
    ids = draw(st.lists(st.integers(0, 10_000), min_size=n, max_size=n, unique=True))
    truth = draw(st.one_of(st.none(), arrays(np.float64, (n,), elements=finite)))
    return NodeTable(ids=ids, time_steps=steps, positions=pos, features=feats, labels=labels, groups=groups, truth=truth)


@settings(max_examples=60, deadline=None)
@given(node_tables())
def test_csv_round_trip(tmp_path_factory, table):
    path = tmp_path_factory.mktemp("rt") / "table.csv"
    write_csv(table, path)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        back = load_csv(path)
    assert back.equals(table)


def test_metadata_companion(tmp_path):
    import json

    t = generate_synthetic(SyntheticSpec(n_time_steps=3, points_per_step=4, d=3))
    write_csv(t, tmp_path / "w.csv", provenance="unit test")
    meta = json.loads((tmp_path / "w.meta.json").read_text())
    assert meta["d"] == 3 and meta["units"]["label"] == "mm" and meta["provenance"] == "unit test"
    assert (tmp_path / "w.truth.csv").exists()
