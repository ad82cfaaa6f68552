import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcgan.data import (ColumnSpec, Dataset, DuplicateColumnError, EmptyFileError,
                        MissingColumnError, RangeViolationError, SchemaError, TableSchema,
                        UnknownCategoryError, ZeroVarianceError, DataError, default_schema,
                        fit_encoder, load_csv, subsample, write_csv)


def small_schema():
    return TableSchema((
        ColumnSpec("a", "continuous", "V", -10.0, 10.0),
        ColumnSpec("b", "continuous", "A", 0.0, 100.0),
        ColumnSpec("step", "categorical", classes=("stabilization", "polarization")),
    ))


def random_dataset(schema, n, seed=0):
    rng = np.random.default_rng(seed)
    cont = np.column_stack([rng.uniform(c.lo, c.hi, n) for c in schema.continuous])
    codes = np.column_stack([rng.integers(0, len(c.classes), n) for c in schema.categorical])
    return Dataset(schema, cont, codes)


def test_default_schema_shape():
    s = default_schema()
    assert s.d == 52
    assert s.encoded_width == 59
    assert s.class_counts == (5, 2)
    assert s.column("Tin_Air").lo == 25 and s.column("Tin_Air").hi == 95
    assert TableSchema.from_json(s.to_json()) == s
    assert default_schema(categoricals=False).encoded_width == 52


def test_column_spec_validation():
    with pytest.raises(SchemaError):
        ColumnSpec("x", "continuous", lo=1.0, hi=1.0)
    with pytest.raises(SchemaError):
        ColumnSpec("c", "categorical", classes=("a", "a"))
    with pytest.raises(SchemaError):
        ColumnSpec("c", "categorical", classes=())
    with pytest.raises(SchemaError):
        TableSchema((ColumnSpec("x", "continuous", lo=0, hi=1), ColumnSpec("x", "continuous", lo=0, hi=1)))


# ---------------------------------------------------------------- CSV


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_load_three_row_file(tmp_path):
    p = _write(tmp_path / "t.csv", "b,a,step\n1,2,polarization\n3,-4,stabilization\n5,0.5,polarization\n")
    ds, report = load_csv(small_schema(), p)
    assert ds.n_rows == 3
    assert report.ok
    assert ds.column("a").tolist() == [2.0, -4.0, 0.5]
    assert ds.labels("step").tolist() == ["polarization", "stabilization", "polarization"]


def test_missing_column_named(tmp_path):
    schema = default_schema()
    header = [n for n in schema.names if n != "V_stack"]
    p = _write(tmp_path / "m.csv", ",".join(header) + "\n")
    with pytest.raises(MissingColumnError, match="V_stack"):
        load_csv(schema, p)


def test_duplicate_and_empty(tmp_path):
    with pytest.raises(DuplicateColumnError):
        load_csv(small_schema(), _write(tmp_path / "d.csv", "a,a,b,step\n"))
    with pytest.raises(EmptyFileError):
        load_csv(small_schema(), _write(tmp_path / "e.csv", ""))


def test_range_violation_reported(tmp_path):
    ds = random_dataset(default_schema(), 4)
    ds.continuous[2, ds.schema.continuous_names.index("Tin_Air")] = 120.0
    write_csv(ds, tmp_path / "r.csv")
    back, report = load_csv(default_schema(), tmp_path / "r.csv")
    assert back.n_rows == 4
    assert len(report.violations) == 1
    v = report.violations[0]
    assert (v.row, v.column, v.value) == (2, "Tin_Air", 120.0)
    line = json.loads(report.to_jsonl().splitlines()[0])
    assert set(line) == {"row", "column", "value", "violation"}
    with pytest.raises(RangeViolationError):
        load_csv(default_schema(), tmp_path / "r.csv", strict=True)


def test_bad_rows_rejected_with_diagnostics(tmp_path):
    p = _write(tmp_path / "b.csv", "a,b,step\n1,2,polarization\nx,2,polarization\n1,2,idle\n1,2\n")
    ds, report = load_csv(small_schema(), p)
    assert ds.n_rows == 1
    got = [(r["line"], r["column"]) for r in report.rejected]
    assert got == [(3, "a"), (4, "step"), (5, None)]


def test_csv_round_trip_is_exact(tmp_path):
    ds = random_dataset(default_schema(), 25, seed=3)
    write_csv(ds, tmp_path / "x.csv")
    back, _ = load_csv(default_schema(), tmp_path / "x.csv")
    assert np.array_equal(back.continuous, ds.continuous)
    assert np.array_equal(back.codes, ds.codes)


# ---------------------------------------------------------------- encoder


def test_fit_encoder_closed_form():
    schema = TableSchema((ColumnSpec("a", "continuous", lo=-10, hi=10),))
    enc = fit_encoder(Dataset(schema, np.array([[0.0], [2.0]]), np.zeros((2, 0))))
    assert enc.mean.tolist() == [1.0] and enc.std.tolist() == [1.0]


def test_fit_encoder_standardized_input():
    x = np.random.default_rng(0).normal(size=1000)
    x = (x - x.mean()) / x.std()
    schema = TableSchema((ColumnSpec("a", "continuous", lo=-10, hi=10),))
    enc = fit_encoder(Dataset(schema, x[:, None], np.zeros((1000, 0))))
    assert abs(enc.mean[0]) < 1e-12 and abs(enc.std[0] - 1) < 1e-12


def test_fit_encoder_errors():
    ds = random_dataset(small_schema(), 10)
    ds.continuous[:, 1] = 5.0
    with pytest.raises(ZeroVarianceError, match="b"):
        fit_encoder(ds)
    with pytest.raises(DataError):
        fit_encoder(random_dataset(small_schema(), 1))


def test_encode_width_and_argmax_decode():
    ds = random_dataset(default_schema(), 30)
    enc = fit_encoder(ds)
    m = enc.encode(ds)
    assert m.shape == (30, 59)
    small = fit_encoder(random_dataset(TableSchema((ColumnSpec("a", "continuous", lo=0, hi=1),
                                                    ColumnSpec("c", "categorical", classes=("x", "y", "z")))), 5))
    dec = small.decode(np.array([[0.5, 0.1, 0.7, 0.2]]))
    assert dec.codes[0, 0] == 1


def test_encode_unknown_category_and_schema_mismatch():
    ds = random_dataset(small_schema(), 5)
    enc = fit_encoder(ds)
    ds.codes[0, 0] = 7
    with pytest.raises(UnknownCategoryError):
        enc.encode(ds)
    with pytest.raises(SchemaError):
        enc.encode(random_dataset(default_schema(), 5))


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 60), seed=st.integers(0, 10**6))
def test_encode_properties(n, seed):
    ds = random_dataset(default_schema(), n, seed)
    enc = fit_encoder(ds)
    m = enc.encode(ds)
    cont = m[:, :52]
    assert np.all(np.abs(cont.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(cont.var(axis=0) - 1) < 1e-9)
    for a, b in enc.blocks():
        block = m[:, a:b]
        assert np.all(block.sum(axis=1) == 1) and np.all((block == 0) | (block == 1))
    back = enc.decode(m)
    assert np.all(np.abs(back.continuous - ds.continuous) <= 1e-12 * np.maximum(np.abs(ds.continuous), 1))
    assert np.array_equal(back.codes, ds.codes)
    # injective: distinct rows stay distinct
    assert len({r.tobytes() for r in m}) == len({r.tobytes() for r in np.hstack([ds.continuous, ds.codes])})


# ---------------------------------------------------------------- subsampling


def _split_dataset(n, frac_stab, seed=0):
    ds = random_dataset(small_schema(), n, seed)
    n_stab = round(frac_stab * n)
    ds.codes[:, 0] = 1
    ds.codes[:n_stab, 0] = 0
    return ds


@pytest.mark.parametrize("f,expected", [(1.0, 30901), (0.5, 15450), (0.25, 7725)])
def test_subsample_table_counts(f, expected):
    ds = _split_dataset(30901, 0.2)
    assert subsample(ds, f, seed=0).n_rows == expected


def test_subsample_identity_and_determinism():
    ds = _split_dataset(1000, 0.2)
    full = subsample(ds, 1.0, seed=5)
    assert np.array_equal(full.continuous, ds.continuous)
    a = subsample(ds, 0.3, seed=1)
    b = subsample(ds, 0.3, seed=1)
    assert np.array_equal(a.continuous, b.continuous)
    assert not np.array_equal(a.continuous, subsample(ds, 0.3, seed=2).continuous)


def test_subsample_errors():
    ds = _split_dataset(100, 0.2)
    for f in (0.0, 1.5, -0.1):
        with pytest.raises(DataError):
            subsample(ds, f)
    with pytest.raises(SchemaError):
        subsample(ds, 0.5, stratify="nope")


@settings(max_examples=60, deadline=None)
@given(n=st.integers(10, 5000), f=st.sampled_from([1.0, 0.5, 0.25, 0.1, 1 / 3]),
       frac=st.floats(0.05, 0.95), seed=st.integers(0, 1000))
def test_subsample_preserves_class_split(n, f, frac, seed):
    ds = _split_dataset(n, frac, seed)
    sub = subsample(ds, f, seed=seed)
    n_stab = int((ds.codes[:, 0] == 0).sum())
    got = int((sub.codes[:, 0] == 0).sum())
    assert sub.n_rows == max(1, int(np.floor(f * n + 1e-9)))
    assert abs(got - f * n_stab) <= 1 + 1e-9
