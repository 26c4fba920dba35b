"""Tables, factors, CSV loading, and response transforms."""

import numpy as np
import pytest

from gammkit.data import (DataTable, FactorColumn, boxcox_profile, load_csv,
                          rescale_unit, transform_response)
from gammkit.errors import (DomainError, GammkitError, ParseError,
                            SchemaError, ShapeError)


def test_factor_from_strings_sorts_levels():
    f = FactorColumn.from_strings(["b", "a", "c", "a"])
    assert f.levels == ("a", "b", "c")
    assert f.codes.tolist() == [1, 0, 2, 0]
    assert f.n_levels == 3


def test_factor_levels_stable_under_row_order():
    f1 = FactorColumn.from_strings(["x", "y", "x"])
    f2 = FactorColumn.from_strings(["y", "x", "x"])
    assert f1.levels == f2.levels


def test_factor_codes_out_of_range():
    with pytest.raises(SchemaError):
        FactorColumn(np.array([0, 3]), ("a", "b"))
    with pytest.raises(SchemaError):
        FactorColumn(np.array([-1]), ("a",))


def test_factor_take_keeps_levels():
    f = FactorColumn.from_strings(["a", "b", "a", "c"])
    sub = f.take(np.array([1, 3]))
    assert sub.levels == f.levels
    assert sub.codes.tolist() == [1, 2]


def test_table_rejects_wrong_length_column():
    with pytest.raises(ShapeError):
        DataTable(columns={"x": np.arange(3.0)}, n_rows=4)


def test_table_rejects_nonfinite():
    with pytest.raises(DomainError):
        DataTable(columns={"x": np.array([1.0, np.nan])}, n_rows=2)


def test_table_accessors_enforce_role():
    tab = DataTable(columns={"x": np.arange(2.0),
                             "g": FactorColumn.from_strings(["a", "b"])},
                    n_rows=2)
    assert tab.numeric("x").tolist() == [0.0, 1.0]
    assert tab.factor("g").levels == ("a", "b")
    with pytest.raises(SchemaError):
        tab.numeric("g")
    with pytest.raises(SchemaError):
        tab.factor("x")
    with pytest.raises(SchemaError):
        tab.numeric("missing")


def test_series_key_requires_order_key():
    cols = {"g": FactorColumn.from_strings(["a", "a"]),
            "t": np.array([1.0, 2.0])}
    with pytest.raises(SchemaError):
        DataTable(columns=dict(cols), n_rows=2, series_key="g")
    DataTable(columns=dict(cols), n_rows=2, series_key="g", order_key="t")


def test_duplicate_series_order_pairs_rejected():
    cols = {"g": FactorColumn.from_strings(["a", "a"]),
            "t": np.array([1.0, 1.0])}
    with pytest.raises(SchemaError):
        DataTable(columns=cols, n_rows=2, series_key="g", order_key="t")


def test_take_bool_mask_and_indices():
    tab = DataTable(columns={"x": np.arange(4.0),
                             "g": FactorColumn.from_strings(list("aabb"))},
                    n_rows=4)
    sub = tab.take(np.array([True, False, True, False]))
    assert sub.n_rows == 2
    assert sub.numeric("x").tolist() == [0.0, 2.0]
    sub2 = tab.take(np.array([3, 0]))
    assert sub2.numeric("x").tolist() == [3.0, 0.0]
    assert sub2.factor("g").codes.tolist() == [1, 0]


# ---------------------------------------------------------------------------
# CSV loading


def _write(path, text):
    path.write_text(text)
    return str(path)


def test_load_csv_roles_and_missing_rows(tmp_path):
    p = _write(tmp_path / "d.csv",
               "subject,rt,cond,junk\n"
               "s1,431.5,a,zzz\n"
               "s1,NA,a,zzz\n"
               "s2,512.25,b,zzz\n"
               "s2,,b,zzz\n")
    tab = load_csv(p, {"subject": "factor", "rt": "numeric",
                       "cond": "factor"})
    assert tab.n_rows == 2
    assert tab.meta["dropped_rows"] == 2
    assert tab.numeric("rt").tolist() == [431.5, 512.25]
    assert tab.factor("subject").levels == ("s1", "s2")
    assert "junk" not in tab.column_names()


def test_load_csv_bad_numeric_cell(tmp_path):
    p = _write(tmp_path / "d.csv", "x\n1.5\noops\n")
    with pytest.raises(ParseError, match="row 3"):
        load_csv(p, {"x": "numeric"})


def test_load_csv_missing_declared_column(tmp_path):
    p = _write(tmp_path / "d.csv", "x\n1\n")
    with pytest.raises(SchemaError):
        load_csv(p, {"y": "numeric"})


def test_load_csv_empty_file(tmp_path):
    p = _write(tmp_path / "d.csv", "")
    with pytest.raises(ParseError):
        load_csv(p, {"x": "numeric"})


def test_load_csv_all_rows_missing(tmp_path):
    p = _write(tmp_path / "d.csv", "x\nNA\n\n")
    with pytest.raises(GammkitError):
        load_csv(p, {"x": "numeric"})


def test_load_csv_unknown_role(tmp_path):
    p = _write(tmp_path / "d.csv", "x\n1\n")
    with pytest.raises(SchemaError):
        load_csv(p, {"x": "date"})


# ---------------------------------------------------------------------------
# transforms


def test_rescale_unit_range_and_map():
    tab = DataTable(columns={"x": np.array([10.0, 20.0, 30.0])}, n_rows=3)
    out = rescale_unit(tab, "x")
    assert out.numeric("x").tolist() == [0.0, 0.5, 1.0]
    off, scale = out.meta["scale_maps"]["x"]
    np.testing.assert_allclose(off + scale * out.numeric("x"),
                               tab.numeric("x"))


def test_rescale_unit_twice_keeps_original_map():
    tab = DataTable(columns={"x": np.array([10.0, 20.0, 30.0])}, n_rows=3)
    once = rescale_unit(tab, "x")
    twice = rescale_unit(once, "x")
    np.testing.assert_array_equal(once.numeric("x"), twice.numeric("x"))
    off, scale = twice.meta["scale_maps"]["x"]
    np.testing.assert_allclose(off + scale * twice.numeric("x"),
                               tab.numeric("x"))


def test_rescale_unit_constant_column():
    tab = DataTable(columns={"x": np.full(3, 7.0)}, n_rows=3)
    with pytest.raises(DomainError):
        rescale_unit(tab, "x")


def test_transform_identity_is_same_object():
    tab = DataTable(columns={"y": np.array([1.0, 2.0])}, n_rows=2)
    assert transform_response(tab, "y", "identity") is tab


@pytest.mark.parametrize("kind,fn", [
    ("log", np.log),
    ("neg1000_over", lambda y: -1000.0 / y),
])
def test_transform_values(kind, fn):
    y = np.array([250.0, 431.0, 977.5])
    tab = DataTable(columns={"y": y}, n_rows=3)
    out = transform_response(tab, "y", kind)
    np.testing.assert_allclose(out.numeric("y"), fn(y))
    assert out.meta["transforms"]["y"] == kind


def test_transform_power_is_boxcox():
    y = np.array([1.0, 2.0, 4.0])
    tab = DataTable(columns={"y": y}, n_rows=3)
    out = transform_response(tab, "y", "power", power=0.5)
    np.testing.assert_allclose(out.numeric("y"), (np.sqrt(y) - 1.0) / 0.5)
    out0 = transform_response(tab, "y", "power", power=0.0)
    np.testing.assert_allclose(out0.numeric("y"), np.log(y))


def test_transform_rejects_nonpositive():
    tab = DataTable(columns={"y": np.array([1.0, -2.0])}, n_rows=2)
    for kind in ("log", "neg1000_over"):
        with pytest.raises(DomainError):
            transform_response(tab, "y", kind)
    with pytest.raises(DomainError):
        transform_response(tab, "y", "power", power=0.5)


def test_transform_power_requires_exponent():
    tab = DataTable(columns={"y": np.array([1.0, 2.0])}, n_rows=2)
    with pytest.raises(DomainError):
        transform_response(tab, "y", "power")


def test_transform_unknown_kind():
    tab = DataTable(columns={"y": np.array([1.0])}, n_rows=1)
    with pytest.raises(DomainError):
        transform_response(tab, "y", "sqrt")


def test_boxcox_profile_recovers_log_scale():
    # y = exp(z) with z Gaussian: profile should peak near lambda = 0.
    rng = np.random.default_rng(31)
    y = np.exp(rng.normal(0.0, 0.5, 4000))
    lam, scores = boxcox_profile(y, np.linspace(-1.0, 1.0, 81))
    assert abs(lam) < 0.15
    assert scores.shape == (81,)


def test_boxcox_profile_identity_scale():
    rng = np.random.default_rng(32)
    y = rng.normal(50.0, 2.0, 4000)
    lam, _ = boxcox_profile(y, np.linspace(-2.0, 4.0, 121))
    assert abs(lam - 1.0) < 0.5


def test_boxcox_profile_rejects_bad_input():
    with pytest.raises(DomainError):
        boxcox_profile(np.array([]))
    with pytest.raises(DomainError):
        boxcox_profile(np.array([1.0, 0.0]))
    with pytest.raises(DomainError):
        boxcox_profile(np.array([1.0]), np.array([]))
