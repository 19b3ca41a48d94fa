import numpy as np
import pytest

from emgest.forward import ApertureField, aperture_receivers
from emgest.io import atomic_write_text, csv_text, fmt, read_csv, read_measurement, write_csv, write_measurement
from emgest.sphere import TangentialFieldOnSphere, lebedev_grid


def test_fmt():
    assert fmt(1 / 3) == "0.3333333333"
    assert fmt(None) == ""
    assert fmt(True) == "true"
    assert fmt("D1") == "D1"
    assert fmt(np.float64(2.0)) == "2"


def test_csv_round_trip(tmp_path):
    path = tmp_path / "t.csv"
    write_csv(path, ["a", "b"], [["x", 1.5], ["y", None]], {"seed": 3, "note": "hello"})
    comments, cols, rows = read_csv(path)
    assert comments == {"seed": "3", "note": "hello"}
    assert cols == ["a", "b"]
    assert rows == [["x", "1.5"], ["y", ""]]
    assert csv_text(["a"], [[1]]) == "a\n1\n"


def test_atomic_write_leaves_no_temp(tmp_path):
    atomic_write_text(tmp_path / "f.txt", "abc")
    assert [p.name for p in tmp_path.iterdir()] == ["f.txt"]


def test_measurement_round_trip(tmp_path, rng):
    grid = lebedev_grid(26)
    raw = rng.normal(size=(26, 3)) + 1j * rng.normal(size=(26, 3))
    far = TangentialFieldOnSphere(grid, raw)
    pos, w = aperture_receivers(3)
    near = ApertureField(pos, rng.normal(size=(9, 3)) + 1j * rng.normal(size=(9, 3)), 1.25, w)
    path = tmp_path / "m.json"
    write_measurement(path, near, far, {"shape": "D1", "delta": 0.05})
    n2, f2, prov = read_measurement(path)
    assert np.array_equal(f2.samples, far.samples)
    assert f2.projection_residual == far.projection_residual
    assert np.array_equal(n2.samples, near.samples)
    assert np.array_equal(n2.positions, near.positions) and np.array_equal(n2.weights, near.weights)
    assert n2.k == 1.25 and prov == {"shape": "D1", "delta": 0.05}


def test_measurement_format_checks(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"format": "other"}')
    with pytest.raises(ValueError, match="not an emgest"):
        read_measurement(p)
    p.write_text('{"format": "emgest-measurement", "version": 7}')
    with pytest.raises(ValueError, match="version"):
        read_measurement(p)
