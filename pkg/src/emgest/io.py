"""Small file helpers: atomic writes, CSV with comment headers, measurement files."""

import io
import json
import os
import tempfile

import numpy as np

MEASUREMENT_FORMAT = "emgest-measurement"
MEASUREMENT_VERSION = 1


def atomic_write_bytes(path, data):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def fmt(value):
    """Stable text for CSV cells."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".10g")
    if value is None:
        return ""
    return str(value)


def csv_text(columns, rows, comments=None):
    """CSV with ``# key: value`` comment lines in front."""
    out = io.StringIO()
    for key, value in (comments or {}).items():
        out.write(f"# {key}: {value}\n")
    out.write(",".join(columns) + "\n")
    for row in rows:
        out.write(",".join(fmt(v) for v in row) + "\n")
    return out.getvalue()


def write_csv(path, columns, rows, comments=None):
    atomic_write_text(path, csv_text(columns, rows, comments))


def read_csv(path):
    """Return ``(comments, columns, rows)`` with cells as strings."""
    comments, rows, columns = {}, [], None
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("# "):
                key, _, value = line[2:].partition(": ")
                comments[key] = value
            elif columns is None:
                columns = line.split(",")
            elif line:
                rows.append(line.split(","))
    return comments, columns, rows


# -- measurement files -----------------------------------------------------------------


def _pairs(a):
    a = np.asarray(a, dtype=complex)
    return np.stack([a.real, a.imag], axis=-1).tolist()


def _complex(pairs):
    a = np.asarray(pairs, dtype=float)
    return a[..., 0] + 1j * a[..., 1]


def measurement_document(near, far, provenance):
    """JSON-ready dict holding an aperture field and a far field.

    Floats are written with ``repr`` precision by :mod:`json`, so reading
    the file back reproduces the arrays exactly.
    """
    return {
        "format": MEASUREMENT_FORMAT,
        "version": MEASUREMENT_VERSION,
        "provenance": provenance,
        "k": near.k,
        "receivers": {
            "positions": near.positions.tolist(),
            "weights": near.weights.tolist(),
            "samples": _pairs(near.samples),
        },
        "far": {
            "grid": far.grid.name,
            "points": len(far.grid),
            "projection_residual": far.projection_residual,
            "samples": _pairs(far.samples),
        },
    }


def write_measurement(path, near, far, provenance):
    doc = measurement_document(near, far, provenance)
    atomic_write_text(path, json.dumps(doc, sort_keys=True, indent=1) + "\n")


class MeasurementFormatError(ValueError):
    pass


def read_measurement(path):
    """Return ``(near, far, provenance)`` from a measurement file."""
    from .forward import ApertureField
    from .sphere import TangentialFieldOnSphere, lebedev_grid

    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise MeasurementFormatError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != MEASUREMENT_FORMAT:
        raise MeasurementFormatError(f"{path}: not an emgest measurement file")
    if doc.get("version") != MEASUREMENT_VERSION:
        raise MeasurementFormatError(f"{path}: unsupported measurement version {doc.get('version')}")
    rx = doc["receivers"]
    near = ApertureField(rx["positions"], _complex(rx["samples"]), doc["k"], rx["weights"])
    grid = lebedev_grid(doc["far"]["points"])
    samples = _complex(doc["far"]["samples"]).reshape(-1, 3)
    far = TangentialFieldOnSphere.from_projected(grid, samples, doc["far"].get("projection_residual", 0.0))
    return near, far, doc["provenance"]
