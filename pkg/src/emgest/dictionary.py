"""Precomputed plane-wave responses of the gesture shapes.

A :class:`Dictionary` maps ``(shape, k, d, p)`` to the far-field pattern
of the untranslated shape under plane-wave incidence, and optionally to
its scattered near field at receiver offsets ``x_r - R_ref d``.  The
binary file layout is described in ``docs/dictionary-format.md``.
"""

import hashlib
import json
import logging
import struct
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import forward
from .shapes import build_shape, rasterize_contrast
from .sphere import SphereGrid, TangentialFieldOnSphere

log = logging.getLogger(__name__)

MAGIC = b"EMGDICT\x00"
FORMAT_VERSION = 1
CHECKSUM_BYTES = 32
GAP_WARNING = np.deg2rad(5.0)
FALLBACK_POLARIZATION = (1.0, 0.0, 0.0)


class DictionaryFormatError(ValueError):
    pass


class ChecksumError(DictionaryFormatError):
    pass


class MissingEntryError(KeyError):
    pass


def _unit(v, what="direction", tol=1e-10):
    v = np.asarray(v, dtype=float)
    if v.shape != (3,) or abs(np.linalg.norm(v) - 1.0) > tol:
        raise ValueError(f"{what} must be a unit 3-vector, got {v!r}")
    return tuple(float(c) for c in v)


@dataclass(frozen=True)
class DictionaryKey:
    shape_id: str
    k: float
    direction: tuple
    polarization: tuple

    def __post_init__(self):
        object.__setattr__(self, "k", float(self.k))
        object.__setattr__(self, "direction", _unit(self.direction))
        object.__setattr__(self, "polarization", tuple(float(c) for c in self.polarization))


@dataclass(frozen=True, eq=False)
class DictionaryEntry:
    key: DictionaryKey
    far: TangentialFieldOnSphere
    near: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ContrastSettings:
    n_inside: complex = 5.0
    resolution: int = 4
    smoothing: float = 0.0

    def to_json(self):
        n = complex(self.n_inside)
        return {"n_inside": [n.real, n.imag], "resolution": self.resolution, "smoothing": self.smoothing}

    @classmethod
    def from_json(cls, doc):
        re, im = doc["n_inside"]
        return cls(complex(re, im), int(doc["resolution"]), float(doc["smoothing"]))


@dataclass(eq=False)
class Dictionary:
    """Entries sharing one sphere grid and one receiver layout.

    ``receiver_positions`` / ``receiver_weights`` describe the aperture
    the near fields were stored for; ``reference_distance`` is ``R_ref``.
    ``shapes`` keeps the cube lists so every entry can be regenerated.
    """

    grid: SphereGrid
    entries: dict
    shapes: dict
    contrast: ContrastSettings
    solver: forward.SolverParams
    receiver_positions: np.ndarray | None = None
    receiver_weights: np.ndarray | None = None
    reference_distance: float | None = None
    version: int = FORMAT_VERSION
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.entries:
            raise ValueError("a dictionary needs at least one entry")
        for entry in self.entries.values():
            if not entry.far.grid.same_as(self.grid):
                raise ValueError("all entries must share the dictionary sphere grid")

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, key):
        return self.entries[key]

    @property
    def has_near(self):
        return self.receiver_positions is not None

    def shape_ids(self):
        return sorted({key.shape_id for key in self.entries})

    def wavenumbers(self):
        return sorted({key.k for key in self.entries})

    def keys_for(self, shape_id, k):
        return [key for key in self.entries if key.shape_id == shape_id and np.isclose(key.k, k, rtol=1e-12, atol=0)]


# -- building -------------------------------------------------------------------------


def effective_polarization(direction, polarization):
    """``polarization``, or the fallback when it is parallel to ``direction``."""
    d = np.asarray(direction, float)
    p = np.asarray(polarization, float)
    if np.linalg.norm(np.cross(d, p)) < 1e-8 * max(np.linalg.norm(p), 1e-300):
        q = np.asarray(FALLBACK_POLARIZATION)
        if np.linalg.norm(np.cross(d, q)) < 1e-8:
            q = np.array([0.0, 1.0, 0.0])
        return q
    return p


def near_offsets(receivers, reference_distance, direction):
    return np.asarray(receivers, float) - reference_distance * np.asarray(direction, float)


def solve_entry(shape, k, direction, polarization, contrast=None, grid=None, params=None,
                receivers=None, reference_distance=None, system=None):
    """Plane-wave response of ``shape`` for one key."""
    contrast = contrast or ContrastSettings()
    params = params or forward.SolverParams()
    if system is None:
        field_ = rasterize_contrast(shape, contrast.n_inside, contrast.resolution, contrast.smoothing)
        system = forward.assemble(field_, k, params)
    p = effective_polarization(direction, polarization)
    sol = forward.plane_wave_solution(system, k, direction, p, params)
    far = forward.far_field(sol, grid)
    near = None
    if receivers is not None:
        near = forward.scattered_field_at(sol, near_offsets(receivers, reference_distance, direction))
    meta = {
        "resolution": contrast.resolution,
        "spacing": system.spacing,
        "smoothing": contrast.smoothing,
        "tol": params.tol,
        "iterations": sol.iterations,
        "residual": sol.residual,
        "matvecs": sol.diagnostics.matvecs,
        "requested_polarization": [float(c) for c in polarization],
        "projection_residual": far.projection_residual,
    }
    key = DictionaryKey(shape.id, k, direction, tuple(p))
    return DictionaryEntry(key=key, far=far, near=near, meta=meta)


def build_dictionary(shapes, k_values, directions, polarization=(0.0, 0.0, 1.0), params=None,
                     contrast=None, grid=None, receivers=None, reference_distance=None, threads=1):
    """Solve every ``(shape, k, direction)`` plane-wave problem.

    ``polarization`` may be a 3-vector or a mapping ``k -> 3-vector``.
    When it is parallel to a direction, :data:`FALLBACK_POLARIZATION` is
    used for that entry and the key records the polarization used.
    ``receivers`` is an optional ``(positions, weights)`` pair; near fields
    are then stored at ``x_r - reference_distance * d``.

    Work is split per ``(shape, k)`` (one assembled operator each) and run
    on ``threads`` workers; the result does not depend on the thread count.
    """
    params = params or forward.SolverParams()
    contrast = contrast or ContrastSettings()
    if grid is None:
        raise ValueError("a sphere grid is required")
    positions = weights = None
    if receivers is not None:
        positions, weights = (np.asarray(a, float) for a in receivers)
        if reference_distance is None or not reference_distance > 0:
            raise ValueError("near-field storage needs a positive reference distance")
    directions = [_unit(d) for d in directions]
    if len(set(directions)) != len(directions):
        raise ValueError("duplicate incidence directions")
    ids = [s.id for s in shapes]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate shape ids")
    source = forward.SourceConfig(polarization=polarization)

    def work(item):
        shape, k = item
        field_ = rasterize_contrast(shape, contrast.n_inside, contrast.resolution, contrast.smoothing)
        system = forward.assemble(field_, k, params)
        out, errors = [], []
        for d in directions:
            try:
                out.append(solve_entry(shape, k, d, source.polarization_for(k), contrast, grid, params,
                                       positions, reference_distance, system=system))
            except forward.SolverError as exc:
                errors.append((shape.id, k, d, str(exc)))
        return out, errors

    items = [(s, float(k)) for s in shapes for k in k_values]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, items))
    else:
        results = [work(it) for it in items]
    entries, failures = {}, []
    for out, errors in results:
        failures.extend(errors)
        for entry in out:
            entries[entry.key] = entry
    if failures:
        msg = "; ".join(f"{sid} k={k:g} d={d}: {err}" for sid, k, d, err in failures)
        raise forward.SolverError(f"{len(failures)} dictionary entries failed: {msg}")
    return Dictionary(
        grid=grid,
        entries=entries,
        shapes={s.id: {"cubes": [list(c) for c in s.cubes], "size": s.size, "centered": s.centered} for s in shapes},
        contrast=contrast,
        solver=params,
        receiver_positions=positions,
        receiver_weights=weights,
        reference_distance=None if reference_distance is None else float(reference_distance),
    )


# -- lookup ---------------------------------------------------------------------------


def nearest_direction_entry(dictionary, shape_id, k, zhat):
    """Entry for ``(shape_id, k)`` whose direction is closest to ``zhat``.

    Returns ``(entry, gap)`` with ``gap`` the angle in radians between
    ``zhat`` and the stored direction.  A gap above 5 degrees is warned
    about; the caller decides whether to accept it.
    """
    zhat = np.asarray(zhat, float)
    zhat = zhat / np.linalg.norm(zhat)
    keys = dictionary.keys_for(shape_id, k)
    if not keys:
        raise MissingEntryError(f"no entries for shape {shape_id!r} at k = {k}")
    dots = np.array([np.dot(key.direction, zhat) for key in keys])
    best = int(np.argmax(dots))
    gap = float(np.arccos(np.clip(dots[best], -1.0, 1.0)))
    if gap > GAP_WARNING:
        warnings.warn(f"nearest stored direction is {np.rad2deg(gap):.1f} deg away", stacklevel=2)
    return dictionary.entries[keys[best]], gap


def covering_radius(directions):
    """Largest angular distance from any point on the sphere to the set, estimated on a fine grid."""
    from .sphere import lebedev_grid

    probe = lebedev_grid(590).nodes
    dots = probe @ np.asarray(directions, float).T
    return float(np.arccos(np.clip(dots.max(axis=1), -1, 1)).max())


class EntryCache:
    """On-demand dictionary: solves entries for exact directions and keeps them.

    ``entry(shape_id, k, direction)`` mirrors a stored entry; near fields
    are evaluated at ``receivers - z`` when ``z`` is given, so the
    near-field matcher needs no reference distance.
    """

    def __init__(self, shapes, grid, contrast=None, params=None, polarization=(0.0, 0.0, 1.0)):
        self.shapes = {s.id: s for s in shapes}
        self.grid = grid
        self.contrast = contrast or ContrastSettings()
        self.params = params or forward.SolverParams()
        self.source = forward.SourceConfig(polarization=polarization)
        self._systems = {}
        self._entries = {}
        self.solves = 0

    def _system(self, shape_id, k):
        key = (shape_id, float(k))
        if key not in self._systems:
            c = self.contrast
            field_ = rasterize_contrast(self.shapes[shape_id], c.n_inside, c.resolution, c.smoothing)
            self._systems[key] = forward.assemble(field_, k, self.params)
        return self._systems[key]

    def entry(self, shape_id, k, direction, receivers=None, z=None):
        d = _unit(np.asarray(direction, float) / np.linalg.norm(direction), tol=1e-8)
        rx = None if receivers is None else tuple(map(tuple, np.asarray(receivers, float)))
        zt = None if z is None else tuple(map(float, z))
        key = (shape_id, float(k), d, rx, zt)
        if key not in self._entries:
            self.solves += 1
            dist = None if z is None else float(np.linalg.norm(z))
            self._entries[key] = solve_entry(
                self.shapes[shape_id], k, d, self.source.polarization_for(k), self.contrast, self.grid,
                self.params, None if receivers is None else np.asarray(receivers, float) - np.asarray(z) + dist * np.asarray(d),
                dist, system=self._system(shape_id, k),
            )
        return self._entries[key]


# -- persistence ----------------------------------------------------------------------


def _complex_bytes(a):
    a = np.ascontiguousarray(a, dtype=np.complex128)
    return a.view(np.float64).astype("<f8").tobytes()


def _header(dictionary):
    grid = dictionary.grid
    keys = sorted(dictionary.entries, key=lambda k: (k.shape_id, k.k, k.direction, k.polarization))
    entries = []
    for key in keys:
        e = dictionary.entries[key]
        entries.append({
            "shape": key.shape_id,
            "k": key.k,
            "direction": list(key.direction),
            "polarization": list(key.polarization),
            "has_near": e.near is not None,
            "meta": e.meta,
        })
    s = dictionary.solver
    doc = {
        "format": "emgest-dictionary",
        "version": dictionary.version,
        "grid": {
            "name": grid.name,
            "degree": grid.degree,
            "nodes": grid.nodes.tolist(),
            "weights": grid.weights.tolist(),
        },
        "receivers": None if not dictionary.has_near else {
            "positions": dictionary.receiver_positions.tolist(),
            "weights": dictionary.receiver_weights.tolist(),
        },
        "reference_distance": dictionary.reference_distance,
        "shapes": dictionary.shapes,
        "contrast": dictionary.contrast.to_json(),
        "solver": {"tol": s.tol, "maxiter": s.maxiter, "restart": s.restart, "end_correction": s.end_correction},
        "entries": entries,
        "provenance": dictionary.provenance,
    }
    return doc, keys


def to_bytes(dictionary):
    doc, keys = _header(dictionary)
    header = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", dictionary.version, len(header)), header]
    for key in keys:
        e = dictionary.entries[key]
        parts.append(_complex_bytes(e.far.samples))
        if e.near is not None:
            parts.append(_complex_bytes(e.near))
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save(dictionary, path):
    """Write ``dictionary`` atomically (temporary file, then rename)."""
    from .io import atomic_write_bytes

    atomic_write_bytes(path, to_bytes(dictionary))


def from_bytes(data):
    if len(data) < len(MAGIC) + 8 + CHECKSUM_BYTES:
        raise DictionaryFormatError("file is truncated")
    if data[: len(MAGIC)] != MAGIC:
        raise DictionaryFormatError("not an emgest dictionary (bad magic)")
    body, digest = data[:-CHECKSUM_BYTES], data[-CHECKSUM_BYTES:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checksum mismatch: file is corrupted or truncated")
    version, hlen = struct.unpack_from("<II", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise DictionaryFormatError(f"unsupported dictionary version {version} (expected {FORMAT_VERSION})")
    start = len(MAGIC) + 8
    doc = json.loads(body[start : start + hlen].decode("utf-8"))
    g = doc["grid"]
    grid = SphereGrid(np.array(g["nodes"]), np.array(g["weights"]), g["degree"], g["name"])
    rx = doc["receivers"]
    positions = weights = None
    if rx is not None:
        positions = np.array(rx["positions"], dtype=float).reshape(-1, 3)
        weights = np.array(rx["weights"], dtype=float)
    offset = start + hlen
    nfar = len(grid) * 3 * 16
    nnear = 0 if positions is None else len(positions) * 3 * 16
    entries = {}
    for item in doc["entries"]:
        need = nfar + (nnear if item["has_near"] else 0)
        if offset + need > len(body):
            raise DictionaryFormatError("entry block is truncated")
        far = np.frombuffer(body, dtype="<f8", count=nfar // 8, offset=offset).view(np.complex128).reshape(-1, 3)
        offset += nfar
        near = None
        if item["has_near"]:
            near = np.frombuffer(body, dtype="<f8", count=nnear // 8, offset=offset).view(np.complex128).reshape(-1, 3).copy()
            offset += nnear
        key = DictionaryKey(item["shape"], item["k"], item["direction"], item["polarization"])
        far = TangentialFieldOnSphere.from_projected(grid, far, item["meta"].get("projection_residual", 0.0))
        entries[key] = DictionaryEntry(key, far, near, item["meta"])
    if offset != len(body):
        raise DictionaryFormatError(f"{len(body) - offset} unexpected trailing bytes")
    s = doc["solver"]
    return Dictionary(
        grid=grid,
        entries=entries,
        shapes=doc["shapes"],
        contrast=ContrastSettings.from_json(doc["contrast"]),
        solver=forward.SolverParams(tol=s["tol"], maxiter=s["maxiter"], restart=s["restart"],
                                    end_correction=s["end_correction"]),
        receiver_positions=positions,
        receiver_weights=weights,
        reference_distance=doc["reference_distance"],
        version=version,
        provenance=doc.get("provenance", {}),
    )


def load(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def shape_from_dictionary(dictionary, shape_id):
    doc = dictionary.shapes[shape_id]
    return build_shape(shape_id, [tuple(c) for c in doc["cubes"]], doc["size"], doc["centered"])


def audit_entry(dictionary, key, params=None):
    """Regenerate one entry from its provenance; return the relative differences.

    Returns ``{"far": ..., "near": ...}`` (``near`` is ``None`` when the
    entry stores no near field).
    """
    entry = dictionary.entries[key]
    shape = shape_from_dictionary(dictionary, key.shape_id)
    fresh = solve_entry(
        shape, key.k, key.direction, entry.meta.get("requested_polarization", key.polarization),
        dictionary.contrast, dictionary.grid, params or dictionary.solver,
        dictionary.receiver_positions if entry.near is not None else None, dictionary.reference_distance,
    )

    def rel(a, b):
        nb = np.linalg.norm(b)
        return float(np.linalg.norm(a - b) / nb) if nb > 0 else float(np.linalg.norm(a))

    return {
        "far": rel(fresh.far.samples, entry.far.samples),
        "near": None if entry.near is None else rel(fresh.near, entry.near),
    }
