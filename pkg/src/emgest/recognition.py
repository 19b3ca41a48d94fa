"""Two-stage recognition: locate with a low-frequency indicator, then match shapes.

Stage one projects the measured far field onto the six degree-1 vector
spherical harmonics, phase-shifted to a trial position ``z~``; the
normalised projection energy peaks where the scatterer sits.  Stage two
correlates the measurement with dictionary fields translated to the
located position and picks the best-correlated shape.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .dictionary import nearest_direction_entry
from .io import csv_text
from .sphere import TangentialFieldOnSphere, vsh_basis

log = logging.getLogger(__name__)

TIE_RTOL = 1e-9
BOUND_TOL = 1e-6


class ZeroNormError(ValueError):
    pass


class LowFrequencyWarning(UserWarning):
    pass


class LayoutMismatchError(ValueError):
    pass


# -- location ---------------------------------------------------------------------------


def probe_field(zt, k, basis, index):
    """``e^{ik|z~|} / (4 pi |z~|) e^{-ik x^.z~} B(x^)`` for basis field ``index``."""
    zt = np.asarray(zt, dtype=float)
    r = np.linalg.norm(zt)
    if r == 0:
        raise ValueError("probe position must be nonzero")
    phase = np.exp(1j * k * r) / (4 * np.pi * r) * np.exp(-1j * k * (basis.grid.nodes @ zt))
    return TangentialFieldOnSphere(basis.grid, phase[:, None] * basis.fields[index])


def _field_norm(samples, w):
    return float(np.sqrt(np.sum(w * np.sum(np.abs(samples) ** 2, axis=-1))))


def _aperture_weights(grid, aperture):
    if aperture is None:
        return grid.weights
    aperture = np.asarray(aperture, dtype=bool)
    if aperture.shape != (len(grid),) or not aperture.any():
        raise ValueError("aperture mask must select at least one grid node")
    return np.where(aperture, grid.weights, 0.0)


def indicator_values(far, points, k, basis=None, aperture=None, chunk=512):
    """Location indicator at every row of ``points``.

    ``I(z~) = sqrt(sum_b |<E, e^{-ik x^.z~} B_b>|^2) / ||E||``, i.e. the
    projection energy with the probe norm ``1/(4 pi |z~|)`` divided out.
    With ``aperture`` the inner products run over the masked nodes only.
    """
    basis = basis or vsh_basis(far.grid)
    w = _aperture_weights(far.grid, aperture)
    norm = _field_norm(far.samples, w)
    if norm == 0:
        raise ZeroNormError("measured far field vanishes on the aperture")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    # a_{b,n} = w_n E_n . conj(B_b,n); the probe phase contributes e^{+ik x^.z~}
    a = np.einsum("n,nc,bnc->bn", w, far.samples, np.conj(basis.fields))
    out = np.empty(len(points))
    nodes = far.grid.nodes
    for s in range(0, len(points), chunk):
        ph = np.exp(1j * k * (points[s : s + chunk] @ nodes.T))
        c = ph @ a.T
        out[s : s + chunk] = np.sqrt(np.sum(np.abs(c) ** 2, axis=1))
    return out / norm


def location_indicator(far, zt, k, basis=None, aperture=None):
    if np.linalg.norm(zt) == 0:
        raise ValueError("probe position must be nonzero")
    return float(indicator_values(far, np.asarray(zt, float)[None], k, basis, aperture)[0])


@dataclass(frozen=True)
class SamplingGrid:
    """Regular box of trial positions: ``center + spacing * (i - (n-1)/2)`` per axis."""

    center: tuple
    spacing: tuple
    counts: tuple = (9, 9, 9)

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        sp = np.broadcast_to(np.asarray(self.spacing, float), (3,))
        n = np.broadcast_to(np.asarray(self.counts, int), (3,))
        if np.any(sp <= 0) or np.any(n < 1):
            raise ValueError("sampling grid needs positive spacing and at least one point per axis")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "spacing", tuple(float(v) for v in sp))
        object.__setattr__(self, "counts", tuple(int(v) for v in n))

    def axes(self):
        return [
            c + s * (np.arange(n) - 0.5 * (n - 1))
            for c, s, n in zip(self.center, self.spacing, self.counts)
        ]

    def points(self):
        X, Y, Z = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([X, Y, Z], -1).reshape(-1, 3)

    def lower(self):
        return np.array([a[0] for a in self.axes()])

    def upper(self):
        return np.array([a[-1] for a in self.axes()])

    def contains(self, point, pad=0.0):
        p = np.asarray(point, float)
        return bool(np.all(p >= self.lower() - pad) and np.all(p <= self.upper() + pad))

    def on_boundary(self, flat_index):
        idx = np.unravel_index(flat_index, self.counts)
        return any(n > 1 and (i == 0 or i == n - 1) for i, n in zip(idx, self.counts))


@dataclass
class LocationResult:
    position: np.ndarray
    value: float
    k: float
    grid: SamplingGrid
    values: np.ndarray | None = None
    ties: list = field(default_factory=list)
    on_boundary: bool = False
    coarse_position: np.ndarray | None = None
    evaluations: int = 0

    @property
    def tied(self):
        return len(self.ties) > 1

    def error(self, truth):
        return float(np.linalg.norm(self.position - np.asarray(truth, float)))


def locate(far, k, grid, refine=True, aperture=None, basis=None, shape_diameter=None):
    """Maximise the location indicator over ``grid`` (then optionally refine).

    The coarse argmax is the first maximiser in C order; every grid point
    within relative ``1e-9`` of the maximum is reported in ``ties``.  An
    argmax on the boundary of the box sets ``on_boundary``.  With
    ``refine`` the coarse point is improved by bounded one-dimensional
    searches along each axis, restricted to one grid cell.
    """
    if shape_diameter is not None and 2 * np.pi / k < 2 * shape_diameter:
        warnings.warn(
            f"wavelength {2 * np.pi / k:.3g} is below twice the shape diameter {shape_diameter:.3g}: "
            "outside the low-frequency regime",
            LowFrequencyWarning,
            stacklevel=2,
        )
    basis = basis or vsh_basis(far.grid)
    pts = grid.points()
    if np.any(np.linalg.norm(pts, axis=1) == 0):
        raise ValueError("sampling grid contains the origin")
    values = indicator_values(far, pts, k, basis, aperture)
    if np.any(values > 1 + BOUND_TOL):
        raise AssertionError(f"indicator exceeds its bound: {values.max()!r}")
    best = int(np.argmax(values))
    vmax = values[best]
    ties = [pts[i].copy() for i in np.flatnonzero(values >= vmax * (1 - TIE_RTOL))]
    boundary = grid.on_boundary(best)
    if boundary:
        log.warning("indicator maximum on the sampling-grid boundary at %s", pts[best])
    position = pts[best].copy()
    value = float(vmax)
    evals = len(pts)
    if refine and len(ties) == 1:
        position, value, n = _refine(far, k, basis, aperture, position, value, np.array(grid.spacing))
        evals += n
    return LocationResult(
        position=position,
        value=value,
        k=float(k),
        grid=grid,
        values=values.reshape(grid.counts),
        ties=ties,
        on_boundary=boundary,
        coarse_position=pts[best].copy(),
        evaluations=evals,
    )


def _refine(far, k, basis, aperture, start, value, spacing, sweeps=3):
    pos = start.copy()
    lo, hi = start - spacing, start + spacing
    count = 0
    for _ in range(sweeps):
        moved = 0.0
        for axis in range(3):
            def f(t, axis=axis):
                p = pos.copy()
                p[axis] = t
                return -indicator_values(far, p[None], k, basis, aperture)[0]

            res = minimize_scalar(f, bounds=(lo[axis], hi[axis]), method="bounded",
                                  options={"xatol": 1e-6 * spacing[axis]})
            count += res.nfev
            if -res.fun > value:
                moved = max(moved, abs(res.x - pos[axis]))
                pos[axis] = res.x
                value = float(-res.fun)
        if moved < 1e-6 * spacing.min():
            break
    return pos, value, count


# -- shape matching ---------------------------------------------------------------------


def _correlation(a, b, w):
    na, nb = _field_norm(a, w), _field_norm(b, w)
    if na == 0 or nb == 0:
        raise ZeroNormError("cannot correlate a vanishing field")
    ip = np.sum(w * np.sum(a * np.conj(b), axis=-1))
    return float(min(abs(ip) / (na * nb), 1.0))


def translated_far(entry, z, k):
    """``e^{ik|z|} / (4 pi |z|) e^{-ik x^.z} E^inf(D, z^, p)`` from a dictionary entry."""
    z = np.asarray(z, float)
    r = np.linalg.norm(z)
    nodes = entry.far.grid.nodes
    phase = np.exp(1j * k * r) / (4 * np.pi * r) * np.exp(-1j * k * (nodes @ z))
    return phase[:, None] * entry.far.samples


def shape_indicator_far(far, entry, z, aperture=None):
    """Normalised correlation ``J`` between the measurement and the translated entry."""
    if not far.grid.same_as(entry.far.grid):
        raise LayoutMismatchError("measurement and dictionary use different sphere grids")
    w = _aperture_weights(far.grid, aperture)
    return _correlation(far.samples, translated_far(entry, z, entry.key.k), w)


def translated_near(entry, z, k):
    r = np.linalg.norm(z)
    return np.exp(1j * k * r) / (4 * np.pi * r) * entry.near


def shape_indicator_near(near, entry, z, dictionary=None, tolerance=1.0, offsets=None):
    """Normalised correlation over the receiver aperture.

    The entry's near field was stored at ``x_r - R_ref d``; it represents
    the translated shape only if ``z`` is within ``tolerance`` of
    ``R_ref d`` and the receivers agree.  Pass ``offsets`` instead of a
    dictionary for entries solved on demand at ``x_r - z``.
    """
    if entry.near is None:
        raise LayoutMismatchError("dictionary entry has no near field")
    z = np.asarray(z, float)
    if offsets is None:
        if dictionary is None or dictionary.receiver_positions is None:
            raise LayoutMismatchError("near-field matching needs the dictionary receiver layout")
        if dictionary.receiver_positions.shape != near.positions.shape or not np.allclose(
            dictionary.receiver_positions, near.positions, rtol=0, atol=1e-9
        ):
            raise LayoutMismatchError("measurement receivers differ from the dictionary layout")
        stored = dictionary.reference_distance * np.asarray(entry.key.direction)
        if np.linalg.norm(stored - z) > tolerance:
            raise LayoutMismatchError(
                f"located position {z} is {np.linalg.norm(stored - z):.3g} from the stored "
                f"reference point {stored} (tolerance {tolerance})"
            )
    return _correlation(near.samples, translated_near(entry, z, entry.key.k), near.weights)


@dataclass
class MatchTable:
    """Rows: measurements (true shapes); columns: dictionary shapes."""

    rows: list
    columns: list
    raw: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=float)
        if self.raw.shape != (len(self.rows), len(self.columns)):
            raise ValueError("table shape does not match its labels")

    @property
    def normalized(self):
        return self.raw / self.raw.max(axis=1, keepdims=True)

    def row_ties(self, i):
        r = self.raw[i]
        return [self.columns[j] for j in np.flatnonzero(r >= r.max() * (1 - TIE_RTOL))]

    def identified(self):
        """Identified column id per row, or ``None`` for a tied row."""
        out = []
        for i in range(len(self.rows)):
            t = self.row_ties(i)
            out.append(t[0] if len(t) == 1 else None)
        return out

    def ties(self):
        return {self.rows[i]: self.row_ties(i) for i in range(len(self.rows)) if len(self.row_ties(i)) > 1}

    def correct(self):
        """Per row: identified id equals the row label."""
        return [r == c for r, c in zip(self.rows, self.identified())]

    def margins(self):
        """1 minus the largest off-diagonal normalised value (rows with a matching column)."""
        out = {}
        norm = self.normalized
        for i, r in enumerate(self.rows):
            if r in self.columns:
                j = self.columns.index(r)
                off = np.delete(norm[i], j)
                out[r] = float(norm[i, j] - off.max()) if off.size else 1.0
        return out

    def to_csv(self, which="normalized", comments=None):
        data = self.normalized if which == "normalized" else self.raw
        ident = self.identified()
        rows = []
        for i, r in enumerate(self.rows):
            cells = [format(v, ".4f") for v in data[i]]
            rows.append([r] + cells + [ident[i] if ident[i] is not None else "TIE"])
        meta = dict(self.meta)
        meta.update(comments or {})
        meta["table"] = which
        return csv_text(["shape"] + list(self.columns) + ["identified"], rows, meta)


def identify(measurement, dictionary, z, k, mode="far", aperture=None, cache=None, tolerance=1.0):
    """Correlate one measurement with every dictionary shape.

    ``measurement`` is a far field (``mode="far"``) or an aperture field
    (``mode="near"``).  With ``cache`` (an :class:`~emgest.dictionary.EntryCache`)
    entries are solved at the exact located direction instead of the
    nearest stored one.

    Returns ``(shape_id or None, row, ties, gaps)``: ``row`` maps shape id
    to raw ``J``, ``ties`` lists all maximisers within relative ``1e-9``.
    """
    z = np.asarray(z, float)
    zhat = z / np.linalg.norm(z)
    ids = dictionary.shape_ids() if dictionary is not None else sorted(cache.shapes)
    row, gaps = {}, {}
    for sid in ids:
        if cache is not None:
            rx = measurement.positions if mode == "near" else None
            entry = cache.entry(sid, k, zhat, receivers=rx, z=z if mode == "near" else None)
            gaps[sid] = 0.0
        else:
            entry, gaps[sid] = nearest_direction_entry(dictionary, sid, k, zhat)
        if mode == "far":
            row[sid] = shape_indicator_far(measurement, entry, z, aperture)
        elif mode == "near":
            if cache is not None:
                row[sid] = shape_indicator_near(measurement, entry, z, offsets=True)
            else:
                row[sid] = shape_indicator_near(measurement, entry, z, dictionary, tolerance)
        else:
            raise ValueError(f"unknown matching mode {mode!r}")
    vals = np.array([row[s] for s in ids])
    ties = [ids[j] for j in np.flatnonzero(vals >= vals.max() * (1 - TIE_RTOL))]
    return (ties[0] if len(ties) == 1 else None), row, ties, gaps


# -- noise ------------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSpec:
    delta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.delta >= 0:
            raise ValueError("noise level must be non-negative")

    def rng(self, *stream):
        """Generator for an independent stream identified by integers ``stream``."""
        return np.random.default_rng(np.random.SeedSequence([int(self.seed), *map(int, stream)]))


def add_noise(samples, delta, rng):
    """``E + delta * zeta1 * max|E| * exp(2 pi i zeta2)`` per Cartesian component.

    ``max|E|`` is the largest Euclidean magnitude of the vector samples;
    ``zeta1, zeta2 ~ U(-1, 1)`` are drawn independently for each component
    of each sample point.
    """
    samples = np.asarray(samples, dtype=complex)
    if delta < 0:
        raise ValueError("noise level must be non-negative")
    if delta == 0:
        return samples.copy()
    peak = float(np.max(np.linalg.norm(samples.reshape(-1, samples.shape[-1]), axis=-1)))
    z1 = rng.uniform(-1.0, 1.0, size=samples.shape)
    z2 = rng.uniform(-1.0, 1.0, size=samples.shape)
    return samples + delta * z1 * peak * np.exp(2j * np.pi * z2)


def noisy_far(far, delta, rng):
    return TangentialFieldOnSphere(far.grid, add_noise(far.samples, delta, rng))
