"""Quadrature on the unit sphere, tangential fields and degree-1 vector harmonics."""

from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np

# point count -> exact polynomial degree of the shipped Lebedev rules
LEBEDEV_ORDERS = {6: 3, 26: 7, 110: 17, 590: 41}

TANGENTIAL_TOL = 1e-8


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SphereGrid:
    """Nodes on the unit sphere with positive weights summing to ``4 pi``."""

    nodes: np.ndarray
    weights: np.ndarray
    degree: int = 0
    name: str = ""

    def __post_init__(self):
        nodes = np.ascontiguousarray(self.nodes, dtype=float)
        weights = np.ascontiguousarray(self.weights, dtype=float)
        if nodes.ndim != 2 or nodes.shape[1] != 3 or weights.shape != (nodes.shape[0],):
            raise ValueError("nodes must be (n, 3) and weights (n,)")
        if np.any(np.abs(np.linalg.norm(nodes, axis=1) - 1.0) > 1e-12):
            raise ValueError("grid nodes must lie on the unit sphere")
        if np.any(weights <= 0):
            raise ValueError("quadrature weights must be positive")
        if abs(weights.sum() - 4 * np.pi) > 1e-10:
            raise ValueError(f"weights sum to {weights.sum()!r}, expected 4 pi")
        nodes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    def __len__(self):
        return self.nodes.shape[0]

    def same_as(self, other):
        return self is other or (
            self.nodes.shape == other.nodes.shape
            and np.array_equal(self.nodes, other.nodes)
            and np.array_equal(self.weights, other.weights)
        )

    def integrate(self, values):
        """Quadrature of nodal ``values`` (first axis runs over nodes)."""
        return np.tensordot(self.weights, values, axes=(0, 0))


@lru_cache(maxsize=None)
def lebedev_grid(point_count):
    """Load one of the embedded Lebedev rules (6, 26, 110 or 590 points)."""
    point_count = int(point_count)
    if point_count not in LEBEDEV_ORDERS:
        avail = ", ".join(str(n) for n in sorted(LEBEDEV_ORDERS))
        raise ValueError(f"no Lebedev rule with {point_count} points; available: {avail}")
    text = resources.files("emgest.data").joinpath(f"lebedev_{point_count:04d}.txt").read_text()
    table = np.loadtxt(text.splitlines(), comments="#")
    return SphereGrid(
        nodes=table[:, :3],
        weights=table[:, 3],
        degree=LEBEDEV_ORDERS[point_count],
        name=f"lebedev{point_count}",
    )


def tangential_part(nodes, samples):
    """Remove the radial component ``x (x . v)`` from nodal vectors."""
    radial = np.sum(nodes * samples, axis=-1, keepdims=True)
    return samples - nodes * radial


@dataclass(frozen=True, eq=False)
class TangentialFieldOnSphere:
    """Complex 3-vector per grid node, projected onto the tangent plane.

    ``projection_residual`` keeps the relative size of whatever radial
    part was removed on construction, so callers can log it.
    """

    grid: SphereGrid
    samples: np.ndarray
    projection_residual: float = field(default=0.0, compare=False)

    def __post_init__(self):
        raw = np.asarray(self.samples, dtype=complex)
        if raw.shape != (len(self.grid), 3):
            raise ValueError(f"expected samples of shape {(len(self.grid), 3)}, got {raw.shape}")
        proj = tangential_part(self.grid.nodes, raw)
        total = np.linalg.norm(raw)
        resid = float(np.linalg.norm(raw - proj) / total) if total > 0 else 0.0
        proj.setflags(write=False)
        object.__setattr__(self, "samples", proj)
        object.__setattr__(self, "projection_residual", max(resid, self.projection_residual))

    @classmethod
    def from_projected(cls, grid, samples, projection_residual=0.0):
        """Wrap samples that are already tangential, keeping their bits unchanged."""
        samples = np.array(samples, dtype=complex)
        if samples.shape != (len(grid), 3):
            raise ValueError(f"expected samples of shape {(len(grid), 3)}, got {samples.shape}")
        samples.setflags(write=False)
        obj = object.__new__(cls)
        object.__setattr__(obj, "grid", grid)
        object.__setattr__(obj, "samples", samples)
        object.__setattr__(obj, "projection_residual", float(projection_residual))
        return obj

    def norm(self, mask=None):
        return norm_sphere(self, mask)

    def scaled(self, factor):
        return TangentialFieldOnSphere(self.grid, self.samples * factor)

    def __add__(self, other):
        _check_same_grid(self, other)
        return TangentialFieldOnSphere(self.grid, self.samples + other.samples)


def _check_same_grid(f, g):
    if not f.grid.same_as(g.grid):
        raise GridMismatchError("fields live on different sphere grids")


def _weights(grid, mask):
    if mask is None:
        return grid.weights
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(grid),):
        raise ValueError("aperture mask must have one entry per grid node")
    if not mask.any():
        raise ValueError("aperture mask selects no nodes")
    return np.where(mask, grid.weights, 0.0)


def inner_product_sphere(f, g, aperture=None):
    """Discrete ``<f, g>_{T^2}`` = sum_i w_i f_i . conj(g_i) over the selected nodes."""
    _check_same_grid(f, g)
    w = _weights(f.grid, aperture)
    return complex(np.sum(w * np.sum(f.samples * np.conj(g.samples), axis=-1)))


def norm_sphere(f, aperture=None):
    w = _weights(f.grid, aperture)
    return float(np.sqrt(np.sum(w * np.sum(np.abs(f.samples) ** 2, axis=-1))))


def cap_mask(grid, axis, half_angle):
    """Nodes within ``half_angle`` (radians) of ``axis``: a polar-cap aperture."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return grid.nodes @ axis >= np.cos(half_angle) - 1e-14


def _y1_gradients():
    # Y_1^m(x) = c_m . x for unit x, orthonormal complex harmonics with Condon-Shortley phase
    a = np.sqrt(3.0 / (8.0 * np.pi))
    return {
        -1: a * np.array([1.0, -1j, 0.0]),
        0: np.sqrt(3.0 / (4.0 * np.pi)) * np.array([0.0, 0.0, 1.0]),
        1: -a * np.array([1.0, 1j, 0.0]),
    }


def y1(m, nodes):
    """Scalar spherical harmonic of degree 1 evaluated at unit vectors."""
    return nodes @ _y1_gradients()[m]


@dataclass(frozen=True, eq=False)
class VSHBasis:
    """The six degree-1 fields ``U_1^m``, ``V_1^m`` (m = -1, 0, 1), unit norm on ``grid``.

    ``fields`` has shape ``(6, n, 3)``; rows 0-2 are U for m = -1, 0, 1
    and rows 3-5 the matching V.
    """

    grid: SphereGrid
    fields: np.ndarray
    labels: tuple

    def __len__(self):
        return self.fields.shape[0]

    def field(self, index):
        return TangentialFieldOnSphere(self.grid, self.fields[index])

    def gram(self):
        w = self.grid.weights
        return np.einsum("n,anc,bnc->ab", w, self.fields, np.conj(self.fields))


def vsh_basis(grid):
    """Degree-1 vector spherical harmonics on ``grid``.

    ``U = 1/2 Grad Y_1^m`` and ``V = 1/2 x^ x Grad Y_1^m``; each field is
    rescaled to unit discrete norm so the six fields are orthonormal
    whatever the harmonic convention.
    """
    nodes = grid.nodes
    rows, labels = [], []
    grads = _y1_gradients()
    for kind in ("U", "V"):
        for m in (-1, 0, 1):
            c = grads[m]
            surf = c[None, :] - nodes * (nodes @ c)[:, None]
            vec = 0.5 * surf if kind == "U" else 0.5 * np.cross(nodes, surf)
            rows.append(vec)
            labels.append((kind, m))
    fields = np.array(rows)
    norms = np.sqrt(np.einsum("n,anc,anc->a", grid.weights, fields, np.conj(fields)).real)
    fields = fields / norms[:, None, None]
    fields.setflags(write=False)
    return VSHBasis(grid=grid, fields=fields, labels=tuple(labels))
