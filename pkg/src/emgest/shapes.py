"""Gesture geometry: unions of lattice cubes, their contrast fields and translates."""

import warnings
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import yaml

MAX_CUBES = 64
ASYMPTOTIC_RATIO = 10.0

_NEIGHBOURS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


class ShapeError(ValueError):
    pass


class AsymptoticRegimeWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ShapeSpec:
    """Union of cubes ``size * [a, a+1]^3`` for integer anchors ``a``.

    With ``centered`` the union is shifted so its centroid sits at the
    origin; local coordinates of lattice point ``a`` are
    ``size * a + offset``.
    """

    id: str
    cubes: tuple
    size: float = 1.0
    centered: bool = True

    @cached_property
    def anchors(self):
        return np.array(self.cubes, dtype=int).reshape(-1, 3)

    @property
    def cube_count(self):
        return len(self.cubes)

    @cached_property
    def offset(self):
        if not self.centered:
            return np.zeros(3)
        return -self.size * (self.anchors.mean(axis=0) + 0.5)

    def cube_bounds(self):
        """Lower and upper corners of every cube in local coordinates."""
        lo = self.size * self.anchors + self.offset
        return lo, lo + self.size

    def vertices(self):
        lo, _ = self.cube_bounds()
        corners = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], float)
        return (lo[:, None, :] + self.size * corners[None]).reshape(-1, 3)

    @cached_property
    def diameter(self):
        v = np.unique(self.vertices(), axis=0)
        diff = v[:, None, :] - v[None, :, :]
        return float(np.sqrt((diff**2).sum(-1)).max())

    @cached_property
    def radius(self):
        """``max_{x in D} |x|``, attained at a cube vertex."""
        return float(np.linalg.norm(self.vertices(), axis=1).max())

    @property
    def volume(self):
        return self.cube_count * self.size**3

    def distance(self, points):
        """Euclidean distance from ``points`` to the closed cube union (0 inside)."""
        pts = np.asarray(points, dtype=float)
        lo, hi = self.cube_bounds()
        flat = pts.reshape(-1, 1, 3)
        gap = np.maximum(np.maximum(lo[None] - flat, flat - hi[None]), 0.0)
        return np.sqrt((gap**2).sum(-1)).min(axis=1).reshape(pts.shape[:-1])

    def contains(self, points, tol=0.0):
        return self.distance(points) <= tol


def _connected(cells):
    start = next(iter(cells))
    seen = {start}
    queue = deque([start])
    while queue:
        c = queue.popleft()
        for d in _NEIGHBOURS:
            n = (c[0] + d[0], c[1] + d[1], c[2] + d[2])
            if n in cells and n not in seen:
                seen.add(n)
                queue.append(n)
    return len(seen) == len(cells)


def _has_void(cells):
    arr = np.array(sorted(cells))
    lo, hi = arr.min(axis=0) - 1, arr.max(axis=0) + 1
    start = tuple(lo)
    seen = {start}
    queue = deque([start])
    while queue:
        c = queue.popleft()
        for d in _NEIGHBOURS:
            n = (c[0] + d[0], c[1] + d[1], c[2] + d[2])
            if n in seen or n in cells:
                continue
            if any(n[i] < lo[i] or n[i] > hi[i] for i in range(3)):
                continue
            seen.add(n)
            queue.append(n)
    box = np.prod(hi - lo + 1)
    return len(seen) + len(cells) < box


def build_shape(id, cubes, size=1.0, centered=True):
    """Validate a cube union and return it as a :class:`ShapeSpec`.

    Raises :class:`ShapeError` for duplicate anchors, more than 64 cubes,
    a set that is not face-connected, enclosed voids, or (when centred) a
    centroid that falls outside the union.
    """
    anchors = [tuple(int(v) for v in a) for a in cubes]
    if any(len(a) != 3 for a in anchors):
        raise ShapeError("cube anchors must be integer triples")
    if not 1 <= len(anchors) <= MAX_CUBES:
        raise ShapeError(f"a shape needs 1..{MAX_CUBES} cubes, got {len(anchors)}")
    cells = set(anchors)
    if len(cells) != len(anchors):
        raise ShapeError(f"shape {id!r} has duplicate cube anchors")
    if not _connected(cells):
        raise ShapeError(f"cubes of shape {id!r} are not face-connected")
    if _has_void(cells):
        raise ShapeError(f"shape {id!r} encloses a void")
    if not size > 0:
        raise ShapeError("cube size must be positive")
    spec = ShapeSpec(id=str(id), cubes=tuple(anchors), size=float(size), centered=bool(centered))
    if not spec.contains(np.zeros(3), tol=1e-12):
        raise ShapeError(f"shape {id!r} does not contain the origin")
    return spec


# Representative 4-8 cube layouts of gesture size.
PRESET_CUBES = {
    "D1": [(0, 0, 0), (0, 0, 1), (0, 0, 2), (0, 0, 3)],
    "D2": [(0, 0, 0), (0, 0, 1), (0, 0, 2), (0, 0, 3), (0, 1, 0)],
    "D3": [(0, -1, 3), (0, 0, 3), (0, 1, 3), (0, 0, 2), (0, 0, 1), (0, 0, 0)],
    "D4": [(0, y, z) for z in (0, 1) for y in (0, 1, 2)],
    "D5": [(0, 0, 0), (0, 0, 1), (0, 0, 2), (0, 1, 0), (0, 1, 1), (0, 1, 2), (1, 0, 2)],
    "D6": [(i, j, k) for i in (0, 1) for j in (0, 1) for k in (0, 1)],
}


def _check_preset(spec):
    if not 4 <= spec.cube_count <= 8:
        raise ShapeError(f"preset {spec.id} must have 4..8 cubes")
    if not 1.0 <= spec.radius <= 4.0:
        raise ShapeError(f"preset {spec.id} has max |x| = {spec.radius:.3f}, outside [1, 4]")
    return spec


PRESETS = {name: _check_preset(build_shape(name, cubes)) for name, cubes in PRESET_CUBES.items()}


def preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise ShapeError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}") from None


@dataclass(frozen=True)
class Placement:
    """Translation ``Omega = D + z``."""

    z: tuple

    def __post_init__(self):
        z = tuple(float(v) for v in self.z)
        if len(z) != 3 or not all(np.isfinite(z)):
            raise ValueError(f"placement must be a finite 3-vector, got {self.z!r}")
        object.__setattr__(self, "z", z)

    @property
    def vector(self):
        return np.array(self.z)

    def check_asymptotic(self, shape, ratio=ASYMPTOTIC_RATIO):
        """Warn when |z| is not large compared to the shape diameter."""
        dist = float(np.linalg.norm(self.vector))
        if dist < ratio * shape.diameter:
            warnings.warn(
                f"|z| = {dist:.3g} is below {ratio:g} x diameter ({shape.diameter:.3g}) of "
                f"shape {shape.id}; translation asymptotics may be inaccurate",
                AsymptoticRegimeWarning,
                stacklevel=2,
            )
            return False
        return True


def translate(x, placement):
    """Shape-local point(s) ``x`` to world coordinates ``x + z``."""
    return np.asarray(x, dtype=float) + placement.vector


def untranslate(y, placement):
    return np.asarray(y, dtype=float) - placement.vector


@dataclass(frozen=True, eq=False)
class ContrastField:
    """Refraction index sampled at voxel centres on an axis-aligned lattice.

    ``origin`` is the local position of voxel ``(0, 0, 0)``'s centre and
    ``spacing`` the voxel edge (``size / resolution``).  Voxel faces line
    up with cube faces, so a jump contrast is represented exactly.
    """

    n: np.ndarray
    origin: np.ndarray
    spacing: float
    resolution: int
    smoothing: float
    n_inside: complex
    shape_id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def grid_shape(self):
        return self.n.shape

    @property
    def m(self):
        return 1.0 - self.n

    @property
    def voxel_volume(self):
        return self.spacing**3

    def centers(self):
        idx = np.indices(self.n.shape, dtype=float).transpose(1, 2, 3, 0)
        return self.origin + self.spacing * idx

    def support(self):
        return self.n != 1.0

    def support_volume(self):
        return float(np.count_nonzero(self.support())) * self.voxel_volume


def rasterize_contrast(shape, n_inside, resolution=4, smoothing=0.0):
    """Sample the refraction index of ``shape`` on a voxel lattice.

    Inside the cube union ``n = n_inside``.  With ``smoothing = rho > 0``
    the index blends linearly back to 1 over a distance ``rho`` outside
    the boundary; ``rho = 0`` keeps the discontinuous jump.  The lattice
    covers the bounding box plus the blend layer and two voxels of
    free-space margin (needed by finite-difference stencils).
    """
    n_inside = complex(n_inside)
    if n_inside.real <= 0 or n_inside.imag < 0:
        raise ValueError(f"need Re n > 0 and Im n >= 0, got n_inside = {n_inside}")
    resolution = int(resolution)
    if resolution < 2:
        raise ValueError("resolution must be at least 2 voxels per cube edge")
    if smoothing < 0:
        raise ValueError("smoothing radius must be non-negative")
    h = shape.size / resolution
    pad = 0 if smoothing == 0 else int(np.ceil(smoothing / h - 1e-12)) + 2
    amin = shape.anchors.min(axis=0)
    amax = shape.anchors.max(axis=0) + 1
    lo_idx = amin * resolution - pad
    counts = (amax - amin) * resolution + 2 * pad
    # voxel i (global lattice index) spans [i h, (i+1) h] in lattice-scaled units
    gi = [np.arange(lo_idx[a], lo_idx[a] + counts[a]) for a in range(3)]
    origin = shape.offset + h * (lo_idx + 0.5)

    cube_idx = np.stack(np.meshgrid(*(np.floor_divide(g, resolution) for g in gi), indexing="ij"), -1)
    cells = set(shape.cubes)
    inside = np.array([tuple(c) in cells for c in cube_idx.reshape(-1, 3)]).reshape(counts)
    n = np.where(inside, n_inside, 1.0 + 0j)
    if smoothing > 0:
        idx = np.indices(counts, dtype=float).transpose(1, 2, 3, 0)
        dist = shape.distance(origin + h * idx)
        blend = np.clip(dist / smoothing, 0.0, 1.0)
        n = np.where(inside, n_inside, n_inside + (1.0 - n_inside) * blend)
        n[blend >= 1.0] = 1.0
    n.setflags(write=False)
    return ContrastField(
        n=n,
        origin=origin,
        spacing=h,
        resolution=resolution,
        smoothing=float(smoothing),
        n_inside=n_inside,
        shape_id=shape.id,
    )


@dataclass(frozen=True, eq=False)
class PlacedShape:
    """A dictionary shape together with its translation and contrast."""

    shape: ShapeSpec
    placement: Placement
    contrast: ContrastField

    def world_centers(self):
        return translate(self.contrast.centers(), self.placement)


def place(shape, z, n_inside=5.0, resolution=4, smoothing=0.0, contrast=None):
    placement = z if isinstance(z, Placement) else Placement(tuple(z))
    if contrast is None:
        contrast = rasterize_contrast(shape, n_inside, resolution, smoothing)
    return PlacedShape(shape=shape, placement=placement, contrast=contrast)


def load_shapes(path):
    """Read shapes (presets or explicit cubes) and contrast settings from YAML.

    See ``docs/shapes.md`` for the schema.  Returns ``(shapes, contrast)``
    where ``contrast`` is a dict with ``n_inside``, ``resolution`` and
    ``smoothing`` (defaults filled in).
    """
    doc = yaml.safe_load(Path(path).read_text())
    return parse_shapes(doc)


def parse_shapes(doc):
    if not isinstance(doc, dict) or "shapes" not in doc:
        raise ShapeError("shape file needs a top-level 'shapes' list")
    shapes = []
    for item in doc["shapes"]:
        if isinstance(item, str):
            shapes.append(preset(item))
        elif "preset" in item:
            shapes.append(preset(item["preset"]))
        else:
            shapes.append(
                build_shape(item["id"], item["cubes"], item.get("size", 1.0), item.get("centered", True))
            )
    ids = [s.id for s in shapes]
    if len(set(ids)) != len(ids):
        raise ShapeError(f"duplicate shape ids in {ids}")
    contrast = {"n_inside": 5.0, "resolution": 4, "smoothing": 0.0}
    contrast.update(doc.get("contrast") or {})
    return shapes, contrast
