"""Medium scattering by volume integral equation on a voxel lattice.

The total field inside the scatterer solves ``(I - T) E = E^i`` with

    T E = -k^2 int Phi(x, y) m(y) E(y) dy + grad int (grad n / n . E)(y) Phi(x, y) dy,

``m = 1 - n``.  The second (gradient) term is only assembled for
mollified contrasts (``smoothing > 0``); for a jump contrast it is
dropped and ``T`` reduces to the contrast-weighted volume potential.

Voxel integrals of ``Phi`` use the exact Newtonian potential of a box
for the ``1/(4 pi r)`` part on the self and near voxels; the smooth
remainder is integrated by Gauss-Legendre.  The lattice convolution is
applied with zero-padded FFTs and the linear system is solved with
restarted GMRES.
"""

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from scipy.sparse.linalg import LinearOperator, gmres

from .fields import dipole_fields, plane_wave
from .sphere import TangentialFieldOnSphere

log = logging.getLogger(__name__)

NEAR_OFFSETS = 2  # |offset|_inf up to which voxel integrals are done accurately
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(20)


class SolverError(RuntimeError):
    """Iterative solve failed; ``diagnostics`` carries the residual history."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class MemoryBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class SolverParams:
    tol: float = 1e-8
    maxiter: int = 500
    restart: int = 0  # 0: as long as the Krylov basis fits in ~200 MB, capped at maxiter
    max_voxels: int = 400_000
    threads: int = 0  # 0: EMGEST_THREADS or 1
    end_correction: bool = True

    def workers(self):
        if self.threads:
            return int(self.threads)
        return int(os.environ.get("EMGEST_THREADS", "1") or 1)


# -- voxel integrals of the Green function ---------------------------------------


def _box_potential_primitive(x, y, z):
    r = np.sqrt(x * x + y * y + z * z)
    return (
        y * z * np.log(x + r)
        + x * z * np.log(y + r)
        + x * y * np.log(z + r)
        - 0.5 * x * x * np.arctan(y * z / (x * r))
        - 0.5 * y * y * np.arctan(x * z / (y * r))
        - 0.5 * z * z * np.arctan(x * y / (z * r))
    )


def box_inverse_distance(lo, hi):
    """``int_box 1/|y| dy`` for the box ``[lo, hi]`` (no corner coordinate may be 0).

    Inclusion-exclusion over the eight corners of the closed-form
    antiderivative of ``1/r``.  Arrays broadcast over leading axes.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    total = 0.0
    for ix, sx in ((hi[..., 0], 1), (lo[..., 0], -1)):
        for iy, sy in ((hi[..., 1], 1), (lo[..., 1], -1)):
            for iz, sz in ((hi[..., 2], 1), (lo[..., 2], -1)):
                total = total + sx * sy * sz * _box_potential_primitive(ix, iy, iz)
    return total


def self_voxel_integral(k, h):
    """``int_{[-h/2, h/2]^3} Phi_k(0, y) dy`` by singularity extraction.

    The static part is exact; the remainder ``(e^{ikr} - 1) / (4 pi r)``
    is integrated over the six pyramids joining the centre to the faces,
    radially and over each face with Gauss-Legendre rules.
    """
    a = 0.5 * h
    static = box_inverse_distance(np.full(3, -a), np.full(3, a)) / (4 * np.pi)
    u = a * _GL_NODES
    wu = a * _GL_WEIGHTS
    U, Vv = np.meshgrid(u, u, indexing="ij")
    W = np.outer(wu, wu)
    R = np.sqrt(U * U + Vv * Vv + a * a)
    # radial integral of (e^{ikr} - 1) r / (4 pi) on [0, R] for every face node
    t = 0.5 * (_GL_NODES + 1.0)
    r = R[..., None] * t
    radial = 0.5 * R * np.sum(_GL_WEIGHTS * np.expm1(1j * k * r) * r, axis=-1) / (4 * np.pi)
    remainder = 6.0 * np.sum(W * a / R**3 * radial)
    return static + remainder


def _gauss_box(order=3):
    g, w = np.polynomial.legendre.leggauss(order)
    pts = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3) * 0.5
    wts = np.einsum("i,j,k->ijk", w, w, w).ravel() / 8.0
    return pts, wts


def lattice_kernel(k, h, counts, variation_correction=False):
    """Voxel-integrated Green function for every lattice offset.

    Returns an array over offsets ``-(N-1)..(N-1)`` per axis, ordered so
    that ``kernel[i, j, l]`` holds offset ``(i - Nx + 1, ...)``.

    With ``variation_correction`` the off-centre weights are scaled by
    ``1 + (kh)^2 / 24``.  Holding the field constant on each voxel while
    integrating ``Phi`` exactly leaves a per-voxel error
    ``-(h^2/24) [Lap(Phi E) - E Lap(Phi)]``; the first part reduces to the
    boundary term handled by :func:`end_correction_weights`, the second
    is ``-(kh)^2/24`` times the voxel contribution because
    ``Lap(Phi) = -k^2 Phi`` away from the source point.
    """
    counts = np.asarray(counts)
    axes = [np.arange(-(n - 1), n) for n in counts]
    off = np.stack(np.meshgrid(*axes, indexing="ij"), -1).astype(float)
    dist = h * np.linalg.norm(off, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        kern = h**3 * np.exp(1j * k * dist) / (4 * np.pi * dist)
    near = np.all(np.abs(off) <= NEAR_OFFSETS, axis=-1) & (dist > 0)
    if near.any():
        c = h * off[near]
        static = box_inverse_distance(c - 0.5 * h, c + 0.5 * h) / (4 * np.pi)
        pts, wts = _gauss_box()
        y = c[:, None, :] + h * pts[None]
        ry = np.linalg.norm(y, axis=-1)
        smooth = h**3 * np.sum(wts * np.expm1(1j * k * ry) / (4 * np.pi * ry), axis=-1)
        kern[near] = static + smooth
    if variation_correction:
        kern *= 1.0 + (k * h) ** 2 / 24.0
    centre = tuple(n - 1 for n in counts)
    kern[centre] = self_voxel_integral(k, h)
    return kern


def end_correction_weights(support):
    """Quadrature weights correcting the midpoint rule at the support boundary.

    Along every lattice line through the support, the outermost voxel of
    each run gets ``+1/24`` and its inner neighbour ``-1/24`` (Gregory end
    correction), which cancels the ``h^2 / 24 [f']`` boundary term of the
    composite midpoint rule for integrands that jump to zero there.
    """
    support = np.asarray(support, dtype=bool)
    w = support.astype(float)
    for axis in range(3):
        s = np.moveaxis(support, axis, -1)
        out = np.moveaxis(w, axis, -1)
        pad = np.zeros(s.shape[:-1] + (1,), dtype=bool)
        ext = np.concatenate([pad, s, pad], axis=-1)
        first = ext[..., 1:-1] & ~ext[..., :-2]
        last = ext[..., 1:-1] & ~ext[..., 2:]
        second = s & np.concatenate([pad, first[..., :-1]], axis=-1) & ~last
        penult = s & np.concatenate([last[..., 1:], pad], axis=-1) & ~first
        out += (first.astype(float) + last - second - penult) / 24.0
    return w


# -- discrete operator ---------------------------------------------------------------


@dataclass(eq=False)
class DiscreteSystem:
    """Discretised ``T_{k,D}`` on the voxel lattice of a contrast field."""

    contrast: object
    k: float
    kernel_hat: np.ndarray
    fft_shape: tuple
    m: np.ndarray
    grad_log_n: np.ndarray | None
    active: np.ndarray
    workers: int = 1
    matvecs: int = 0

    @property
    def spacing(self):
        return self.contrast.spacing

    @property
    def grid_shape(self):
        return self.contrast.grid_shape

    @property
    def n_active(self):
        return int(np.count_nonzero(self.active))

    @property
    def zero_contrast(self):
        return not np.any(self.m) and self.grad_log_n is None

    def centers(self):
        return self.contrast.centers()

    def convolve(self, values):
        """Lattice convolution with the voxel-integrated kernel (last axis = components)."""
        nx, ny, nz = self.grid_shape
        spec = sfft.fftn(values, s=self.fft_shape, axes=(0, 1, 2), workers=self.workers)
        spec *= self.kernel_hat[..., None] if values.ndim == 4 else self.kernel_hat
        out = sfft.ifftn(spec, axes=(0, 1, 2), workers=self.workers)
        sl = (slice(nx - 1, 2 * nx - 1), slice(ny - 1, 2 * ny - 1), slice(nz - 1, 2 * nz - 1))
        return out[sl]

    def gradient_density(self, E):
        return np.sum(self.grad_log_n * E, axis=-1)

    def apply(self, E):
        """``T E`` for a total field ``E`` of shape ``grid_shape + (3,)``."""
        self.matvecs += 1
        out = -self.k**2 * self.convolve(self.m[..., None] * E)
        if self.grad_log_n is not None:
            pot = self.convolve(self.gradient_density(E))
            out += np.stack(np.gradient(pot, self.spacing), axis=-1)
        return out

    def _scatter(self, vec):
        E = np.zeros(self.grid_shape + (3,), dtype=complex)
        E[self.active] = vec.reshape(-1, 3)
        return E

    def operator(self):
        """``I - T`` restricted to the active voxels, as a LinearOperator."""
        n = 3 * self.n_active

        def mv(vec):
            E = self._scatter(vec)
            return vec - self.apply(E)[self.active].ravel()

        return LinearOperator((n, n), matvec=mv, dtype=complex)


def assemble(contrast, k, params=None):
    """Build the discrete operator for ``contrast`` at wavenumber ``k``."""
    params = params or SolverParams()
    if not k > 0:
        raise ValueError("wavenumber must be positive")
    counts = np.array(contrast.grid_shape)
    nvox = int(np.prod(counts))
    if nvox > params.max_voxels:
        raise MemoryBudgetError(f"{nvox} voxels exceed the budget of {params.max_voxels}")
    h = contrast.spacing
    kern = lattice_kernel(k, h, counts, variation_correction=params.end_correction)
    fft_shape = tuple(sfft.next_fast_len(int(2 * n - 1)) for n in counts)
    # kernel offset d sits at circular index d mod P; convolve() reads back slice [N-1, 2N-1)
    padded = np.zeros(fft_shape, dtype=complex)
    padded[tuple(slice(0, 2 * n - 1) for n in counts)] = kern
    kernel_hat = sfft.fftn(padded, workers=params.workers())
    m = np.asarray(contrast.m, dtype=complex)
    grad_log_n = None
    active = m != 0
    if contrast.smoothing == 0 and params.end_correction:
        m = m * end_correction_weights(active)
    if contrast.smoothing > 0:
        gn = np.stack(np.gradient(contrast.n, h), axis=-1)
        gn[np.abs(gn) < 1e-14] = 0.0
        if np.any(gn):
            grad_log_n = gn / contrast.n[..., None]
            active = active | np.any(gn != 0, axis=-1)
    return DiscreteSystem(
        contrast=contrast,
        k=float(k),
        kernel_hat=kernel_hat,
        fft_shape=fft_shape,
        m=m,
        grad_log_n=grad_log_n,
        active=active,
        workers=params.workers(),
    )


# -- solve ---------------------------------------------------------------------------


@dataclass
class SolveDiagnostics:
    iterations: int
    residual: float
    history: list = field(default_factory=list)
    active_voxels: int = 0
    matvecs: int = 0

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "residual": self.residual,
            "active_voxels": self.active_voxels,
            "matvecs": self.matvecs,
            "history": list(self.history),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1)


@dataclass(eq=False)
class VolumeSolution:
    """Total field on the voxel lattice plus solver diagnostics."""

    system: DiscreteSystem
    E: np.ndarray
    incident: dict
    diagnostics: SolveDiagnostics

    @property
    def k(self):
        return self.system.k

    @property
    def iterations(self):
        return self.diagnostics.iterations

    @property
    def residual(self):
        return self.diagnostics.residual

    def sources(self):
        """Volume densities radiating the scattered field.

        Returns ``(current, charge)``: ``m E`` and, for mollified
        contrasts, ``grad n / n . E`` (``None`` otherwise).
        """
        sysm = self.system
        current = sysm.m[..., None] * self.E
        charge = sysm.gradient_density(self.E) if sysm.grad_log_n is not None else None
        return current, charge


def relative_residual(system, E, Ei):
    r = E - system.apply(E) - Ei
    return float(np.linalg.norm(r[system.active]) / np.linalg.norm(Ei[system.active]))


def solve_total_field(system, incident, params=None, descriptor=None):
    """Solve ``(I - T) E = E^i`` by restarted GMRES.

    ``incident`` is the incident field sampled at the voxel centres
    (shape ``grid_shape + (3,)``).  Raises :class:`SolverError` when the
    relative residual does not reach ``params.tol`` within
    ``params.maxiter`` inner iterations.
    """
    params = params or SolverParams()
    Ei = np.asarray(incident, dtype=complex)
    if Ei.shape != system.grid_shape + (3,):
        raise ValueError(f"incident field has shape {Ei.shape}, expected {system.grid_shape + (3,)}")
    if not np.all(np.isfinite(Ei[system.active])):
        raise ValueError("incident field is not finite on the scatterer (source inside the support?)")
    descriptor = dict(descriptor or {})
    if system.zero_contrast or not np.any(Ei[system.active]):
        diag = SolveDiagnostics(iterations=0, residual=0.0, active_voxels=system.n_active)
        return VolumeSolution(system, Ei.copy(), descriptor, diag)

    start_mv = system.matvecs
    b = Ei[system.active].ravel()
    A = system.operator()
    history = []
    x = np.zeros_like(b)
    restart = params.restart or max(30, int(2e8 / (16 * b.size)))
    restart = min(restart, params.maxiter, b.size)
    budget = params.maxiter
    residual = np.inf
    # gmres stops on its own residual estimate; re-check the true residual and continue if needed
    while budget > 0:
        before = len(history)
        x, _ = gmres(
            A,
            b,
            x0=x,
            rtol=0.5 * params.tol,
            atol=0.0,
            restart=restart,
            maxiter=max(1, -(-budget // restart)),
            callback=history.append,
            callback_type="pr_norm",
        )
        used = len(history) - before
        budget -= max(used, 1)
        residual = float(np.linalg.norm(A.matvec(x) - b) / np.linalg.norm(b))
        if residual <= params.tol or used == 0:
            break
    diag = SolveDiagnostics(
        iterations=len(history),
        residual=residual,
        history=[float(v) for v in history],
        active_voxels=system.n_active,
        matvecs=system.matvecs - start_mv,
    )
    if residual > params.tol:
        raise SolverError(
            f"GMRES did not reach tol {params.tol:g} in {params.maxiter} iterations "
            f"(relative residual {residual:.3e}, contrast n_inside = {system.contrast.n_inside}, "
            f"k = {system.k:g}, {system.n_active} active voxels)",
            diag,
        )
    E = system._scatter(x)
    inactive = ~system.active
    if inactive.any():
        # representation formula outside the active set
        E[inactive] = (Ei + system.apply(E))[inactive]
    return VolumeSolution(system, E, descriptor, diag)


# -- field evaluation ---------------------------------------------------------------


def _inside_support(system, x):
    c = system.contrast
    idx = np.floor((x - c.origin) / c.spacing + 0.5).astype(int)
    ok = np.all((idx >= 0) & (idx < np.array(c.grid_shape)), axis=-1)
    hit = np.zeros(x.shape[:-1], dtype=bool)
    hit[ok] = system.active[tuple(idx[ok].T)]
    return hit


def scattered_field_at(solution, x, chunk=2048):
    """Scattered field at exterior points ``x`` (local coordinates of the lattice)."""
    x = np.asarray(x, dtype=float)
    pts = x.reshape(-1, 3)
    system = solution.system
    if np.any(_inside_support(system, pts)):
        raise ValueError("evaluation point lies inside the scatterer support")
    act = system.active
    centers = system.centers()[act]
    current, charge = solution.sources()
    current = current[act]
    charge = charge[act] if charge is not None else None
    k, vol = system.k, system.contrast.voxel_volume
    out = np.empty(pts.shape, dtype=complex)
    for s in range(0, len(pts), chunk):
        r = pts[s : s + chunk, None, :] - centers[None]
        dist = np.linalg.norm(r, axis=-1)
        phi = np.exp(1j * k * dist) / (4 * np.pi * dist)
        val = -(k**2) * vol * np.einsum("pv,vc->pc", phi, current)
        if charge is not None:
            gphi = (phi * (1j * k - 1.0 / dist) / dist)[..., None] * r
            val += vol * np.einsum("pvc,v->pc", gphi, charge)
        out[s : s + chunk] = val
    return out.reshape(x.shape)


def far_field_samples(solution, directions):
    """Unprojected far-field amplitude ``lim |x| e^{-ik|x|} E^s(|x| x^)``."""
    system = solution.system
    act = system.active
    centers = system.centers()[act]
    current, charge = solution.sources()
    k, vol = system.k, system.contrast.voxel_volume
    phase = np.exp(-1j * k * (directions @ centers.T))
    out = -(k**2) * vol / (4 * np.pi) * (phase @ current[act])
    if charge is not None:
        out += (1j * k * vol / (4 * np.pi)) * (phase @ charge[act])[:, None] * directions
    return out


def far_field(solution, grid):
    """Tangential far-field pattern on ``grid``; the removed radial part is logged."""
    ff = TangentialFieldOnSphere(grid, far_field_samples(solution, grid.nodes))
    if ff.projection_residual > 1e-12:
        log.debug("far field projection residual %.3e", ff.projection_residual)
    return ff


def far_field_from_near(solution, grid, radius, shift=None):
    """Far field approximated by ``R e^{-ikR} E^s(R x^)`` at a finite radius.

    ``shift`` is the world position of the lattice frame (the scatterer
    translation); the radius is measured from the world origin.
    """
    shift = np.zeros(3) if shift is None else np.asarray(shift, float)
    k = solution.k
    pts = radius * grid.nodes - shift
    es = scattered_field_at(solution, pts)
    return TangentialFieldOnSphere(grid, radius * np.exp(-1j * k * radius) * es)


# -- measurements --------------------------------------------------------------------


@dataclass(frozen=True)
class SourceConfig:
    """Electric dipoles at ``positions`` sharing one polarization per wavenumber.

    ``polarization`` is either a 3-vector or a mapping ``k -> 3-vector``.
    """

    positions: tuple = ((0.0, 0.0, 0.0),)
    polarization: object = (0.0, 0.0, 1.0)

    def __post_init__(self):
        pos = tuple(tuple(float(v) for v in p) for p in self.positions)
        if not pos:
            raise ValueError("need at least one source")
        if len(set(pos)) != len(pos):
            raise ValueError("source positions must be distinct")
        object.__setattr__(self, "positions", pos)

    def polarization_for(self, k):
        pol = self.polarization
        if isinstance(pol, dict):
            for key, val in pol.items():
                if np.isclose(float(key), k, rtol=1e-12, atol=0):
                    pol = val
                    break
            else:
                raise KeyError(f"no polarization configured for k = {k}")
        p = np.asarray(pol, dtype=float)
        if p.shape != (3,) or not np.linalg.norm(p) > 0:
            raise ValueError(f"polarization must be a nonzero 3-vector, got {pol!r}")
        return p


def aperture_receivers(count=11, width=1.0, center=(0.0, 0.0, 0.0)):
    """Uniform ``count x count`` grid on a square in the x2-x3 plane.

    Returns ``(positions, weights)``; weights are equal cell areas.
    """
    s = np.linspace(-0.5 * width, 0.5 * width, count)
    Y, Z = np.meshgrid(s, s, indexing="ij")
    pos = np.stack([np.zeros_like(Y), Y, Z], -1).reshape(-1, 3) + np.asarray(center, float)
    weights = np.full(len(pos), width * width / len(pos))
    return pos, weights


@dataclass(frozen=True, eq=False)
class ApertureField:
    """Scattered near-field samples at receiver positions."""

    positions: np.ndarray
    samples: np.ndarray
    k: float
    weights: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        smp = np.asarray(self.samples, dtype=complex).reshape(-1, 3)
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if not (len(pos) == len(smp) == len(w)):
            raise ValueError("positions, samples and weights must have matching lengths")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "samples", smp)
        object.__setattr__(self, "weights", w)

    def norm(self):
        return float(np.sqrt(np.sum(self.weights * np.sum(np.abs(self.samples) ** 2, axis=-1))))

    def __add__(self, other):
        return ApertureField(self.positions, self.samples + other.samples, self.k, self.weights)


@dataclass
class Measurement:
    near: ApertureField
    far: TangentialFieldOnSphere
    diagnostics: list


def plane_wave_solution(system, k, direction, polarization, params=None):
    """Solve scattering of a plane wave by the (untranslated) lattice scatterer."""
    Ei, _ = plane_wave(k, direction, polarization, system.centers())
    desc = {"kind": "plane", "k": k, "direction": list(map(float, direction)),
            "polarization": list(map(float, polarization))}
    return solve_total_field(system, Ei, params, desc)


def simulate_measurement(placed, k, sources, receivers, grid, params=None, system=None,
                         far_mode="true", far_radius=None, asymptotic_ratio=10.0):
    """Dipole illumination of ``placed`` and the resulting data.

    The solve runs in shape-local coordinates: the incident dipole field
    is sampled at ``t + z``, receivers are mapped to ``x - z`` and the far
    field picks up the phase ``exp(-ik x^.z)``.  Several sources are
    handled one solve each and superposed.

    ``far_mode="near"`` replaces the true far field by the near field
    evaluated at ``far_radius`` (default ten wavelengths) and rescaled.

    Returns a :class:`Measurement` (near field on the receivers, far
    field on ``grid``, per-source solver diagnostics).
    """
    params = params or SolverParams()
    positions, weights = receivers
    positions = np.asarray(positions, dtype=float)
    system = system or assemble(placed.contrast, k, params)
    z = placed.placement.vector
    placed.placement.check_asymptotic(placed.shape, asymptotic_ratio)
    local_rx = positions - z
    if np.any(_inside_support(system, local_rx)):
        raise ValueError("a receiver lies inside the scatterer support")
    pol = sources.polarization_for(k)
    centers = system.centers()
    world = centers + z
    phase = np.exp(-1j * k * (grid.nodes @ z))[:, None]
    near = np.zeros((len(positions), 3), dtype=complex)
    far = np.zeros((len(grid), 3), dtype=complex)
    diags = []
    for y in sources.positions:
        if np.any(_inside_support(system, np.asarray(y)[None] - z)):
            raise ValueError(f"source {y} lies inside the scatterer support")
        Ei, _ = dipole_fields(k, pol, np.asarray(y), world)
        desc = {"kind": "dipole", "k": k, "source": list(y), "polarization": pol.tolist()}
        sol = solve_total_field(system, Ei, params, desc)
        diags.append(sol.diagnostics)
        near += scattered_field_at(sol, local_rx)
        if far_mode == "true":
            far += far_field_samples(sol, grid.nodes) * phase
        elif far_mode == "near":
            radius = far_radius or 10 * 2 * np.pi / k
            far += far_field_from_near(sol, grid, radius, shift=z).samples
        else:
            raise ValueError(f"unknown far_mode {far_mode!r}")
    return Measurement(
        near=ApertureField(positions, near, k, weights),
        far=TangentialFieldOnSphere(grid, far),
        diagnostics=diags,
    )
