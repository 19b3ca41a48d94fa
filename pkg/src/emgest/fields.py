"""Closed-form electromagnetic primitives.

All routines are vectorised over leading axes: points are ``(..., 3)``
arrays and fields come back with the same leading shape.  Time
dependence ``exp(-i omega t)`` is implied throughout, so the outgoing
Green function is ``exp(ikr) / (4 pi r)`` and Maxwell's equations read
``curl E = ik H``, ``curl H = -ik E`` in free space.
"""

import numpy as np

COINCIDENT_CUTOFF = 1e-12


class CoincidentPointsError(ValueError):
    """Raised when a singular kernel is evaluated at (numerically) zero distance."""


def _check_k(k):
    if not np.isfinite(k) or k <= 0:
        raise ValueError(f"wavenumber must be positive and finite, got {k!r}")


def _separation(x, y, cutoff):
    r = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    dist = np.linalg.norm(r, axis=-1)
    if np.any(dist < cutoff):
        raise CoincidentPointsError(
            f"distance {dist.min():.3e} below coincidence cutoff {cutoff:.1e}"
        )
    return r, dist


def fundamental_solution(k, x, y, cutoff=COINCIDENT_CUTOFF):
    """Helmholtz Green function ``exp(ik|x-y|) / (4 pi |x-y|)``."""
    _check_k(k)
    _, dist = _separation(x, y, cutoff)
    return np.exp(1j * k * dist) / (4.0 * np.pi * dist)


def dipole_fields(k, p, y, x, cutoff=COINCIDENT_CUTOFF):
    """Electric dipole at ``y`` with polarization ``p``, observed at ``x``.

    ``E = (i/k) curl curl (p Phi)`` and ``H = curl (p Phi)``, using the
    analytic expansion of the double curl

        E = (i/k) Phi [ (k^2 + ik/r - 1/r^2) (p - r^ (r^.p))
                        + (2/r^2 - 2ik/r) r^ (r^.p) ]
        H = Phi (ik - 1/r) r^ x p

    Returns
    -------
    E, H : complex arrays of shape ``(..., 3)``
    """
    _check_k(k)
    p = np.asarray(p, dtype=float)
    r, dist = _separation(x, y, cutoff)
    rhat = r / dist[..., None]
    phi = np.exp(1j * k * dist) / (4.0 * np.pi * dist)
    inv = 1.0 / dist
    rp = np.sum(rhat * p, axis=-1)[..., None]
    longitudinal = rhat * rp
    transverse = p - longitudinal
    coef_t = (k * k + 1j * k * inv - inv * inv)[..., None]
    coef_l = (2.0 * inv * inv - 2j * k * inv)[..., None]
    E = (1j / k) * phi[..., None] * (coef_t * transverse + coef_l * longitudinal)
    H = (phi * (1j * k - inv))[..., None] * np.cross(rhat, np.broadcast_to(p, rhat.shape))
    return E, H


def plane_wave(k, d, p, x, tol=1e-10):
    """Plane wave ``E = ik (d x p) x d e^{ik x.d}``, ``H = ik d x p e^{ik x.d}``."""
    _check_k(k)
    d = np.asarray(d, dtype=float)
    p = np.asarray(p, dtype=float)
    if abs(np.linalg.norm(d) - 1.0) > tol:
        raise ValueError(f"propagation direction must be a unit vector, |d| = {np.linalg.norm(d)!r}")
    x = np.asarray(x, dtype=float)
    phase = np.exp(1j * k * (x @ d))[..., None]
    dxp = np.cross(d, p)
    E = 1j * k * np.cross(dxp, d) * phase
    H = 1j * k * dxp * phase
    return E, H


def curl_fd(field, x, step=1e-4):
    """Central-difference curl of a vector field callable at points ``x``.

    ``field`` maps an ``(n, 3)`` array of points to ``(n, 3)`` values.
    Used by the test-suite as an independent check of the closed forms.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    jac = np.empty(x.shape[:-1] + (3, 3), dtype=complex)  # jac[..., i, j] = d F_i / d x_j
    for j in range(3):
        e = np.zeros(3)
        e[j] = step
        jac[..., :, j] = (field(x + e) - field(x - e)) / (2 * step)
    return np.stack(
        [
            jac[..., 2, 1] - jac[..., 1, 2],
            jac[..., 0, 2] - jac[..., 2, 0],
            jac[..., 1, 0] - jac[..., 0, 1],
        ],
        axis=-1,
    )


def div_fd(field, x, step=1e-4):
    """Central-difference divergence, companion to :func:`curl_fd`."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = np.zeros(x.shape[:-1], dtype=complex)
    for j in range(3):
        e = np.zeros(3)
        e[j] = step
        out += (field(x + e)[..., j] - field(x - e)[..., j]) / (2 * step)
    return out
