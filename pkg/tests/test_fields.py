import numpy as np
import pytest

from emgest.fields import (
    CoincidentPointsError,
    curl_fd,
    dipole_fields,
    div_fd,
    fundamental_solution,
    plane_wave,
)


def random_unit(rng, n=None):
    v = rng.normal(size=(3,) if n is None else (n, 3))
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def test_fundamental_solution_value():
    x = np.array([1.0, 2.0, 2.0])
    assert fundamental_solution(2.0, x, np.zeros(3)) == pytest.approx(np.exp(6j) / (12 * np.pi))


def test_fundamental_solution_symmetric(rng):
    x, y = rng.normal(size=(2, 7, 3))
    assert np.allclose(fundamental_solution(1.3, x, y), fundamental_solution(1.3, y, x), rtol=0, atol=1e-15)


def test_coincident_points_rejected():
    with pytest.raises(CoincidentPointsError):
        fundamental_solution(1.0, np.zeros(3), np.zeros(3))
    with pytest.raises(CoincidentPointsError):
        dipole_fields(1.0, [0, 0, 1], np.zeros(3), np.full(3, 1e-14))


@pytest.mark.parametrize("k", [0.0, -1.0, np.inf])
def test_bad_wavenumber(k):
    with pytest.raises(ValueError):
        dipole_fields(k, [0, 0, 1], np.zeros(3), np.ones(3))


def test_dipole_maxwell(rng):
    k, p, y = 1.7, np.array([0.3, -0.5, 0.8]), np.array([0.1, 0.2, -0.3])
    x = y + random_unit(rng, 50) * rng.uniform(1.0, 5.0, size=(50, 1))
    E, H = dipole_fields(k, p, y, x)
    curlE = curl_fd(lambda t: dipole_fields(k, p, y, t)[0], x)
    curlH = curl_fd(lambda t: dipole_fields(k, p, y, t)[1], x)
    assert np.linalg.norm(curlE - 1j * k * H) <= 1e-5 * np.linalg.norm(k * H)
    assert np.linalg.norm(curlH + 1j * k * E) <= 1e-5 * np.linalg.norm(k * E)
    div = div_fd(lambda t: dipole_fields(k, p, y, t)[0], x)
    assert np.max(np.abs(div)) <= 1e-5 * np.max(np.abs(k * E))


def test_dipole_is_double_curl_of_green(rng):
    # E = (i/k) curl curl (p Phi): check via finite differences of H = curl(p Phi)
    k, p, y = 2.0, np.array([1.0, 0.0, 0.5]), np.zeros(3)
    x = random_unit(rng, 10) * 2.0

    def A(t):
        return fundamental_solution(k, t, y)[..., None] * p

    H = curl_fd(A, x)
    E, Hc = dipole_fields(k, p, y, x)
    assert np.allclose(H, Hc, rtol=1e-6, atol=0)


def test_plane_wave_maxwell(rng):
    k = 3.0
    d = random_unit(rng)
    p = rng.normal(size=3)
    x = rng.uniform(-3, 3, size=(50, 3))
    E, H = plane_wave(k, d, p, x)
    curlE = curl_fd(lambda t: plane_wave(k, d, p, t)[0], x)
    curlH = curl_fd(lambda t: plane_wave(k, d, p, t)[1], x)
    assert np.linalg.norm(curlE - 1j * k * H) <= 1e-5 * np.linalg.norm(k * H)
    assert np.linalg.norm(curlH + 1j * k * E) <= 1e-5 * np.linalg.norm(k * E)
    assert np.allclose(E @ d, 0, atol=1e-12)


def test_plane_wave_rejects_non_unit_direction():
    with pytest.raises(ValueError):
        plane_wave(1.0, [1.0 + 1e-9, 0.0, 0.0], [0, 0, 1], np.zeros(3))
    plane_wave(1.0, [1.0 + 1e-11, 0.0, 0.0], [0, 0, 1], np.zeros(3))


def test_vectorised_shapes():
    x = np.ones((4, 5, 3))
    E, H = dipole_fields(1.0, [0, 0, 1], np.zeros(3), x)
    assert E.shape == H.shape == (4, 5, 3)
    E, H = plane_wave(1.0, [0, 0, 1], [1, 0, 0], x)
    assert E.shape == (4, 5, 3)


def transition_residual(k, zhat, p, y, x, R):
    z = R * zhat
    E = dipole_fields(k, p, y, x + z)[0]
    scaled = 4 * np.pi * R * np.exp(-1j * k * R + 1j * k * zhat @ y) * E
    ref = plane_wave(k, zhat, p, x)[0]
    return np.linalg.norm(scaled - ref) / np.linalg.norm(ref)


def test_dipole_to_plane_wave_transition(rng):
    k, p, y = 1.0, np.array([0.0, 0.6, 0.8]), np.array([0.2, -0.1, 0.1])
    x = rng.uniform(-1, 1, size=(20, 3))
    radii = np.geomspace(50, 500, 6)
    for _ in range(5):
        zhat = random_unit(rng)
        res = [transition_residual(k, zhat, p, y, x, R) for R in radii]
        slope = np.polyfit(np.log(radii), np.log(res), 1)[0]
        assert abs(slope + 1.0) < 0.2
