import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from emgest.sphere import (
    LEBEDEV_ORDERS,
    GridMismatchError,
    SphereGrid,
    TangentialFieldOnSphere,
    cap_mask,
    inner_product_sphere,
    lebedev_grid,
    norm_sphere,
    vsh_basis,
    y1,
)


def monomial_integral(a, b, c):
    if a % 2 or b % 2 or c % 2:
        return 0.0
    g = math.gamma
    return 2 * g((a + 1) / 2) * g((b + 1) / 2) * g((c + 1) / 2) / g((a + b + c + 3) / 2)


@pytest.mark.parametrize("points", sorted(LEBEDEV_ORDERS))
def test_lebedev_exactness(points):
    grid = lebedev_grid(points)
    deg = grid.degree
    x, y, z = grid.nodes.T
    worst = 0.0
    for a in range(deg + 1):
        for b in range(deg + 1 - a):
            for c in range(deg + 1 - a - b):
                got = grid.integrate(x**a * y**b * z**c)
                worst = max(worst, abs(got - monomial_integral(a, b, c)))
    assert worst < 1e-10


@pytest.mark.parametrize("points", sorted(LEBEDEV_ORDERS))
def test_lebedev_not_exact_beyond_degree(points):
    grid = lebedev_grid(points)
    # a tilted axis avoids the octahedral symmetry of the nodes
    u = np.array([1.0, 2.0, 3.0]) / np.sqrt(14.0)
    d = grid.degree + 1 if (grid.degree + 1) % 2 == 0 else grid.degree + 2

    def err(q):
        return abs(grid.integrate((grid.nodes @ u) ** q) - 4 * np.pi / (q + 1))

    assert err(d) > 100 * max(err(d - 2), 1e-16)


def test_weights_and_y10_norm():
    for points in LEBEDEV_ORDERS:
        grid = lebedev_grid(points)
        assert abs(grid.weights.sum() - 4 * np.pi) < 1e-10
        assert np.abs(np.linalg.norm(grid.nodes, axis=1) - 1).max() < 1e-12
    g = lebedev_grid(26)
    assert abs(g.integrate(np.abs(y1(0, g.nodes)) ** 2) - 1) < 1e-10


def test_grid_validation():
    nodes = np.eye(3)
    with pytest.raises(ValueError):
        SphereGrid(nodes, np.ones(3))
    with pytest.raises(ValueError):
        SphereGrid(nodes * 2, np.full(3, 4 * np.pi / 3))
    with pytest.raises(ValueError):
        SphereGrid(nodes, np.array([-1.0, 1.0, 4 * np.pi]))
    with pytest.raises(ValueError, match="available"):
        lebedev_grid(7)


def test_grid_is_cached_and_read_only():
    g = lebedev_grid(26)
    assert lebedev_grid(26) is g
    with pytest.raises(ValueError):
        g.nodes[0, 0] = 1.0


@pytest.mark.parametrize("points", [26, 110, 590])
def test_vsh_gram_is_identity(points):
    basis = vsh_basis(lebedev_grid(points))
    assert np.abs(basis.gram() - np.eye(6)).max() < 1e-8


def test_vsh_fields_are_tangential(grid110):
    basis = vsh_basis(grid110)
    radial = np.einsum("anc,nc->an", basis.fields, grid110.nodes)
    assert np.abs(radial).max() < 1e-14


def test_y1_orthonormal(grid110):
    vals = np.array([y1(m, grid110.nodes) for m in (-1, 0, 1)])
    gram = np.einsum("n,an,bn->ab", grid110.weights, vals, np.conj(vals))
    assert np.allclose(gram, np.eye(3), atol=1e-12)


def test_y1_matches_scipy(grid110):
    from scipy.special import sph_harm_y

    x, y, z = grid110.nodes.T
    theta, phi = np.arccos(np.clip(z, -1, 1)), np.arctan2(y, x)
    for m in (-1, 0, 1):
        assert np.allclose(y1(m, grid110.nodes), sph_harm_y(1, m, theta, phi), atol=1e-12)


def test_tangential_projection_records_residual(grid110):
    raw = grid110.nodes * 2.0 + np.array([0, 0, 1.0])
    f = TangentialFieldOnSphere(grid110, raw)
    assert np.abs(np.sum(f.samples * grid110.nodes, axis=1)).max() < 1e-14
    assert f.projection_residual > 0.5


def complex_fields(n):
    comp = st.floats(-10, 10, allow_nan=False)
    return st.lists(st.tuples(comp, comp), min_size=3 * n, max_size=3 * n).map(
        lambda v: np.array([a + 1j * b for a, b in v]).reshape(n, 3)
    )


grid26 = lebedev_grid(26)


@given(complex_fields(26), complex_fields(26), st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False))
def test_inner_product_properties(a, b, c):
    f = TangentialFieldOnSphere(grid26, a)
    g = TangentialFieldOnSphere(grid26, b)
    assert np.isclose(inner_product_sphere(f, g), np.conj(inner_product_sphere(g, f)), atol=1e-9)
    assert np.isclose(inner_product_sphere(f.scaled(c), g), c * inner_product_sphere(f, g), atol=1e-7)
    assert abs(inner_product_sphere(f, g)) <= norm_sphere(f) * norm_sphere(g) * (1 + 1e-12) + 1e-12
    assert np.isclose(inner_product_sphere(f, f).real, norm_sphere(f) ** 2, rtol=1e-12, atol=1e-12)


def test_grid_mismatch():
    f = TangentialFieldOnSphere(lebedev_grid(26), np.zeros((26, 3)))
    g = TangentialFieldOnSphere(lebedev_grid(110), np.zeros((110, 3)))
    with pytest.raises(GridMismatchError):
        inner_product_sphere(f, g)
    with pytest.raises(GridMismatchError):
        f + g


def test_cap_mask(grid110):
    mask = cap_mask(grid110, [1, 0, 0], np.pi / 3)
    assert mask.any() and not mask.all()
    assert np.all(grid110.nodes[mask] @ [1, 0, 0] >= 0.5 - 1e-12)
    assert cap_mask(grid110, [0, 0, 2], np.pi).all()
    f = TangentialFieldOnSphere(grid110, np.ones((110, 3)))
    assert norm_sphere(f, mask) < norm_sphere(f)
    with pytest.raises(ValueError):
        norm_sphere(f, np.zeros(110, bool))
