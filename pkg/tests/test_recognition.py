import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from emgest import dictionary as D
from emgest import forward as F
from emgest import recognition as R
from emgest.shapes import build_shape, place, preset
from emgest.sphere import TangentialFieldOnSphere, cap_mask, lebedev_grid, vsh_basis

GRID = lebedev_grid(110)
BASIS = vsh_basis(GRID)
CUBE = build_shape("cube", [(0, 0, 0)])


def synthetic_far(z, k, coeffs):
    samples = sum(c * R.probe_field(z, k, BASIS, b).samples for b, c in enumerate(coeffs))
    return TangentialFieldOnSphere(GRID, samples)


def random_field(rng, grid=GRID):
    return TangentialFieldOnSphere(grid, rng.normal(size=(len(grid), 3)) + 1j * rng.normal(size=(len(grid), 3)))


# -- probes and the location indicator ---------------------------------------------------


def test_probe_norm_and_orthogonality():
    zt, k = np.array([3.0, -4.0, 12.0]), 0.7
    probes = [R.probe_field(zt, k, BASIS, b) for b in range(6)]
    for p in probes:
        assert p.norm() == pytest.approx(1 / (4 * np.pi * 13.0), abs=1e-8)
    gram = np.array([[np.sum(GRID.weights * np.sum(a.samples * np.conj(b.samples), axis=1)) for b in probes]
                     for a in probes]) * (4 * np.pi * 13.0) ** 2
    assert np.abs(gram - np.eye(6)).max() < 1e-8


def test_probe_scaling():
    zt, k = np.array([1.0, 2.0, 2.0]), 0.4
    a = R.probe_field(zt, k, BASIS, 2)
    b = R.probe_field(2 * zt, k, BASIS, 2)
    assert b.norm() == pytest.approx(a.norm() / 2, rel=1e-12)
    with pytest.raises(ValueError):
        R.probe_field(np.zeros(3), k, BASIS, 0)


def test_indicator_is_one_at_the_synthesis_point(rng):
    z, k = np.array([40.0, 1.0, -2.0]), np.pi / 10
    far = synthetic_far(z, k, rng.normal(size=6) + 1j * rng.normal(size=6))
    assert abs(R.location_indicator(far, z, k, BASIS) - 1) <= 1e-8
    assert R.location_indicator(far, z + [0.5, 0, 0], k, BASIS) < 1


@given(st.integers(0, 2**32 - 1), st.lists(st.floats(-100, 100), min_size=3, max_size=3))
def test_indicator_bound(seed, zt):
    if np.linalg.norm(zt) < 1e-3:
        return
    far = random_field(np.random.default_rng(seed), lebedev_grid(26))
    assert R.location_indicator(far, zt, 0.9) <= 1 + 1e-6


def test_indicator_bound_with_aperture(rng):
    far = random_field(rng)
    ap = cap_mask(GRID, [1, 0, 0], np.pi / 4)
    pts = rng.uniform(-50, 50, size=(200, 3))
    assert R.indicator_values(far, pts, 1.3, BASIS, ap).max() <= 1 + 1e-6


def test_indicator_errors():
    zero = TangentialFieldOnSphere(GRID, np.zeros((110, 3)))
    with pytest.raises(R.ZeroNormError):
        R.location_indicator(zero, [1, 0, 0], 1.0)
    far = synthetic_far(np.array([5.0, 0, 0]), 1.0, [1, 0, 0, 0, 0, 0])
    with pytest.raises(ValueError):
        R.location_indicator(far, [0, 0, 0], 1.0)
    with pytest.raises(ValueError):
        R.indicator_values(far, [[1, 0, 0]], 1.0, aperture=np.zeros(110, bool))


def test_locate_exact_grid_point(rng):
    k = np.pi / 10
    grid = R.SamplingGrid((40, 0, 0), 0.5, (9, 9, 9))
    z = grid.points()[9 * 9 * 3 + 9 * 5 + 2]
    far = synthetic_far(z, k, rng.normal(size=6) + 1j * rng.normal(size=6))
    res = R.locate(far, k, grid, refine=False)
    assert np.array_equal(res.position, z)
    assert not res.tied and not res.on_boundary
    assert res.values.shape == (9, 9, 9)
    refined = R.locate(far, k, grid, refine=True)
    assert np.linalg.norm(refined.position - z) < 1e-4
    assert refined.value >= res.value


def test_locate_flags_boundary(rng):
    k = np.pi / 10
    far = synthetic_far(np.array([44.0, 0, 0]), k, [1, 0.5, 0, 0, 0.2j, 0])
    res = R.locate(far, k, R.SamplingGrid((40, 0, 0), 0.5, (5, 5, 5)), refine=False)
    assert res.on_boundary
    assert res.position[0] == pytest.approx(41.0)


def test_locate_reports_ties():
    # a field with no content orthogonal to the basis is invariant: use the constant phase pattern at k->0 limit
    far = synthetic_far(np.array([0, 0, 30.0]), 1e-9, [1, 0, 0, 0, 0, 0])
    res = R.locate(far, 1e-9, R.SamplingGrid((0, 0, 30.0), 0.5, (3, 3, 3)), refine=True)
    assert res.tied and len(res.ties) == 27
    assert np.array_equal(res.position, res.coarse_position)


def test_low_frequency_warning(rng):
    far = synthetic_far(np.array([40.0, 0, 0]), 2.0, [1, 0, 0, 0, 0, 0])
    with pytest.warns(R.LowFrequencyWarning):
        R.locate(far, 2.0, R.SamplingGrid((40, 0, 0), 0.5, (3, 3, 3)), shape_diameter=2.0)


def test_sampling_grid():
    g = R.SamplingGrid((1, 2, 3), (0.5, 1.0, 2.0), (3, 1, 5))
    assert len(g.points()) == 15
    assert np.allclose(g.lower(), [0.5, 2, -1]) and np.allclose(g.upper(), [1.5, 2, 7])
    assert g.contains([1, 2, 3]) and not g.contains([2, 2, 3])
    with pytest.raises(ValueError):
        R.SamplingGrid((0, 0, 0), 0.0)


@pytest.fixture(scope="module")
def desk_measurement():
    k, z = np.pi / 10, np.array([40.0, 0, 0])
    pl = place(CUBE, z, 5.0, 4)
    return k, z, F.simulate_measurement(pl, k, F.SourceConfig(positions=((0, 0, 0),)), F.aperture_receivers(), GRID)


def test_locate_simulated_cube(desk_measurement):
    k, z, m = desk_measurement
    grid = R.SamplingGrid((40.3, -0.2, 0.1), 0.5, (9, 9, 9))
    coarse = R.locate(m.far, k, grid, refine=False)
    assert np.all(np.abs(coarse.position - z) <= 0.5 + 1e-12)
    assert R.locate(m.far, k, grid).error(z) <= 0.5


def test_location_is_scale_invariant(desk_measurement):
    k, z, m = desk_measurement
    grid = R.SamplingGrid((40.3, -0.2, 0.1), 0.5, (5, 5, 5))
    a = R.locate(m.far, k, grid, refine=False)
    b = R.locate(m.far.scaled(3.7e-5 * np.exp(2.1j)), k, grid, refine=False)
    assert np.array_equal(a.position, b.position)
    assert np.allclose(a.values, b.values, rtol=1e-12)


def test_aperture_degrades_location_on_average():
    k = np.pi / 10
    rng = np.random.default_rng(7)
    c = place(CUBE, (0, 0, 0), 5.0, 2).contrast
    s = F.assemble(c, k)
    halves = [None, np.pi / 2, np.pi / 3, np.pi / 6]
    errs = np.zeros((10, len(halves)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for t in range(10):
            v = rng.normal(size=3)
            v /= np.linalg.norm(v)
            z = 40 * v
            m = F.simulate_measurement(place(CUBE, z, contrast=c), k, F.SourceConfig(positions=((0, 0, 0),)),
                                       F.aperture_receivers(3), GRID, system=s)
            grid = R.SamplingGrid(tuple(z + rng.uniform(-0.5, 0.5, 3)), 0.5, (9, 9, 9))
            for j, half in enumerate(halves):
                ap = None if half is None else cap_mask(GRID, -v, half)
                errs[t, j] = R.locate(m.far, k, grid, aperture=ap).error(z)
    mean = errs.mean(axis=0)
    assert np.all(np.diff(mean) >= 0)


# -- shape matching ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def three_shapes():
    shapes = [preset("D1"), preset("D2"), preset("D3")]
    k, z = np.pi, np.array([40.0, 0, 0])
    d = D.build_dictionary(shapes, [k], [(1.0, 0, 0)], contrast=D.ContrastSettings(5.0, 2, 0.0), grid=GRID,
                           receivers=F.aperture_receivers(), reference_distance=40.0)
    return shapes, k, z, d


def test_far_self_match_and_orthogonal(three_shapes):
    _, k, z, d = three_shapes
    entry = next(iter(d.entries.values()))
    meas = TangentialFieldOnSphere(GRID, R.translated_far(entry, z, k))
    assert R.shape_indicator_far(meas, entry, z) == pytest.approx(1.0, abs=1e-12)
    # x^ x conj(t) is tangential and pointwise orthogonal to t
    t = R.translated_far(entry, z, k)
    meas = TangentialFieldOnSphere(GRID, np.cross(GRID.nodes, np.conj(t)))
    assert R.shape_indicator_far(meas, entry, z) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(R.ZeroNormError):
        R.shape_indicator_far(TangentialFieldOnSphere(GRID, np.zeros((110, 3))), entry, z)


def test_near_self_match_and_scaling(three_shapes):
    _, k, z, d = three_shapes
    entry = next(iter(d.entries.values()))
    pos, w = F.aperture_receivers()
    meas = F.ApertureField(pos, R.translated_near(entry, z, k), k, w)
    assert R.shape_indicator_near(meas, entry, z, d) == pytest.approx(1.0, abs=1e-12)
    scaled = F.ApertureField(pos, meas.samples * (2.5 - 7j), k, w)
    assert abs(R.shape_indicator_near(scaled, entry, z, d) - R.shape_indicator_near(meas, entry, z, d)) <= 1e-12


def test_near_layout_checks(three_shapes):
    _, k, z, d = three_shapes
    entry = next(iter(d.entries.values()))
    pos, w = F.aperture_receivers(5)
    meas = F.ApertureField(pos, np.ones((25, 3)), k, w)
    with pytest.raises(R.LayoutMismatchError):
        R.shape_indicator_near(meas, entry, z, d)
    pos, w = F.aperture_receivers()
    meas = F.ApertureField(pos, np.ones((121, 3)), k, w)
    with pytest.raises(R.LayoutMismatchError, match="reference"):
        R.shape_indicator_near(meas, entry, z + [3, 0, 0], d)


@pytest.mark.parametrize("mode", ["far", "near"])
def test_diagonal_dominance(three_shapes, mode):
    shapes, k, z, d = three_shapes
    src = F.SourceConfig(positions=((0, 0, 0),))
    entries = [D.nearest_direction_entry(d, s.id, k, z)[0] for s in shapes]
    # pairwise linear independence of the entries
    for i in range(3):
        for j in range(i + 1, 3):
            a, b = entries[i].far.samples, entries[j].far.samples
            assert R._correlation(a, b, GRID.weights) < 1 - 1e-6
    raw = []
    for s in shapes:
        m = F.simulate_measurement(place(s, z, 5.0, 2), k, src, F.aperture_receivers(), GRID)
        meas = m.far if mode == "far" else m.near
        ident, row, ties, gaps = R.identify(meas, d, z, k, mode=mode)
        assert ident == s.id and ties == [s.id]
        assert gaps == {sid: 0.0 for sid in row}
        raw.append([row[c.id] for c in shapes])
    table = R.MatchTable([s.id for s in shapes], [s.id for s in shapes], raw)
    assert all(table.correct())
    assert np.all(table.raw <= 1) and np.all(table.raw >= 0)
    assert np.all(table.normalized.max(axis=1) == 1.0)


def test_identify_scale_invariance(three_shapes):
    shapes, k, z, d = three_shapes
    m = F.simulate_measurement(place(shapes[1], z, 5.0, 2), k, F.SourceConfig(positions=((0, 0, 0),)),
                               F.aperture_receivers(), GRID)
    a = R.identify(m.far, d, z, k)
    b = R.identify(m.far.scaled(-0.01j), d, z, k)
    assert a[0] == b[0]
    assert all(abs(a[1][s] - b[1][s]) < 1e-12 for s in a[1])


def test_one_shape_dictionary():
    k, z = np.pi, np.array([40.0, 0, 0])
    d = D.build_dictionary([CUBE], [k], [(1.0, 0, 0)], contrast=D.ContrastSettings(5.0, 2, 0.0), grid=GRID)
    m = F.simulate_measurement(place(CUBE, z, 5.0, 2), k, F.SourceConfig(positions=((0, 0, 0),)),
                               F.aperture_receivers(3), GRID)
    ident, row, _, _ = R.identify(m.far, d, z, k)
    assert ident == "cube"
    table = R.MatchTable(["cube"], ["cube"], [[row["cube"]]])
    assert table.normalized.tolist() == [[1.0]]


def test_duplicate_shape_is_a_tie():
    k, z = np.pi, np.array([40.0, 0, 0])
    twin = build_shape("twin", CUBE.cubes)
    d = D.build_dictionary([CUBE, twin], [k], [(1.0, 0, 0)], contrast=D.ContrastSettings(5.0, 2, 0.0), grid=GRID)
    m = F.simulate_measurement(place(CUBE, z, 5.0, 2), k, F.SourceConfig(positions=((0, 0, 0),)),
                               F.aperture_receivers(3), GRID)
    ident, row, ties, _ = R.identify(m.far, d, z, k)
    assert ident is None and ties == ["cube", "twin"]
    table = R.MatchTable(["cube"], ["cube", "twin"], [[row["cube"], row["twin"]]])
    assert table.identified() == [None] and table.ties() == {"cube": ["cube", "twin"]}
    assert "TIE" in table.to_csv()


def test_identify_with_cache(three_shapes):
    shapes, k, z, d = three_shapes
    cache = D.EntryCache(shapes, GRID, D.ContrastSettings(5.0, 2, 0.0))
    m = F.simulate_measurement(place(shapes[2], z + [0, 1, 0], 5.0, 2), k, F.SourceConfig(positions=((0, 0, 0),)),
                               F.aperture_receivers(), GRID)
    zl = z + [0, 1, 0]
    for mode in ("far", "near"):
        meas = m.far if mode == "far" else m.near
        ident, row, _, gaps = R.identify(meas, None, zl, k, mode=mode, cache=cache)
        assert ident == "D3"
        assert row["D3"] > 0.99  # dipole vs plane-wave asymptotics at |z| = 40


def test_match_table_csv():
    t = R.MatchTable(["A", "B"], ["A", "B"], [[0.9, 0.3], [0.2, 0.8]], {"seed": 5})
    text = t.to_csv()
    assert "# seed: 5" in text and "# table: normalized" in text
    assert "A,1.0000,0.3333,A" in text
    assert t.margins() == pytest.approx({"A": 1 - 1 / 3, "B": 0.75})
    with pytest.raises(ValueError):
        R.MatchTable(["A"], ["A", "B"], [[1.0]])


# -- noise --------------------------------------------------------------------------------


def test_noise_zero_is_identity(rng):
    x = rng.normal(size=(20, 3)) + 0j
    assert np.array_equal(R.add_noise(x, 0.0, rng), x)


def test_noise_bound_and_determinism(rng):
    x = rng.normal(size=(500, 3)) + 1j * rng.normal(size=(500, 3))
    peak = np.linalg.norm(x, axis=1).max()
    spec = R.NoiseSpec(0.05, seed=11)
    a = R.add_noise(x, 0.05, spec.rng(1, 2))
    b = R.add_noise(x, 0.05, spec.rng(1, 2))
    c = R.add_noise(x, 0.05, spec.rng(1, 3))
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert np.abs(a - x).max() <= 0.05 * peak * (1 + 1e-12)
    with pytest.raises(ValueError):
        R.NoiseSpec(-0.1)


@pytest.mark.parametrize("n", [1000, 100000])
def test_noise_is_zero_mean(n):
    x = np.ones((n, 3), complex)
    delta = 0.1
    pert = R.add_noise(x, delta, R.NoiseSpec(delta, 3).rng(0)) - x
    peak = np.sqrt(3)
    assert abs(pert.mean()) <= 3 * delta * peak / np.sqrt(3 * n)


def test_noisy_far_is_tangential(rng):
    far = random_field(rng)
    noisy = R.noisy_far(far, 0.1, rng)
    assert np.abs(np.sum(noisy.samples * GRID.nodes, axis=1)).max() < 1e-12
