import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from blowup_lab import profile
from blowup_lab.grids import (
    FourierGrid3,
    RadialGrid,
    VectorField,
    leray_project,
    lgl_nodes,
    poisson_sector,
    project_box_to_radial,
    read_snapshot,
    real_sph_harm,
    sobolev_inner,
    transfer_radial_to_box,
    write_snapshot,
)


def test_lgl_quadrature_exact_for_polynomials():
    x, w, _ = lgl_nodes(12)
    for deg in range(0, 2 * 12 - 3, 2):
        assert np.sum(w * x**deg) == pytest.approx(2.0 / (deg + 1), rel=1e-13)


def test_radial_grid_has_no_origin_and_ends_at_infinity(grid128):
    assert np.all(grid128.r[grid128.finite] > 0)
    assert np.isinf(grid128.r[-1])
    assert np.all(np.diff(grid128.r[grid128.finite]) > 0)


def test_radial_grid_rejects_bad_arguments():
    with pytest.raises(ValueError):
        RadialGrid(4)
    with pytest.raises(ValueError):
        RadialGrid(32, scale=0.0)


@pytest.mark.parametrize(
    "func, exact",
    [
        (lambda r: np.exp(-r * r), np.sqrt(np.pi) / 4.0),
        (lambda r: 1.0 / (1.0 + r * r) ** 3, np.pi / 16.0),
    ],
)
def test_integrate_known_integrals(grid128, func, exact):
    assert grid128.integrate(grid128.sample(func)) == pytest.approx(exact, rel=1e-10)


def test_laplacian_of_gaussian(grid128):
    g = grid128
    f = g.sample(lambda r: np.exp(-r * r))
    exact = g.sample(lambda r: (4 * r * r - 6) * np.exp(-r * r))
    assert np.max(np.abs(g.laplacian(0) @ f - exact)) < 1e-9


def test_laplacian_sector_one(grid128):
    # lap(r e^{-r^2} Y_1m) radial part: (4r^3 - 10 r) e^{-r^2}
    g = grid128
    f = g.sample(lambda r: r * np.exp(-r * r))
    exact = g.sample(lambda r: (4 * r**3 - 10 * r) * np.exp(-r * r))
    assert np.max(np.abs(g.laplacian(1) @ f - exact)) < 1e-9


def test_gradient_potential_of_profile(grid128):
    g = grid128
    v = g.gradient_potential_matrix @ g.sample(profile.q_radial)
    exact = g.sample(profile.drift_radial)
    assert np.max(np.abs(v - exact)[g.finite]) < 1e-10


def test_poisson_sector_two_matches_closed_form(grid128):
    # lap(r^2 e^{-r^2}) in sector 2 has the radial part (4 r^4 - 14 r^2) e^{-r^2}
    g = grid128
    f = g.sample(lambda r: (4 * r**4 - 14 * r * r) * np.exp(-r * r))
    u = poisson_sector(g, f, 2)
    assert np.max(np.abs(u - g.sample(lambda r: r * r * np.exp(-r * r)))) < 1e-9


def test_sobolev_gram_symmetric_positive(grid128):
    for k in (0, 1, 2, 3):
        gram = grid128.sobolev_gram(k, 0)
        f = grid128.sample(lambda r: np.exp(-r * r / 3))
        assert f @ gram @ f > 0
    with pytest.raises(ValueError):
        sobolev_inner(f, f, -1, grid128)
    with pytest.raises(ValueError):
        sobolev_inner(f, f, 1)


def test_sobolev_h1_of_gaussian(grid128):
    # ||f||^2 + ||grad f||^2 for f = e^{-r^2/2}: (pi^{3/2}) (1 + 3/2), per unit solid angle / (4 pi)
    g = grid128
    f = g.sample(lambda r: np.exp(-r * r / 2))
    val = 4 * np.pi * sobolev_inner(f, f, 1, g)
    assert val == pytest.approx(np.pi**1.5 * 2.5, rel=1e-10)


@given(st.floats(0.1, 30.0))
def test_interpolation_reproduces_smooth_function(r0):
    g = RadialGrid(96)
    f = g.sample(profile.q_radial)
    assert g.interpolate(f, np.array([r0]))[0] == pytest.approx(profile.q_radial(r0), rel=1e-9)


# periodic box


def test_fourier_gradient_and_inverse_laplacian():
    g = FourierGrid3(16, np.pi)
    x, y, z = g.coords()
    f = np.sin(x) * np.cos(2 * y) * np.sin(3 * z)
    gr = g.gradient(f)
    assert np.max(np.abs(gr[0] - np.cos(x) * np.cos(2 * y) * np.sin(3 * z))) < 1e-12
    gil = g.grad_inv_laplacian(f)
    assert np.max(np.abs(gil[0] + np.cos(x) * np.cos(2 * y) * np.sin(3 * z) / 14.0)) < 1e-12


@given(st.integers(0, 2**31 - 1))
def test_leray_projection_is_divergence_free_and_idempotent(seed):
    g = FourierGrid3(8, 3.0)
    u = np.random.default_rng(seed).normal(size=(3,) + g.shape)
    p = leray_project(VectorField(g, u))
    assert p.max_divergence() < 1e-10
    pp = leray_project(p)
    assert np.max(np.abs(pp.values - p.values)) < 1e-12


def test_leray_project_needs_vector_field():
    with pytest.raises(TypeError):
        leray_project(np.zeros((3, 4, 4, 4)))


@given(st.integers(0, 2**31 - 1), st.integers(0, 3))
def test_box_parseval(seed, k):
    g = FourierGrid3(8, 2.0)
    rng = np.random.default_rng(seed)
    f, h = rng.normal(size=g.shape), rng.normal(size=g.shape)
    if k == 0:
        assert g.sobolev_inner(f, f, 0) == pytest.approx(g.integrate(f * f), rel=1e-12)
    assert g.sobolev_inner(f, h, k) == pytest.approx(g.sobolev_inner(h, f, k), rel=1e-12, abs=1e-12)


def test_dilation_matrix_of_gaussian():
    g = FourierGrid3(96, 8.0)
    y = g.y1
    f = np.exp(-y * y)
    m = g.dilation_matrix(0.5, 0.0)
    assert np.max(np.abs(m @ f - np.exp(-0.25 * y * y))) < 1e-12
    # heat flow for time s: e^{-y^2} -> (1+4s)^{-1/2} e^{-y^2/(1+4s)} in one dimension
    m = g.dilation_matrix(1.0, 0.25)
    assert np.max(np.abs(m @ f - np.exp(-y * y / 2) / np.sqrt(2))) < 1e-12


def test_box_grid_rejects_odd_size():
    with pytest.raises(ValueError):
        FourierGrid3(7, 1.0)


def test_spherical_harmonics_orthonormal():
    ct, wt = np.polynomial.legendre.leggauss(12)
    ph = 2 * np.pi * np.arange(24) / 24
    th, pp = np.meshgrid(np.arccos(ct), ph, indexing="ij")
    w = wt[:, None] * (2 * np.pi / 24)
    modes = [(l, m) for l in range(3) for m in range(-l, l + 1)]
    for a in modes:
        for b in modes:
            v = np.sum(w * real_sph_harm(*a, th, pp) * real_sph_harm(*b, th, pp))
            assert v == pytest.approx(1.0 if a == b else 0.0, abs=1e-12)
    with pytest.raises(ValueError):
        real_sph_harm(1, 2, th, pp)


def test_transfer_round_trip():
    rg = RadialGrid(64)
    g3 = FourierGrid3(48, 8.0)
    f = rg.sample(lambda r: r * np.exp(-r * r / 2))
    box = transfer_radial_to_box(rg, f, 1, 0, g3)
    x, y, z = g3.coords()
    assert np.max(np.abs(box - np.sqrt(3 / (4 * np.pi)) * z * np.exp(-(x * x + y * y + z * z) / 2))) < 1e-10
    radii = np.array([0.5, 1.0, 2.0])
    back = project_box_to_radial(box, g3, 1, 0, radii)
    assert np.max(np.abs(back - radii * np.exp(-radii**2 / 2))) < 1e-3


@given(st.lists(st.integers(1, 5), min_size=1, max_size=3), st.integers(0, 1000))
def test_snapshot_round_trip(tmp_path_factory, dims, seed):
    path = tmp_path_factory.mktemp("snap") / "s.bin"
    data = np.random.default_rng(seed).normal(size=dims)
    for grid in (RadialGrid(16, 3.0), FourierGrid3(4, 2.5)):
        write_snapshot(path, grid, data)
        kind, params, back = read_snapshot(path)
        assert np.array_equal(back, data)
        assert params[0] in (3.0, 2.5)


def test_snapshot_rejects_garbage(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"nope")
    with pytest.raises(ValueError):
        read_snapshot(p)
    with pytest.raises(TypeError):
        write_snapshot(p, object(), np.zeros(2))


def test_quadrature_of_gaussian_moment():
    g = RadialGrid(64)
    assert g.integrate(g.sample(lambda r: np.exp(-r * r / 4))) == pytest.approx(2 * np.sqrt(np.pi), rel=1e-10)


def test_derivative_of_r_squared_on_ball():
    # r^2 grows, so it is only representable on a grid that stops at a finite radius
    g = RadialGrid(64, 6.0, 10.0)
    assert np.max(np.abs(g.D(1) @ g.r**2 - 2 * g.r)) < 1e-8


def test_fourier_round_trip_and_sine_derivative():
    grid = FourierGrid3(16, 3.0)
    f = np.random.default_rng(0).standard_normal(grid.shape)
    assert np.max(np.abs(grid.ifft(grid.fft(f)) - f)) < 1e-13
    y = grid.coords()[0]
    d = grid.gradient(np.sin(np.pi * y / 3.0))
    assert np.max(np.abs(d[0] - np.pi / 3 * np.cos(np.pi * y / 3.0))) < 1e-12
    assert np.max(np.abs(d[1])) < 1e-12


def test_poisson_sector_zero_against_quadrature():
    from scipy.integrate import quad

    g = RadialGrid(128)
    u = poisson_sector(g, g.sample(lambda r: np.exp(-r * r / 4)), 0)

    def ref(r):
        inner = lambda t: quad(lambda s: s * s * np.exp(-s * s / 4), 0, t)[0] / t**2
        return -quad(inner, r, np.inf, limit=200)[0]

    for i in range(0, 40, 8):
        assert u[i] - u[-1] == pytest.approx(ref(g.r[i]), abs=1e-10)
    assert np.all(poisson_sector(g, np.zeros(g.n), 1) == 0.0)


def test_l2_norm_of_gaussian():
    from blowup_lab.grids import sobolev_inner

    g = RadialGrid(128)
    f = g.sample(lambda r: np.exp(-r * r / 4))
    assert 4 * np.pi * sobolev_inner(f, f, 0, g) == pytest.approx((2 * np.pi) ** 1.5, rel=1e-10)


def test_nonlinear_term_bilinear_bound():
    # |div(rho grad inv_lap rho)|_{H^2} <= C |rho|_{H^3}^2 spot-checked on random smooth fields
    grid = FourierGrid3(24, 4.0)
    rng = np.random.default_rng(0)
    k2 = sum(k * k for k in grid.wavevector())

    def hk(f, k):
        return np.sqrt(grid.sobolev_inner(f, f, k))

    ratios = []
    for _ in range(100):
        w = rng.uniform(0.5, 3.0)
        rho = grid.ifft(grid.fft(rng.standard_normal(grid.shape)) * np.exp(-k2 / (2 * w * w)))
        n = grid.divergence(rho * grid.grad_inv_laplacian(rho))
        n2 = grid.divergence(2 * rho * grid.grad_inv_laplacian(2 * rho))
        assert np.allclose(n2, 4 * n, atol=1e-12 * np.max(np.abs(n2)))
        ratios.append(hk(n, 2) / hk(rho, 3) ** 2)
    assert max(ratios) < 1.0
