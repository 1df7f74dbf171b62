import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from blowup_lab import linop, profile
from blowup_lab.grids import FourierGrid3, RadialGrid, ScalarField


def gaussian(s):
    """Radial part of G_s(y) = (4 pi s)^{-3/2} exp(-|y|^2 / (4 s))."""
    return lambda r: (4 * np.pi * s) ** -1.5 * np.exp(-r * r / (4 * s))


@pytest.fixture(scope="module")
def ball():
    return RadialGrid(128, 6.0, 10.0)


def interior_rel(a, b, grid, cap=8.0):
    m = grid.finite & (grid.r < cap)
    return np.max(np.abs(a[m] - b[m])) / np.max(np.abs(b[m]))


@pytest.mark.parametrize(
    "ell, func, lam",
    [(0, lambda r: 1.0 + 0 * r, 1.0), (1, lambda r: r, 1.5), (0, lambda r: r * r - 6.0, 2.0), (2, lambda r: r * r, 2.0)],
)
def test_l0_polynomial_eigenfunctions(ball, ell, func, lam):
    v = func(ball.r)
    assert interior_rel(linop.l0_matrix(ball, ell) @ v, lam * v, ball) < 1e-8


@pytest.mark.parametrize("ell", [0, 1, 2])
def test_weighted_matrix_symmetric(grid128, ell):
    m = linop.weighted_symmetric_matrix(grid128, ell)
    assert np.max(np.abs(m - m.T)) / np.max(np.abs(m)) < 1e-8


def test_oscillator_ladder(grid128):
    ev = np.concatenate([linop.oscillator_ladder(grid128, ell, 3) for ell in range(3)])
    levels = np.unique(np.round(ev, 4))[:4]
    assert np.allclose(levels, [1.0, 1.5, 2.0, 2.5])
    for target in levels:
        assert np.min(np.abs(ev - target)) < 1e-6


def test_scaling_and_translation_modes(grid128):
    op0 = linop.assemble(0, grid128)
    lq = grid128.sample(profile.lambda_q_radial)
    assert np.max(np.abs(op0.L @ lq + lq)) < 1e-8
    op1 = linop.assemble(1, grid128)
    dq = grid128.sample(profile.dq_radial)
    assert np.max(np.abs(op1.L @ dq + 0.5 * dq)) < 1e-8


@pytest.mark.parametrize("ell", [0, 1, 2])
@pytest.mark.parametrize("which", ["L0", "Lprime", "L"])
def test_matrix_agrees_with_finite_differences(grid128, ell, which):
    func = lambda r: r**ell * np.exp(-r * r / 4.0)  # noqa: E731
    op = linop.assemble(ell, grid128)
    radii = np.array([0.4, 1.0, 2.5, 4.0])
    mat = grid128.interpolate(linop.apply(op, which, grid128.sample(func)), radii, (-1) ** ell)
    fd = linop.fd_apply(func, ell, radii, which=which)
    assert np.max(np.abs(mat - fd)) / np.max(np.abs(fd)) < 1e-7


def test_apply_validates(grid128):
    op = linop.assemble(0, grid128)
    with pytest.raises(ValueError):
        linop.apply(op, "nope", np.zeros(grid128.n))
    with pytest.raises(ValueError):
        linop.apply(op, "L", np.zeros(3))
    with pytest.raises(ValueError):
        linop.apply(op, "L", ScalarField(grid128, np.zeros(grid128.n), 1))
    with pytest.raises(ValueError):
        linop.assemble(-1, grid128)


@pytest.mark.parametrize("tau", [0.1, np.log(2.0), 2.0])
def test_radial_semigroup_gaussian(grid128, tau):
    g = grid128
    out = linop.semigroup_L0(g.sample(gaussian(1.0)), tau, grid=g)
    s = 2.0 - np.exp(-tau)
    exact = g.sample(lambda r: np.exp(-tau) * gaussian(s)(np.exp(-tau / 2) * r))
    assert np.max(np.abs(out - exact)) / np.max(np.abs(exact)) < 1e-7


@pytest.mark.parametrize("tau", [0.1, np.log(2.0), 2.0])
def test_box_semigroup_gaussian(tau):
    g = FourierGrid3(64, 12.0)
    rad = g.radius()
    out = linop.semigroup_L0(gaussian(1.0)(rad), tau, grid=g)
    s = 2.0 - np.exp(-tau)
    exact = np.exp(-tau) * gaussian(s)(np.exp(-tau / 2) * rad)
    assert np.max(np.abs(out - exact)) / np.max(exact) < 1e-7


@given(st.floats(0.05, 1.5), st.floats(0.05, 1.5))
def test_semigroup_composition(t1, t2):
    g = RadialGrid(96)
    f = g.sample(lambda r: (1 + r * r) ** -3)
    a = linop.semigroup_L0(linop.semigroup_L0(f, t1, grid=g), t2, grid=g)
    b = linop.semigroup_L0(f, t1 + t2, grid=g)
    assert np.max(np.abs(a - b)) < 1e-8 * np.max(np.abs(f))


def test_semigroup_rejects_negative_time(grid128):
    with pytest.raises(ValueError):
        linop.semigroup_L0(np.zeros(grid128.n), -1.0, grid=grid128)
    with pytest.raises(ValueError):
        linop.semigroup_L0(np.zeros(3), 1.0)


def test_resolvent_matches_direct_solve():
    g = RadialGrid(96)
    f = g.sample(lambda r: np.exp(-r * r / 2))
    keep = slice(0, g.n - 1)
    a = linop.l0_matrix(g, 0)[keep, keep]
    for lam in (0.3, -1.0 + 0.5j):
        u = linop.resolvent_L0(f, lam, grid=g)
        direct = np.linalg.solve(a - lam * np.eye(g.n - 1), f[keep])
        assert np.max(np.abs(u[keep] - direct)) < 1e-7 * np.max(np.abs(direct))


def test_resolvent_domain():
    g = RadialGrid(32)
    f = np.zeros(g.n)
    with pytest.raises(linop.DomainError):
        linop.resolvent_L0(f, 1.0, grid=g)
    with pytest.raises(linop.DomainError):
        linop.resolvent_L0(f, 0.5, grid=g, strict=True)


def test_semigroup_at_zero_time_is_identity():
    g = RadialGrid(64)
    f = g.sample(lambda r: np.exp(-r * r / 3))
    assert np.array_equal(linop.semigroup_L0(f, 0.0, g), f)


def test_constants_on_box():
    grid = FourierGrid3(16, 3.0)
    one = np.ones(grid.shape)
    assert np.max(np.abs(linop.semigroup_L0(one, 0.7, grid) - np.exp(-0.7))) < 1e-13
    assert np.max(np.abs(linop.resolvent_L0(one, 0.0, grid) - 1.0)) < 1e-9
    assert np.max(np.abs(linop.resolvent_L0(one, 0.5, grid) - 2.0)) < 1e-9
