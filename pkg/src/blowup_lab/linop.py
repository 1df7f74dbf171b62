"""The linearized operator L = L0 + L' around Q, sector by sector.

L0 f = -lap f + f + (1/2) y.grad f is the drift-diffusion part and
L' f = -div(f grad inv_lap Q) - div(Q grad inv_lap f) collects the
Q-dependent terms.  On a radial grid every operator acts on the radial part of
f(r) Y_lm and is a dense matrix.  The last node carries a closure row: at
r = infinity the identity row is exact for L0 (constants are eigenfunctions
with eigenvalue 1), for a finite ball it is the Dirichlet row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from . import profile
from .grids import FourierGrid3, RadialGrid, ScalarField, poisson_gradient_matrix


class DomainError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SectorOperator:
    ell: int
    grid: RadialGrid
    k: int
    L0: np.ndarray
    Lprime: np.ndarray
    L: np.ndarray
    gram: np.ndarray
    closure_rows: tuple = field(default=())

    @property
    def parity(self) -> int:
        return (-1) ** self.ell

    @property
    def interior(self) -> np.ndarray:
        """Indices of the unknowns used in eigen solves (closure rows removed)."""
        keep = np.ones(self.grid.n, dtype=bool)
        keep[list(self.closure_rows)] = False
        return np.nonzero(keep)[0]


def l0_matrix(grid: RadialGrid, ell: int) -> np.ndarray:
    p = (-1) ** ell
    m = -grid.laplacian(ell) + np.eye(grid.n) + 0.5 * grid.rD(p)
    m[-1] = 0.0
    m[-1, -1] = 1.0
    return m


def lprime_matrix(grid: RadialGrid, ell: int) -> np.ndarray:
    p = (-1) ** ell
    r = grid.r
    q = grid.sample(profile.q_radial)
    dq = grid.sample(profile.dq_radial)
    drift = grid.sample(profile.drift_radial)
    m = -2.0 * np.diag(q) - drift[:, None] * grid.D(p) - dq[:, None] * poisson_gradient_matrix(grid, ell)
    m[-1] = 0.0
    return m


def assemble(ell: int, grid: RadialGrid, k: int = 2) -> SectorOperator:
    """Dense matrices of L0, L' and L in sector ell together with the H^k Gram matrix."""
    if ell < 0:
        raise ValueError("sector index must be nonnegative")
    l0 = l0_matrix(grid, ell)
    lp = lprime_matrix(grid, ell)
    return SectorOperator(ell, grid, k, l0, lp, l0 + lp, grid.sobolev_gram(k, ell), (grid.n - 1,))


def apply(op: SectorOperator, which: str, f):
    """Matrix-vector product with L0, Lprime or L."""
    mats = {"L0": op.L0, "Lprime": op.Lprime, "L": op.L}
    if which not in mats:
        raise ValueError(f"unknown operator {which!r}")
    if isinstance(f, ScalarField):
        if f.grid is not op.grid or f.ell != op.ell:
            raise ValueError("field does not live on the operator's grid and sector")
        return ScalarField(op.grid, mats[which] @ f.values, op.ell)
    f = np.asarray(f, dtype=float)
    if f.shape != (op.grid.n,):
        raise ValueError("field shape does not match the grid")
    return mats[which] @ f


# ---------------------------------------------------------------------------
# Weighted (harmonic oscillator) form of L0


def oscillator_forms(grid: RadialGrid, ell: int):
    """Stiffness and mass matrices of -lap + r^2/16 + 1/4 on interior nodes.

    This is L0 conjugated by the square root of the Gaussian weight
    e^{-r^2/4}: v = e^{-r^2/8} f.  Both matrices are symmetric by construction.
    """
    p = (-1) ** ell
    keep = slice(0, grid.n - 1)
    w = grid.weights[keep]
    r = grid.r[keep]
    d = grid.D(p)[keep, keep]
    pot = ell * (ell + 1) * grid.inv_r2[keep] + r * r / 16.0 + 0.25
    stiff = d.T @ (w[:, None] * d) + np.diag(w * pot)
    return stiff, np.diag(w)


def weighted_symmetric_matrix(grid: RadialGrid, ell: int):
    """M^{-1/2} K M^{-1/2}: the weighted-conjugated L0, symmetric on interior nodes."""
    stiff, mass = oscillator_forms(grid, ell)
    s = 1.0 / np.sqrt(np.diag(mass))
    return s[:, None] * stiff * s[None, :]


def oscillator_ladder(grid: RadialGrid, ell: int, count: int = 3):
    """Smallest eigenvalues of L0 on the Gaussian-weighted space in sector ell."""
    ev = np.linalg.eigvalsh(weighted_symmetric_matrix(grid, ell))
    return np.sort(ev)[:count]


# ---------------------------------------------------------------------------
# Exact semigroup of L0


def _bessel_kernel(ell, r, rho, lam):
    """4 pi (4 pi lam)^{-3/2} exp(-(r^2+rho^2)/(4 lam)) i_ell(r rho / (2 lam))."""
    x = np.broadcast_to(r * rho / (2.0 * lam), np.broadcast_shapes(np.shape(r), np.shape(rho))).copy()
    big = x > 50.0
    small = ~big
    scaled = np.zeros_like(x)
    xs = np.maximum(x[small], 1e-300)
    scaled[small] = np.sqrt(np.pi / (2.0 * xs)) * special.ive(ell + 0.5, xs)
    if ell == 0:
        scaled[small & (x == 0)] = 1.0
    # e^{-x} i_ell(x) is a terminating sum once e^{-2x} underflows
    xb = x[big]
    acc = np.zeros_like(xb)
    for j in range(ell + 1):
        c = special.factorial(ell + j, exact=True) // (special.factorial(j, exact=True) * special.factorial(ell - j, exact=True))
        acc += (-1) ** j * c / (2.0 * xb) ** j
    scaled[big] = acc / (2.0 * xb)
    gauss = np.exp(-((r - rho) ** 2) / (4.0 * lam))
    return 4.0 * np.pi * (4.0 * np.pi * lam) ** -1.5 * gauss * scaled


_QUAD_POINTS = 96
_WINDOW = 12.0


def radial_semigroup_matrix(grid: RadialGrid, ell: int, tau: float) -> np.ndarray:
    """Matrix of exp(-tau L0) on nodal values of sector ell.

    The heat kernel is integrated on a Gauss-Legendre window of +-12 sqrt(lam)
    around each rescaled target, with the field interpolated spectrally.
    """
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    n = grid.n
    if tau == 0:
        return np.eye(n)
    lam = -np.expm1(-tau)
    shrink = np.exp(-0.5 * tau)
    xg, wg = np.polynomial.legendre.leggauss(_QUAD_POINTS)
    targets = shrink * grid.r[grid.finite]
    half = _WINDOW * np.sqrt(lam)
    lo = np.maximum(targets - half, 0.0)
    hi = targets + half
    rho = 0.5 * (hi - lo)[:, None] * (xg[None, :] + 1.0) + lo[:, None]
    wq = 0.5 * (hi - lo)[:, None] * wg[None, :]
    kern = _bessel_kernel(ell, targets[:, None], rho, lam) * rho**2 * wq
    interp = grid.interpolation_matrix(rho.ravel(), (-1) ** ell).reshape(len(targets), _QUAD_POINTS, n)
    out = np.zeros((n, n))
    out[grid.finite] = np.einsum("tq,tqn->tn", kern, interp, optimize=True)
    if not grid.finite[-1]:
        out[-1, -1] = 1.0
    return np.exp(-tau) * out


def box_semigroup(grid: FourierGrid3, f, tau: float, amplitude_rate: float = 1.0):
    """exp(-tau L0) on the periodic box: heat flow for time 1 - e^{-tau} then dilation.

    ``amplitude_rate`` is 1 for densities and 1/2 for the velocity equation.
    """
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    if tau == 0:
        return np.array(f, dtype=float, copy=True)
    m = grid.dilation_matrix(np.exp(-0.5 * tau), -np.expm1(-tau))
    return np.exp(-amplitude_rate * tau) * grid.apply_separable(m, f)


def semigroup_L0(f, tau: float, grid=None, ell: int = 0):
    """Apply exp(-tau L0) to a radial sector field or a box field."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    if isinstance(f, ScalarField):
        grid, ell, vals = f.grid, f.ell, f.values
    else:
        vals = np.asarray(f, dtype=float)
    if isinstance(grid, FourierGrid3):
        out = box_semigroup(grid, vals, tau)
    elif isinstance(grid, RadialGrid):
        out = radial_semigroup_matrix(grid, ell, tau) @ vals
    else:
        raise ValueError("grid required for raw arrays")
    return ScalarField(grid, out, ell) if isinstance(f, ScalarField) else out


def _panels(t_cut):
    """Panel edges in tau: graded near 0 where the heat flow acts fastest."""
    edges = [0.0, 0.03125, 0.0625, 0.125, 0.25, 0.5, 1.0, 2.0]
    while edges[-1] < t_cut:
        edges.append(edges[-1] + 2.0)
    return np.array(edges)


def resolvent_L0(f, lam: complex, grid=None, ell: int = 0, tol: float = 1e-10, strict: bool = False):
    """(L0 - lam)^{-1} f as the Laplace integral of the exact semigroup.

    The semigroup contracts sup norms at rate e^{-tau}, so the integral over
    [T, inf) is bounded by e^{-(1 - Re lam) T} / (1 - Re lam); T is chosen to
    push that below ``tol``.  ``strict`` enforces Re lam < 1/4 instead of < 1.
    """
    bound = 0.25 if strict else 1.0
    if np.real(lam) >= bound:
        raise DomainError(f"Re lambda must be below {bound}, got {np.real(lam)}")
    as_field = isinstance(f, ScalarField)
    if as_field:
        grid, ell, vals = f.grid, f.ell, f.values
    else:
        vals = np.asarray(f, dtype=float)
    if grid is None:
        raise ValueError("grid required for raw arrays")
    rate = 1.0 - np.real(lam)
    t_cut = np.log(1.0 / (tol * rate)) / rate
    xg, wg = np.polynomial.legendre.leggauss(16)
    edges = _panels(t_cut)
    total = np.zeros(vals.shape, dtype=complex)
    for a, b in zip(edges[:-1], edges[1:]):
        for xi, wi in zip(xg, wg):
            t = 0.5 * (b - a) * (xi + 1.0) + a
            weight = 0.5 * (b - a) * wi * np.exp(lam * t)
            total += weight * semigroup_L0(vals, t, grid=grid, ell=ell)
    if np.isrealobj(lam) or np.imag(lam) == 0:
        total = total.real
    return ScalarField(grid, total, ell) if as_field else total


# ---------------------------------------------------------------------------
# Independent pointwise evaluation of L (finite differences + quadrature)


def _grad_inv_lap(func, ell, r):
    """d/dr of the decaying sector-ell solution of lap u = func, by adaptive quadrature."""
    if ell == 0:
        inner = integrate.quad(lambda s: func(s) * s * s, 0.0, r, epsabs=1e-14, epsrel=1e-13, limit=200)[0]
        return inner / (r * r)
    inner = integrate.quad(lambda s: s ** (ell + 2) * func(s), 0.0, r, epsabs=1e-14, epsrel=1e-13, limit=200)[0]
    outer = integrate.quad(lambda s: s ** (1 - ell) * func(s), r, np.inf, epsabs=1e-14, epsrel=1e-13, limit=200)[0]
    return -(-(ell + 1) * r ** (-ell - 2) * inner + ell * r ** (ell - 1) * outer) / (2 * ell + 1)


def fd_apply(func, ell: int, radii, h: float = 1e-3, which: str = "L"):
    """Evaluate L0, Lprime or L on a closed-form radial function with 4th-order differences."""
    out = []
    for r in np.atleast_1d(radii):
        f = [func(r + j * h) for j in (-2, -1, 0, 1, 2)]
        d1 = (f[0] - 8 * f[1] + 8 * f[3] - f[4]) / (12 * h)
        d2 = (-f[0] + 16 * f[1] - 30 * f[2] + 16 * f[3] - f[4]) / (12 * h * h)
        lap = d2 + 2.0 * d1 / r - ell * (ell + 1) * f[2] / (r * r)
        l0 = -lap + f[2] + 0.5 * r * d1
        lp = (
            -2.0 * profile.q_radial(r) * f[2]
            - profile.drift_radial(r) * d1
            - profile.dq_radial(r) * _grad_inv_lap(func, ell, r)
        )
        out.append({"L0": l0, "Lprime": lp, "L": l0 + lp}[which])
    return np.array(out)
