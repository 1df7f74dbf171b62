"""Discretizations of R^3: a mapped radial collocation grid and a periodic Fourier box.

RadialGrid maps Legendre-Gauss-Lobatto nodes x on [-x_max, x_max] with the odd
map r = L x / (1 - x^2) and keeps the half with x > 0; fields of sector ell have
parity (-1)^ell, so regularity at r = 0 is built into the folded operators and
no node sits at the origin.  With ``r_max = inf`` the last node is r = infinity,
where every decaying field vanishes; algebraic tails (Q ~ 4/r^2) are smooth in x.
A finite ``r_max`` gives a ball, which is what the polynomial checks need.

FourierGrid3 is the box [-B, B)^3 with n points per side."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.ndimage import map_coordinates


class NumericalFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Legendre-Gauss-Lobatto machinery


def lgl_nodes(n: int):
    """Nodes, weights and P_{n-1}(x_j) for the n-point LGL rule on [-1, 1]."""
    if n < 3:
        raise ValueError("need at least 3 LGL nodes")
    deg = n - 1
    inner, _ = special.roots_jacobi(deg - 1, 1.0, 1.0)
    x = np.concatenate(([-1.0], np.sort(inner), [1.0]))
    p = special.eval_legendre(deg, x)
    w = 2.0 / (deg * (deg + 1) * p * p)
    return x, w, p


def lgl_diff(x, p):
    """First-derivative matrix on LGL nodes (negative-sum diagonal)."""
    deg = len(x) - 1
    dx = x[:, None] - x[None, :]
    np.fill_diagonal(dx, 1.0)
    d = (p[:, None] / p[None, :]) / dx
    np.fill_diagonal(d, 0.0)
    np.fill_diagonal(d, -d.sum(axis=1))
    # the exact corner values are better than the row sums
    d[0, 0] = -deg * (deg + 1) / 4.0
    d[-1, -1] = deg * (deg + 1) / 4.0
    return d


def second_diff(x, d):
    """Second-derivative matrix from the first (Welfert's recursion); avoids forming d @ d."""
    dx = x[:, None] - x[None, :]
    np.fill_diagonal(dx, 1.0)
    d2 = 2.0 * d * (np.diag(d)[:, None] - 1.0 / dx)
    np.fill_diagonal(d2, 0.0)
    np.fill_diagonal(d2, -d2.sum(axis=1))
    return d2


def barycentric_matrix(x, bary_w, targets):
    """Interpolation matrix from nodes x to targets (all in the same variable)."""
    targets = np.atleast_1d(np.asarray(targets, dtype=float))
    diff = targets[:, None] - x[None, :]
    exact = diff == 0.0
    diff[exact] = 1.0
    c = bary_w[None, :] / diff
    m = c / c.sum(axis=1, keepdims=True)
    rows = np.nonzero(exact.any(axis=1))[0]
    if rows.size:
        m[rows] = exact[rows].astype(float)
    return m


# ---------------------------------------------------------------------------
# Radial grid


class RadialGrid:
    """Parity-folded collocation grid for radial parts of functions on R^3.

    The full grid is 2n Legendre-Gauss-Lobatto points x on [-x_max, x_max]
    mapped by the odd function r = L x / (1 - x^2).  A field in sector ell has
    parity (-1)^ell in x, so only the n nodes with x > 0 are stored and the
    differentiation matrices fold in the mirror half.  No node sits at r = 0.

    With ``r_max = inf`` the last node is r = infinity.  Attributes of interest:
    ``r``, ``weights`` (quadrature for the integral of f r^2 dr) and the
    parity-indexed operators ``D(p)``, ``D2(p)``, ``rD(p)``.
    """

    def __init__(self, n: int, scale: float = 6.0, r_max: float = np.inf):
        if n < 8:
            raise ValueError(f"radial grid needs at least 8 nodes, got {n}")
        if scale <= 0:
            raise ValueError("map scale must be positive")
        self.n = int(n)
        self.scale = float(scale)
        self.r_max = float(r_max)
        L = self.scale
        self.x_max = 1.0 if np.isinf(r_max) else float(self._x_of_r(r_max))

        xi, wxi, p = lgl_nodes(2 * self.n)
        dxi = lgl_diff(xi, p)
        d2xi = second_diff(xi, dxi)
        xm = self.x_max
        self._xi_full = xi
        self._bary = 1.0 / p
        pos = slice(self.n, 2 * self.n)
        neg = slice(self.n - 1, None, -1)  # mirror image of pos, same order
        self._d_full = dxi / xm
        self._d2_full = d2xi / xm**2
        self._pos, self._neg = pos, neg

        x = xm * xi[pos]
        self.x = x
        one_minus = 1.0 - x * x
        self.finite = one_minus > 0
        safe = np.where(self.finite, one_minus, 1.0)
        self.r = np.where(self.finite, L * x / safe, np.inf)
        if not np.isinf(r_max):
            self.r[-1] = r_max
        # x'(r) and x''(r) from r = L x / (1 - x^2)
        dr_dx = L * (1.0 + x * x) / safe**2
        self._dx_dr = np.where(self.finite, safe**2 / (L * (1.0 + x * x)), 0.0)
        # d/dr (dx/dr) = dx/dr * d/dx (dx/dr)
        g = safe**2 / (L * (1.0 + x * x))
        dg_dx = (-4.0 * x * safe * (1.0 + x * x) - 2.0 * x * safe**2) / (L * (1.0 + x * x) ** 2)
        self._d2x_dr2 = np.where(self.finite, g * dg_dx, 0.0)
        self._r_dx_dr = np.where(self.finite, x * safe / (1.0 + x * x), 0.0)

        self.inv_r = np.where(self.finite, safe / (L * x), 0.0)
        self.inv_r2 = self.inv_r**2
        w = wxi[pos] * xm * np.where(self.finite, dr_dx * np.where(self.finite, self.r, 0.0) ** 2, 0.0)
        self.weights = w
        self._cache = {}

    @staticmethod
    def _x_of_r_static(r, L):
        r = np.asarray(r, dtype=float)
        with np.errstate(invalid="ignore", over="ignore"):
            x = np.where(np.isinf(r), np.sign(r), 2.0 * r / (L + np.sqrt(L * L + 4.0 * r * r)))
        return x

    def _x_of_r(self, r):
        return self._x_of_r_static(r, self.scale)

    # -- parity folding -----------------------------------------------------

    def _fold(self, full, parity):
        return full[self._pos, self._pos] + parity * full[self._pos, self._neg]

    def _cached(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    def D(self, parity: int = 1):
        """d/dr acting on nodal values of a field with the given parity."""
        return self._cached(("D", parity), lambda: self._dx_dr[:, None] * self._fold(self._d_full, parity))

    def D2(self, parity: int = 1):
        def build():
            d2x = self._fold(self._d2_full, parity)
            dx = self._fold(self._d_full, parity)
            return (self._dx_dr**2)[:, None] * d2x + self._d2x_dr2[:, None] * dx

        return self._cached(("D2", parity), build)

    def rD(self, parity: int = 1):
        """r d/dr, finite at every node (it vanishes at r = infinity)."""
        return self._cached(("rD", parity), lambda: self._r_dx_dr[:, None] * self._fold(self._d_full, parity))

    # -- geometry helpers -------------------------------------------------

    @property
    def spacing(self) -> float:
        """Smallest gap between consecutive finite nodes (including the gap to the mirror node)."""
        r = self.r[self.finite]
        return float(min(np.min(np.diff(r)), 2.0 * r[0]))

    def interpolation_matrix(self, r_targets, parity: int = 1):
        x = self._x_of_r(r_targets) / self.x_max
        m = barycentric_matrix(self._xi_full, self._bary, np.atleast_1d(x))
        return m[:, self._pos] + parity * m[:, self._neg]

    def interpolate(self, f, r_targets, parity: int = 1):
        return self.interpolation_matrix(r_targets, parity) @ np.asarray(f)

    def sample(self, func):
        """Evaluate a radial function at finite nodes; 0 at an infinite node."""
        out = np.zeros(self.n)
        out[self.finite] = func(self.r[self.finite])
        return out

    def integrate(self, f) -> float:
        """Integral of f(r) r^2 dr over the grid's radial range.

        The node at infinity carries no weight, so f must decay faster than r^-4.
        """
        return float(self.weights @ np.asarray(f))

    # -- sector operators ---------------------------------------------------

    def euler(self, ell: int):
        """r^2 times the sector Laplacian, built from the second-derivative matrix.

        Squaring r d/dr instead would admit a nearly null sawtooth mode.
        """
        p = (-1) ** ell
        r = np.where(self.finite, self.r, 0.0)
        e = (r * r)[:, None] * self.D2(p) + (2.0 * r)[:, None] * self.D(p)
        e -= ell * (ell + 1) * np.eye(self.n)
        return e

    def laplacian(self, ell: int):
        """Matrix of f -> f'' + 2f'/r - ell(ell+1) f / r^2 on nodal values."""

        def build():
            p = (-1) ** ell
            lap = self.D2(p) + 2.0 * self.inv_r[:, None] * self.D(p)
            lap -= ell * (ell + 1) * np.diag(self.inv_r2)
            if not self.finite[-1]:
                lap[-1] = 0.0
            return lap

        return self._cached(("lap", ell), build)

    def divergence_radial(self, flux):
        """(1/r^2) d/dr (r^2 flux) for a radial vector field (odd parity)."""
        flux = np.asarray(flux)
        return self.D(-1) @ flux + 2.0 * self.inv_r * flux

    @property
    def gradient_potential_matrix(self):
        """Matrix taking f (sector 0) to d/dr inv_lap f = r^-2 * enclosed mass.

        Solves r v' + 2 v = r f for the odd function v; no boundary rows are
        needed because r d/dr vanishes at infinity.  Assumes r f -> 0 there.
        """

        def build():
            rf = np.where(self.finite, self.r, 0.0)
            return np.linalg.solve(self.rD(-1) + 2.0 * np.eye(self.n), np.diag(rf))

        return self._cached("gradpot", build)

    def sobolev_gram(self, k: int, ell: int = 0):
        """Gram matrix of (f, g)_{L^2} + (D^k f, D^k g)_{L^2} for sector ell."""

        def build():
            w = self.weights
            gram = np.diag(w)
            if k == 0:
                return gram
            lap = self.laplacian(ell)
            a = np.eye(self.n)
            for _ in range(k // 2):
                a = lap @ a
            if k % 2 == 0:
                return gram + a.T @ (w[:, None] * a)
            da = self.D((-1) ** ell) @ a
            ang = ell * (ell + 1) * a.T @ ((w * self.inv_r2)[:, None] * a)
            return gram + da.T @ (w[:, None] * da) + ang

        return self._cached(("gram", k, ell), build)


def poisson_sector(grid: RadialGrid, f, ell: int):
    """Solve u'' + 2u'/r - ell(ell+1)u/r^2 = f, regular at 0 and decaying at infinity.

    Sector 0 returns the potential gauged to 0 at the outermost node; for data
    with infinite mass only its gradient (``grid.gradient_potential_matrix @ f``)
    is meaningful.
    """
    f = np.asarray(f, dtype=float)
    scale = np.max(np.abs(f)) if f.size else 0.0
    if scale > 0 and abs(f[grid.finite][-1]) > 1e-6 * scale:
        warnings.warn("poisson_sector: data does not decay at the outer nodes", RuntimeWarning)
    r = np.where(grid.finite, grid.r, 0.0)
    if ell == 0:
        a = grid.rD(1).copy()
        rhs = r * (grid.gradient_potential_matrix @ f)
        a[-1] = 0.0
        a[-1, -1] = 1.0
        rhs[-1] = 0.0
    else:
        a = grid.euler(ell)
        rhs = r * r * f
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > 1e14:
        raise NumericalFailure(f"poisson_sector: condition number {cond:.3e} (ell={ell}, n={grid.n})")
    return np.linalg.solve(a, rhs)


def poisson_gradient_matrix(grid: RadialGrid, ell: int):
    """Dense matrix of f -> d/dr inv_lap_ell f, the only part the drift terms need."""
    if ell == 0:
        return grid.gradient_potential_matrix

    def build():
        r = np.where(grid.finite, grid.r, 0.0)
        return grid.D((-1) ** ell) @ np.linalg.solve(grid.euler(ell), np.diag(r * r))

    return grid._cached(("poisson_grad", ell), build)


def sobolev_inner(f, g, k: int, grid: RadialGrid | None = None, ell: int = 0):
    """(f, g)_{H^k}: L^2 plus homogeneous H^k part, on a radial grid or a box."""
    if isinstance(f, ScalarField) or isinstance(g, ScalarField):
        if not (isinstance(f, ScalarField) and isinstance(g, ScalarField)):
            raise ValueError("mixing ScalarField with raw arrays")
        if f.grid is not g.grid or f.ell != g.ell:
            raise ValueError("fields live on different grids or sectors")
        grid, ell, f, g = f.grid, f.ell, f.values, g.values
    if grid is None:
        raise ValueError("grid required for raw arrays")
    if k < 0:
        raise ValueError("Sobolev index must be nonnegative")
    if isinstance(grid, FourierGrid3):
        return grid.sobolev_inner(f, g, k)
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if f.shape != (grid.n,) or g.shape != (grid.n,):
        raise ValueError("field shape does not match the grid")
    return float(f @ (grid.sobolev_gram(k, ell) @ g))


# ---------------------------------------------------------------------------
# Periodic Fourier box


class FourierGrid3:
    """The periodic box [-B, B)^3 sampled at n points per side."""

    def __init__(self, n: int, box: float):
        if n < 4 or n % 2:
            raise ValueError("Fourier grid size must be even and at least 4")
        self.n = int(n)
        self.box = float(box)
        self.h = 2.0 * box / n
        self.y1 = -box + self.h * np.arange(n)
        k = 2.0 * np.pi * np.fft.fftfreq(n, d=self.h)
        kr = 2.0 * np.pi * np.fft.rfftfreq(n, d=self.h)
        self.k1 = k
        self.kx = k[:, None, None]
        self.ky = k[None, :, None]
        self.kz = kr[None, None, :]
        self.k2 = self.kx**2 + self.ky**2 + self.kz**2
        kmax = np.pi / self.h
        cut = 2.0 / 3.0 * kmax
        self.dealias = (np.abs(self.kx) < cut) & (np.abs(self.ky) < cut) & (np.abs(self.kz) < cut)
        nyq = n // 2
        idx = np.arange(n)
        self.no_nyquist = (idx[:, None, None] != nyq) & (idx[None, :, None] != nyq) & (np.arange(nyq + 1)[None, None, :] != nyq)
        with np.errstate(divide="ignore"):
            inv = np.where(self.k2 > 0, 1.0 / np.where(self.k2 > 0, self.k2, 1.0), 0.0)
        self.inv_k2 = inv
        # Parseval multiplicities for the half spectrum
        mult = np.full(self.kz.shape[2], 2.0)
        mult[0] = 1.0
        if n % 2 == 0:
            mult[-1] = 1.0
        self._mult = mult[None, None, :]
        self._dilations = {}

    @property
    def shape(self):
        return (self.n,) * 3

    @property
    def cell_volume(self):
        return self.h**3

    def coords(self):
        return np.meshgrid(self.y1, self.y1, self.y1, indexing="ij")

    def radius(self):
        y = self.y1
        return np.sqrt(y[:, None, None] ** 2 + y[None, :, None] ** 2 + y[None, None, :] ** 2)

    def fft(self, f):
        return np.fft.rfftn(f, axes=(0, 1, 2))

    def ifft(self, fh):
        return np.fft.irfftn(fh, s=self.shape, axes=(0, 1, 2))

    def wavevector(self):
        return (self.kx, self.ky, self.kz)

    def gradient_hat(self, fh):
        return [1j * k * fh for k in self.wavevector()]

    def gradient(self, f):
        fh = self.fft(f)
        return np.stack([self.ifft(g) for g in self.gradient_hat(fh)])

    def divergence(self, u):
        return self.ifft(self.divergence_hat(u))

    def divergence_hat(self, u):
        k = self.wavevector()
        return sum(1j * k[i] * self.fft(u[i]) for i in range(3))

    def inv_laplacian_hat(self, fh):
        """Fourier coefficients of inv_lap f with the zero mode set to 0."""
        return -fh * self.inv_k2

    def grad_inv_laplacian(self, f):
        gh = self.gradient_hat(self.inv_laplacian_hat(self.fft(f)))
        return np.stack([self.ifft(g) for g in gh])

    def leray_hat(self, uh):
        """Project onto divergence-free fields; Nyquist modes, whose derivative is not real, are dropped."""
        k = self.wavevector()
        kdotu = sum(k[i] * uh[i] for i in range(3)) * self.inv_k2
        return [(uh[i] - k[i] * kdotu) * self.no_nyquist for i in range(3)]

    def integrate(self, f) -> float:
        return float(np.sum(f) * self.cell_volume)

    def sobolev_inner(self, f, g, k: int) -> float:
        fh = self.fft(f)
        gh = fh if g is f else self.fft(g)
        weight = 1.0 + self.k2**k if k > 0 else np.ones_like(self.k2)
        s = np.sum(self._mult * weight * (fh * np.conj(gh)).real)
        return float(s * self.cell_volume / self.n**3)

    def homogeneous_norm(self, f, k: int) -> float:
        fh = self.fft(f)
        s = np.sum(self._mult * self.k2**k * np.abs(fh) ** 2)
        return float(np.sqrt(s * self.cell_volume / self.n**3))

    # -- dilation / heat propagator along one axis --------------------------

    def dilation_matrix(self, factor: float, heat_time: float = 0.0):
        """1D matrix: sample exp(heat_time d^2) g at factor * y_j (trigonometric interpolation)."""
        key = (float(factor), float(heat_time))
        m = self._dilations.get(key)
        if m is None:
            n = self.n
            y = self.y1
            kk = 2.0 * np.pi * np.arange(n // 2 + 1) / (2.0 * self.box)
            mult = np.exp(-heat_time * kk**2)
            coef = np.full(n // 2 + 1, 2.0)
            coef[0] = 1.0
            coef[-1] = 1.0
            phase = (factor * y)[:, None] - y[None, :]
            m = np.zeros((n, n))
            for j in range(n // 2 + 1):
                m += coef[j] * mult[j] * np.cos(kk[j] * phase)
            m /= n
            self._dilations[key] = m
        return m

    def apply_separable(self, m, f):
        """Apply the same 1D matrix along all three axes of f."""
        n = self.n
        out = (m @ f.reshape(n, n * n)).reshape(n, n, n)
        out = np.einsum("ij,ajb->aib", m, out, optimize=True)
        out = (out.reshape(n * n, n) @ m.T).reshape(n, n, n)
        return out


# ---------------------------------------------------------------------------
# Fields


@dataclass
class ScalarField:
    grid: object
    values: np.ndarray
    ell: int = 0


@dataclass
class VectorField:
    grid: FourierGrid3
    values: np.ndarray  # shape (3, n, n, n)
    divergence_free: bool = False

    def max_divergence(self) -> float:
        return float(np.max(np.abs(self.grid.divergence(self.values))))


def leray_project(u):
    """Leray projection I - grad inv_lap div on a periodic box field."""
    if isinstance(u, VectorField):
        grid, vals = u.grid, u.values
    else:
        raise TypeError("leray_project expects a VectorField")
    uh = [grid.fft(vals[i]) for i in range(3)]
    ph = grid.leray_hat(uh)
    out = np.stack([grid.ifft(p) for p in ph])
    return VectorField(grid, out, divergence_free=True)


# ---------------------------------------------------------------------------
# Spherical harmonics and radial <-> box transfer


def real_sph_harm(ell: int, m: int, theta, phi):
    """Real orthonormal spherical harmonic; theta polar, phi azimuth."""
    if abs(m) > ell:
        raise ValueError("|m| must not exceed ell")
    if m == 0:
        return special.sph_harm_y(ell, 0, theta, phi).real
    y = special.sph_harm_y(ell, abs(m), theta, phi)
    if m > 0:
        return np.sqrt(2.0) * (-1) ** m * y.real
    return np.sqrt(2.0) * (-1) ** m * y.imag


def transfer_radial_to_box(radial: RadialGrid, f, ell: int, m: int, grid3: FourierGrid3):
    """Sample f(r) Y_lm(theta, phi) on the box; Y_00 = 1/sqrt(4 pi)."""
    y1 = grid3.y1
    x, y, z = np.meshgrid(y1, y1, y1, indexing="ij")
    r = np.sqrt(x * x + y * y + z * z)
    # box radii repeat heavily; interpolate once per distinct radius
    uniq, inv = np.unique(np.round(r.ravel(), 12), return_inverse=True)
    radial_part = radial.interpolate(f, uniq, (-1) ** ell)[inv].reshape(r.shape)
    with np.errstate(invalid="ignore", divide="ignore"):
        theta = np.arccos(np.clip(np.where(r > 0, z / np.where(r > 0, r, 1.0), 1.0), -1.0, 1.0))
    phi = np.arctan2(y, x)
    return radial_part * real_sph_harm(ell, m, theta, phi)


def project_box_to_radial(field3, grid3: FourierGrid3, ell: int, m: int, radii, n_theta: int = 24):
    """Coefficient of Y_lm on spheres of given radii (cubic spline + Gauss quadrature)."""
    ct, wt = np.polynomial.legendre.leggauss(n_theta)
    n_phi = 2 * n_theta
    ph = 2.0 * np.pi * np.arange(n_phi) / n_phi
    theta = np.arccos(ct)
    th, pp = np.meshgrid(theta, ph, indexing="ij")
    ylm = real_sph_harm(ell, m, th, pp)
    w = (wt[:, None] * np.full(n_phi, 2.0 * np.pi / n_phi)[None, :])
    out = []
    for rad in np.atleast_1d(radii):
        pts = rad * np.stack([np.sin(th) * np.cos(pp), np.sin(th) * np.sin(pp), np.cos(th)])
        idx = (pts + grid3.box) / grid3.h
        vals = map_coordinates(field3, idx.reshape(3, -1), order=3, mode="grid-wrap").reshape(th.shape)
        out.append(np.sum(w * vals * ylm))
    return np.array(out)


# ---------------------------------------------------------------------------
# Snapshot container

MAGIC = b"BLLB"
SNAPSHOT_VERSION = 1
KIND_RADIAL = 0
KIND_BOX = 1


def write_snapshot(path, grid, samples):
    samples = np.ascontiguousarray(samples, dtype="<f8")
    if isinstance(grid, RadialGrid):
        kind, params = KIND_RADIAL, [grid.scale, grid.r_max]
    elif isinstance(grid, FourierGrid3):
        kind, params = KIND_BOX, [grid.box]
    else:
        raise TypeError("unknown grid type")
    dims = samples.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IB", SNAPSHOT_VERSION, kind))
        fh.write(struct.pack("<I", len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(struct.pack("<I", len(params)))
        fh.write(struct.pack(f"<{len(params)}d", *params))
        fh.write(samples.tobytes(order="C"))


def read_snapshot(path):
    """Return (kind, params, samples)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError("not a snapshot file")
    off = 4
    version, kind = struct.unpack_from("<IB", data, off)
    off += 5
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    (ndim,) = struct.unpack_from("<I", data, off)
    off += 4
    dims = struct.unpack_from(f"<{ndim}I", data, off)
    off += 4 * ndim
    (npar,) = struct.unpack_from("<I", data, off)
    off += 4
    params = struct.unpack_from(f"<{npar}d", data, off)
    off += 8 * npar
    samples = np.frombuffer(data, dtype="<f8", offset=off).reshape(dims)
    return kind, list(params), samples.copy()
