"""Time integration of the renormalized Keller-Segel(-Navier-Stokes) system.

Three frames are supported:

* ``radial_selfsim``: pure Keller-Segel for radial data in self-similar
  variables, integrated for eps = Psi - Q with an exponential integrator
  (exp(-L dt) on the grid plus an explicit SSP-RK2 nonlinear step).
* ``box3d_selfsim``: density Psi and velocity U on the periodic box in
  self-similar variables, Strang split between the exact dilation + heat
  propagator and an explicit nonlinear step, with Leray projection.
* ``box3d_physical``: the same system in physical variables with the exact
  heat propagator.

Scale law: mu(tau) = mu0 e^{-tau/2}, physical time t = T - mu^2 with T = mu0^2.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import integrate
from scipy.linalg import expm

from . import profile, spectral
from .grids import FourierGrid3, RadialGrid
from .linop import assemble, box_semigroup

FRAMES = ("radial_selfsim", "box3d_selfsim", "box3d_physical")
SCHEMES = ("exponential",)
DIAGNOSTIC_COLUMNS = (
    "tau",
    "t",
    "h_k_stable",
    "b_unstable",
    "u_h1hk1",
    "max_rho",
    "min_rho",
    "max_u",
    "max_gradpi",
    "mass",
)


class NumericalBlowup(RuntimeError):
    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state


class SearchFailure(RuntimeError):
    pass


@dataclass
class DeltaBudget:
    d0: float = 1e-6
    d4: float = 1e-4
    d3: float = 1e-3
    d1: float = 1e-2
    d2: float = 3e-2

    def check(self):
        vals = [self.d0, self.d4, self.d3, self.d1, self.d2]
        if any(v <= 0 for v in vals):
            raise ValueError("delta thresholds must be positive")
        if any(a >= b for a, b in zip(vals, vals[1:])):
            warnings.warn("delta budget should satisfy d0 << d4 << d3 << d1 << d2", RuntimeWarning)


@dataclass
class RunConfig:
    frame: str = "radial_selfsim"
    n: int = 128
    box: float = 40.0
    map_scale: float = 6.0
    k: int = 2
    dt: float = 0.05
    tau_end: float = 8.0
    t_end: float = 0.1
    mu0: float = 0.0
    deltas: DeltaBudget = field(default_factory=DeltaBudget)
    delta_g: float | None = None
    R0: float = 1e8
    R_mod: float = 10.0
    a1: float = 0.0
    stable_amp: float = 0.0  # sup amplitude of an extra localized stable perturbation
    u0_amp: float = 0.0
    rho0_amp: float = 0.0
    rho0_radius: float = 9.0
    scheme: str = "exponential"
    shoot_enabled: bool = False
    shoot_tol: float = 1e-13
    shoot_max_iter: int = 60
    shoot_modes: tuple = (0,)
    output_every: int = 1
    snapshot_every: int = 0
    seed: int = 0

    def validate(self):
        if self.frame not in FRAMES:
            raise ValueError(f"unknown frame {self.frame!r}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; available: {', '.join(SCHEMES)}")
        if self.dt <= 0 or self.output_every < 1 or self.snapshot_every < 0:
            raise ValueError("dt and output_every must be positive, snapshot_every nonnegative")
        if self.n < 8:
            raise ValueError("grid needs at least 8 points")
        if self.R0 <= 0 or self.R_mod <= 0:
            raise ValueError("cutoff radii must be positive")
        if self.mu0 < 0:
            raise ValueError("mu0 must be nonnegative")
        if len(self.shoot_modes) != 1:
            raise ValueError("only one unstable mode is shot for; even data remove the translations")
        self.deltas.check()
        return self


@dataclass
class SimState:
    tau: float
    mu: float
    psi: np.ndarray  # eps on the radial grid, Psi or rho on the box
    U: np.ndarray | None
    step: int = 0
    t: float = 0.0  # physical time (box3d_physical)


@dataclass
class DiagnosticsRow:
    tau: float
    t: float
    h_k_stable: float
    b_unstable: float
    u_h1hk1: float
    max_rho: float
    min_rho: float
    max_u: float
    max_gradpi: float
    mass: float

    def values(self):
        return [getattr(self, c) for c in DIAGNOSTIC_COLUMNS]


@dataclass
class Trajectory:
    rows: list
    final: SimState
    exited: bool = False
    exit_side: int = 0
    exit_tau: float | None = None
    extra: dict = field(default_factory=dict)


def mu_of_tau(mu0: float, tau: float) -> float:
    return mu0 * math.exp(-0.5 * tau)


def _ssp_rk2(f, y, dt, t0=0.0):
    y1 = [a + dt * b for a, b in zip(y, f(y, t0))]
    k2 = f(y1, t0 + dt)
    return [0.5 * a + 0.5 * (b + dt * c) for a, b, c in zip(y, y1, k2)]


def _check_finite(state, *arrays):
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise NumericalBlowup(f"non-finite values at tau={state.tau:.6g}", state)


# ---------------------------------------------------------------------------
# Radial self-similar Keller-Segel


def _cutoff_tail_norms(R0: float, k: int):
    """||(1 - chi_R0) Q||^2 in L^2 and in the homogeneous H^k and H^{k+1} seminorms on R^3."""

    def tail(r):
        return (1.0 - spectral.cutoff(r, R0)) * profile.q_radial(r)

    l2 = 4.0 * np.pi * (
        integrate.quad(lambda r: tail(r) ** 2 * r * r, R0, 2 * R0, limit=200)[0]
        + integrate.quad(lambda r: profile.q_radial(r) ** 2 * r * r, 2 * R0, np.inf, limit=200)[0]
    )
    # homogeneous parts: differentiate on a fine grid in s = r / R0; they scale like R0^{-(2j+1)}
    s = np.linspace(0.9, 60.0, 60001)
    h = s[1] - s[0]
    f = tail(R0 * s)
    out = []
    for order in (k, k + 1):
        g = f.copy()
        for _ in range(order // 2):
            g = (np.gradient(np.gradient(g, h), h) + 2.0 / s * np.gradient(g, h)) / R0**2
        if order % 2:
            g = np.gradient(g, h) / R0
        out.append(4.0 * np.pi * np.trapezoid(g * g * (R0 * s) ** 2, s) * R0)
    return l2, out[0], out[1]


class RadialModel:
    """Precomputed operators for eps = Psi - Q on a radial grid (sector 0)."""

    def __init__(self, cfg: RunConfig, decomp: spectral.SpectralDecomposition | None = None):
        self.cfg = cfg
        self.grid = RadialGrid(cfg.n, cfg.map_scale)
        g = self.grid
        if decomp is None:
            decomp = spectral.decompose(g, ell_max=2, k=cfg.k)
        self.decomp = decomp
        self.delta_g = cfg.delta_g if cfg.delta_g is not None else decomp.delta_g
        if self.delta_g <= 0:
            raise ValueError("no spectral gap; cannot run the bootstrap monitors")
        self.space = spectral.build_modified(decomp, cfg.R_mod)
        self.op = assemble(0, g, cfg.k)
        self.q = g.sample(profile.q_radial)
        self.gradpot = g.gradient_potential_matrix
        self.interior = self.op.interior
        self.gram = self.op.gram
        self.gram_hi = g.sobolev_gram(cfg.k + 1, 0) - np.diag(g.weights)
        self._expm = {}
        self.phi_t = self.space.blocks[0].phi_tilde[:, 0]
        r_last = g.r[g.finite][-1]
        self.tail_analytic = cfg.R0 >= r_last
        if not self.tail_analytic and 2 * cfg.R0 > 0.1 * r_last:
            warnings.warn("R0 cutoff region is poorly resolved by the radial grid", RuntimeWarning)
        if self.tail_analytic:
            self.tail_l2, self.tail_hk, self.tail_hk1 = _cutoff_tail_norms(cfg.R0, cfg.k)
        else:
            self.tail_l2 = self.tail_hk = self.tail_hk1 = 0.0

    # -- linear propagator ------------------------------------------------

    def propagator(self, dt: float):
        key = float(dt)
        if key not in self._expm:
            idx = self.interior
            self._expm[key] = expm(-self.op.L[np.ix_(idx, idx)] * dt)
        return self._expm[key]

    def linear(self, eps, dt):
        out = np.zeros_like(eps)
        idx = self.interior
        out[idx] = self.propagator(dt) @ eps[idx]
        return out

    def nonlinear(self, eps):
        out = self.grid.divergence_radial(eps * (self.gradpot @ eps))
        out[~self.grid.finite] = 0.0
        return out

    # -- data ---------------------------------------------------------------

    def cutoff_stable_part(self):
        """-P~_s((1 - chi_R0) Q) restricted to the grid."""
        g = self.grid
        tail = np.zeros(g.n)
        tail[g.finite] = (1.0 - spectral.cutoff(g.r[g.finite], self.cfg.R0)) * self.q[g.finite]
        return -(tail - spectral.modified_project(self.space, tail, 0))

    def stable_bump(self):
        """A smooth localized field with its modified unstable part removed."""
        g = self.grid
        bump = g.sample(lambda r: np.exp(-r * r / 2.0) * (1.0 - r * r / 6.0))
        return bump - spectral.modified_project(self.space, bump, 0)

    def initial_eps(self, a1: float, stable_init=None):
        if stable_init is None:
            stable_init = self.cutoff_stable_part() + self.cfg.stable_amp * self.stable_bump()
        return np.asarray(stable_init, dtype=float) + a1 * self.phi_t

    # -- stepping -----------------------------------------------------------

    def step(self, state: SimState, dt: float) -> SimState:
        eps = self.linear(state.psi, 0.5 * dt)
        (eps,) = _ssp_rk2(lambda y, t: [self.nonlinear(y[0])], [eps], dt)
        eps = self.linear(eps, 0.5 * dt)
        tau = state.tau + dt
        new = SimState(tau, mu_of_tau(self.cfg.mu0, tau), eps, None, state.step + 1)
        _check_finite(state, eps)
        return new

    # -- diagnostics ----------------------------------------------------------

    def unstable_coefficient(self, eps):
        return spectral.unstable_coefficients(self.decomp, eps, 0)

    def diagnostics(self, state: SimState) -> DiagnosticsRow:
        g = self.grid
        eps = state.psi
        w = self.unstable_coefficient(eps)
        eps_s = eps - self.space.blocks[0].phi_tilde @ w
        four_pi = 4.0 * np.pi
        tail_decay = math.exp(-0.5 * state.tau)
        hk2 = four_pi * eps_s @ self.gram @ eps_s + self.tail_l2 * tail_decay
        hk2 += self.tail_hk * math.exp(-(self.cfg.k + 0.5) * state.tau)
        mu = state.mu
        T = self.cfg.mu0**2
        psi = self.q + eps
        mass_grid = four_pi * g.integrate(eps)
        if mu > 0:
            max_rho = float(np.max(psi)) / mu**2
            min_rho = float(np.min(psi[g.finite])) / mu**2
        else:
            max_rho = min_rho = float("nan")
        return DiagnosticsRow(
            tau=state.tau,
            t=T - mu * mu,
            h_k_stable=math.sqrt(max(hk2, 0.0)),
            b_unstable=spectral.b_norm_from_coefficients(self.space, w, 0),
            u_h1hk1=0.0,
            max_rho=max_rho,
            min_rho=min_rho,
            max_u=0.0,
            max_gradpi=0.0,
            mass=mu * mass_grid,
        )

    def hk1_stable(self, state: SimState) -> float:
        eps = state.psi
        w = self.unstable_coefficient(eps)
        eps_s = eps - self.space.blocks[0].phi_tilde @ w
        v = 4.0 * np.pi * eps_s @ self.gram_hi @ eps_s
        v += self.tail_hk1 * math.exp(-(self.cfg.k + 1.5) * state.tau)
        return math.sqrt(max(v, 0.0))


class RadialSplitModel:
    """Psi-form radial stepper: exact L0 semigroup + explicit aggregation term."""

    def __init__(self, cfg: RunConfig):
        from .linop import radial_semigroup_matrix

        self.cfg = cfg
        self.grid = RadialGrid(cfg.n, cfg.map_scale)
        self.gradpot = self.grid.gradient_potential_matrix
        self._half = {}
        self._semigroup = radial_semigroup_matrix

    def nonlinear(self, psi):
        out = self.grid.divergence_radial(psi * (self.gradpot @ psi))
        out[~self.grid.finite] = 0.0
        return out

    def step(self, state: SimState, dt: float) -> SimState:
        if dt not in self._half:
            self._half[dt] = self._semigroup(self.grid, 0, 0.5 * dt)
        s = self._half[dt]
        psi = s @ state.psi
        (psi,) = _ssp_rk2(lambda y, t: [self.nonlinear(y[0])], [psi], dt)
        psi = s @ psi
        tau = state.tau + dt
        _check_finite(state, psi)
        return SimState(tau, mu_of_tau(self.cfg.mu0, tau), psi, None, state.step + 1)


# ---------------------------------------------------------------------------
# Periodic box


def curl_gaussian_velocity(grid: FourierGrid3, scale: float, amp: float, axis=(0.3, -0.5, 1.0)):
    """amp * curl(e^{-|x|^2/2} a) sampled at x = scale * y (a fixed smooth solenoidal field)."""
    x, y, z = (scale * c for c in grid.coords())
    e = np.exp(-0.5 * (x * x + y * y + z * z))
    a = np.asarray(axis, dtype=float)
    grad = (-x * e, -y * e, -z * e)
    # curl(e a) = grad e x a
    u = np.stack(
        [
            grad[1] * a[2] - grad[2] * a[1],
            grad[2] * a[0] - grad[0] * a[2],
            grad[0] * a[1] - grad[1] * a[0],
        ]
    )
    return amp * u


def compact_bump(r, radius: float, power: int = 20):
    """(1 - r^2/a^2)_+^power: nonnegative, compactly supported and C^{power-1}."""
    return np.clip(1.0 - (np.asarray(r) / radius) ** 2, 0.0, None) ** power


class BoxModel:
    """Coupled Keller-Segel-Navier-Stokes on the periodic box."""

    def __init__(self, cfg: RunConfig, radial: RadialModel | None = None):
        self.cfg = cfg
        self.grid = FourierGrid3(cfg.n, cfg.box)
        self.selfsim = cfg.frame == "box3d_selfsim"
        self.radial = radial
        y = self.grid.coords()
        self._coords = y
        self.q = profile.profile_q(np.stack(y, axis=-1)) if self.selfsim else None
        self._minus_l0_q = self._minus_l0(self.q) if self.selfsim else None
        self._psi_dual = None
        self._phi_t = None

    # -- nonlinear terms ----------------------------------------------------

    def _nonlinear(self, fields, mu):
        g = self.grid
        psi, U = fields
        mask = g.dealias
        psi_h = g.fft(psi)
        gp = [g.ifft(c) for c in g.gradient_hat(g.inv_laplacian_hat(psi_h))]
        # the torus solves against psi - mean(psi); put the background back so div(gp) = psi
        background = psi_h.flat[0].real / psi.size / 3.0
        gp = [gp[i] + background * self._coords[i] for i in range(3)]
        flux = [g.fft(psi * (gp[i] - U[i])) * mask for i in range(3)]
        k = g.wavevector()
        dpsi = g.ifft(sum(1j * k[i] * flux[i] for i in range(3)))
        uh = [g.fft(U[i]) for i in range(3)]
        adv = []
        for i in range(3):
            grad_ui = [g.ifft(1j * k[j] * uh[i]) for j in range(3)]
            adv.append(g.fft(sum(U[j] * grad_ui[j] for j in range(3))) * mask)
        force = [-a for a in adv]
        force[2] = force[2] - mu * psi_h
        # whole-space projection of a localized field keeps 2/3 of its mean
        force[2].flat[0] = -mu * psi_h.flat[0] * (2.0 / 3.0)
        proj = g.leray_hat(force)
        dU = np.stack([g.ifft(p) for p in proj])
        return [dpsi, dU]

    def _minus_l0(self, f):
        """Generator of box_semigroup on f: Delta f - f - (y . grad f) / 2."""
        g = self.grid
        fh = g.fft(f)
        grad = [g.ifft(c) for c in g.gradient_hat(fh)]
        ydotgrad = sum(self._coords[i] * grad[i] for i in range(3))
        return g.ifft(-g.k2 * fh) - f - 0.5 * ydotgrad

    def _linear(self, psi, U, dt):
        g = self.grid
        if self.selfsim:
            psi = box_semigroup(g, psi, dt, 1.0)
            U = np.stack([box_semigroup(g, U[i], dt, 0.5) for i in range(3)])
        else:
            mult = np.exp(-dt * g.k2)
            psi = g.ifft(g.fft(psi) * mult)
            U = np.stack([g.ifft(g.fft(U[i]) * mult) for i in range(3)])
        return psi, U

    def cfl_limit(self, state: SimState) -> float:
        g = self.grid
        gp = g.grad_inv_laplacian(state.psi)
        gp = gp + np.mean(state.psi) / 3.0 * np.stack(self._coords)
        speed = np.max(np.sqrt(np.sum((gp - state.U) ** 2, axis=0)))
        return 0.5 * g.h / max(float(speed), 1e-300)

    def step(self, state: SimState, dt: float) -> SimState:
        if dt > self.cfl_limit(state):
            raise ValueError(f"dt={dt} exceeds the advective limit {self.cfl_limit(state):.4g}")
        cfg = self.cfg
        if self.selfsim:
            # split around the profile: eps = Psi - Q, so the splitting error scales with eps
            q = self.q

            def rhs(y, tau):
                d_psi, d_u = self._nonlinear([q + y[0], y[1]], mu_of_tau(cfg.mu0, tau))
                return [d_psi + self._minus_l0_q, d_u]

            eps, U = self._linear(state.psi - q, state.U, 0.5 * dt)
            eps, U = _ssp_rk2(rhs, [eps, U], dt, state.tau)
            eps, U = self._linear(eps, U, 0.5 * dt)
            psi = q + eps
        else:
            psi, U = self._linear(state.psi, state.U, 0.5 * dt)
            psi, U = _ssp_rk2(lambda y, t: self._nonlinear(y, 1.0), [psi, U], dt, state.t)
            psi, U = self._linear(psi, U, 0.5 * dt)
        uh = self.grid.leray_hat([self.grid.fft(U[i]) for i in range(3)])
        U = np.stack([self.grid.ifft(p) for p in uh])
        _check_finite(state, psi, U)
        if self.selfsim:
            tau = state.tau + dt
            return SimState(tau, mu_of_tau(cfg.mu0, tau), psi, U, state.step + 1)
        return SimState(state.tau, state.mu, psi, U, state.step + 1, state.t + dt)

    # -- unstable coordinate through the radial duals ----------------------

    def _radial_fields(self):
        if self._psi_dual is None:
            from .grids import transfer_radial_to_box

            rm = self.radial
            psi = rm.decomp.unstable[0].psi[:, 0]
            phi_t = rm.phi_t
            y00 = math.sqrt(4.0 * math.pi)  # undo the Y_00 normalization
            self._psi_dual = y00 * transfer_radial_to_box(rm.grid, psi, 0, 0, self.grid)
            self._phi_t = y00 * transfer_radial_to_box(rm.grid, phi_t, 0, 0, self.grid)
        return self._psi_dual, self._phi_t

    def unstable_coefficient(self, psi) -> float:
        dual, _ = self._radial_fields()
        return self.grid.sobolev_inner(psi - self.q, dual, self.cfg.k) / (4.0 * math.pi)

    # -- data ---------------------------------------------------------------

    def initial_state(self, a1: float = 0.0, fluid_init=None, rho_init=None) -> SimState:
        cfg = self.cfg
        g = self.grid
        if self.selfsim:
            r = g.radius()
            chi = spectral.cutoff(r, cfg.R0)
            psi = chi * self.q
            if self.radial is not None:
                rm = self.radial
                rg = rm.grid
                tail = np.zeros(rg.n)
                tail[rg.finite] = (1.0 - spectral.cutoff(rg.r[rg.finite], cfg.R0)) * rm.q[rg.finite]
                c = spectral.unstable_coefficients(rm.decomp, tail, 0)[0]
                _, phi_t = self._radial_fields()
                psi = psi + (c + a1) * phi_t
            if fluid_init is None:
                fluid_init = cfg.mu0 * curl_gaussian_velocity(g, cfg.mu0, cfg.u0_amp)
            U = np.asarray(fluid_init, dtype=float)
            mu = cfg.mu0
        else:
            if rho_init is None:
                rho_init = cfg.rho0_amp * compact_bump(g.radius(), cfg.rho0_radius)
            psi = np.asarray(rho_init, dtype=float)
            if np.min(psi) < 0:
                warnings.warn("initial density has negative values", RuntimeWarning)
            if fluid_init is None:
                fluid_init = curl_gaussian_velocity(g, 1.0, cfg.u0_amp)
            U = np.asarray(fluid_init, dtype=float)
            mu = cfg.mu0
        uh = g.leray_hat([g.fft(U[i]) for i in range(3)])
        U = np.stack([g.ifft(p) for p in uh])
        return SimState(0.0, mu, psi, U, 0, 0.0)

    # -- diagnostics ----------------------------------------------------------

    def pressure_gradient(self, psi, U, mu):
        """grad Pi = -grad inv_lap (div(U.grad U) + mu d_3 Psi)."""
        g = self.grid
        k = g.wavevector()
        uh = [g.fft(U[i]) for i in range(3)]
        adv = []
        for i in range(3):
            grad_ui = [g.ifft(1j * k[j] * uh[i]) for j in range(3)]
            adv.append(g.fft(sum(U[j] * grad_ui[j] for j in range(3))))
        div_hat = sum(1j * k[i] * adv[i] for i in range(3)) + mu * 1j * k[2] * g.fft(psi)
        p_hat = g.inv_laplacian_hat(div_hat)
        return np.stack([-g.ifft(c) for c in g.gradient_hat(p_hat)])

    def diagnostics(self, state: SimState) -> DiagnosticsRow:
        g = self.grid
        cfg = self.cfg
        U = state.U
        max_u_ss = float(np.max(np.sqrt(np.sum(U * U, axis=0))))
        uk = math.sqrt(g.homogeneous_norm(U[0], 1) ** 2 + g.homogeneous_norm(U[1], 1) ** 2 + g.homogeneous_norm(U[2], 1) ** 2)
        uk1 = math.sqrt(sum(g.homogeneous_norm(U[i], cfg.k + 1) ** 2 for i in range(3)))
        u_norm = math.sqrt(uk * uk + uk1 * uk1)
        if self.selfsim:
            mu = state.mu
            T = cfg.mu0**2
            gp = self.pressure_gradient(state.psi, U, mu)
            gp_max = float(np.max(np.sqrt(np.sum(gp * gp, axis=0))))
            if self.radial is not None:
                c = self.unstable_coefficient(state.psi)
                _, phi_t = self._radial_fields()
                eps_s = state.psi - self.q - c * phi_t
                hk = math.sqrt(g.sobolev_inner(eps_s, eps_s, cfg.k))
                b = spectral.b_norm_from_coefficients(self.radial.space, np.array([c]), 0)
            else:
                eps = state.psi - self.q
                hk, b = math.sqrt(g.sobolev_inner(eps, eps, cfg.k)), float("nan")
            scale = mu if mu > 0 else float("nan")
            return DiagnosticsRow(
                tau=state.tau,
                t=T - mu * mu,
                h_k_stable=hk,
                b_unstable=b,
                u_h1hk1=u_norm,
                max_rho=float(np.max(state.psi)) / scale**2,
                min_rho=float(np.min(state.psi)) / scale**2,
                max_u=max_u_ss / scale,
                max_gradpi=gp_max / scale**3,
                mass=scale * g.integrate(state.psi),
            )
        gp = self.pressure_gradient(state.psi, U, 1.0)
        gp_max = float(np.max(np.sqrt(np.sum(gp * gp, axis=0))))
        T = cfg.mu0**2
        tau = -math.log((T - state.t) / T) if 0 < T and state.t < T else float("nan")
        return DiagnosticsRow(
            tau=tau,
            t=state.t,
            h_k_stable=float("nan"),
            b_unstable=float("nan"),
            u_h1hk1=u_norm,
            max_rho=float(np.max(state.psi)),
            min_rho=float(np.min(state.psi)),
            max_u=max_u_ss,
            max_gradpi=gp_max,
            mass=g.integrate(state.psi),
        )


def step_selfsim(model, state: SimState, dt: float) -> SimState:
    """One self-similar step on a RadialModel, RadialSplitModel or self-similar BoxModel."""
    if isinstance(model, BoxModel) and not model.selfsim:
        raise ValueError("model is in the physical frame")
    return model.step(state, dt)


def step_physical(model: BoxModel, state: SimState, dt: float) -> SimState:
    if model.selfsim:
        raise ValueError("model is in the self-similar frame")
    return model.step(state, dt)


# ---------------------------------------------------------------------------
# Runs, shooting and monitors


def run(model, state: SimState, cfg: RunConfig, end: float | None = None, exit_test=None, on_row=None) -> Trajectory:
    """Advance to ``end`` (tau for self-similar frames, t for the physical one)."""
    physical = isinstance(model, BoxModel) and not model.selfsim
    end = (cfg.t_end if physical else cfg.tau_end) if end is None else end
    nsteps = int(round(end / cfg.dt))
    rows = [model.diagnostics(state)]
    if on_row:
        on_row(state, rows[-1])
    traj = Trajectory(rows, state)
    for i in range(nsteps):
        try:
            state = model.step(state, cfg.dt)
        except NumericalBlowup as exc:
            traj.final = exc.last_state
            traj.extra["blowup"] = str(exc)
            raise
        if (i + 1) % cfg.output_every == 0 or i + 1 == nsteps:
            rows.append(model.diagnostics(state))
            if on_row:
                on_row(state, rows[-1])
        traj.final = state
        if exit_test is not None:
            side = exit_test(state, rows[-1])
            if side:
                traj.exited = True
                traj.exit_side = side
                traj.exit_tau = state.tau
                break
    return traj


def _radial_exit_test(model: RadialModel, cfg: RunConfig):
    d3 = cfg.deltas.d3
    rate = 0.7 * model.delta_g

    def test(state, row):
        if row.b_unstable > d3 * math.exp(-rate * state.tau):
            w = model.unstable_coefficient(state.psi)[0]
            return 1 if w > 0 else -1
        return 0

    return test


def outgoing_flux(rows, delta_g: float):
    """Finite-difference d/dtau (e^{(7/5) delta_g tau} ||eps_u||_B^2) at the last row."""
    a, b = rows[-2], rows[-1]
    fa = math.exp(1.4 * delta_g * a.tau) * a.b_unstable**2
    fb = math.exp(1.4 * delta_g * b.tau) * b.b_unstable**2
    return (fb - fa) / (b.tau - a.tau)


@dataclass
class ShootReport:
    a: np.ndarray
    trajectory: Trajectory
    iterations: list  # (iteration, lo, hi, exit_side)
    converged: bool


def shoot_unstable(cfg: RunConfig, stable_init=None, fluid_init=None, model=None) -> ShootReport:
    """Find the unstable coefficient that keeps the trajectory in the bootstrap regime.

    Radial frame: bisection on a1 using the exit side.  Box frame: Newton
    corrections a <- a - c(tau) e^{-tau} from the measured unstable coordinate.
    """
    cfg.validate()
    if cfg.frame == "radial_selfsim":
        model = model or RadialModel(cfg)
        return _shoot_radial(cfg, model, stable_init)
    if cfg.frame == "box3d_selfsim":
        return _shoot_box(cfg, model, fluid_init)
    raise ValueError("shooting needs a self-similar frame")


def _shoot_radial(cfg, model: RadialModel, stable_init):
    test = _radial_exit_test(model, cfg)

    def trial(a):
        eps0 = model.initial_eps(a, stable_init)
        st = SimState(0.0, cfg.mu0, eps0, None)
        tr = run(model, st, cfg, exit_test=test)
        # survivors are classified by the sign of the unstable coordinate at the end
        w = model.unstable_coefficient(tr.final.psi)[0]
        return tr, (tr.exit_side if tr.exited else (1 if w > 0 else -1))

    lo, hi = -cfg.deltas.d3, cfg.deltas.d3
    (t_lo, s_lo), (t_hi, s_hi) = trial(lo), trial(hi)
    log = [(0, lo, hi, f"{s_lo}/{s_hi}")]
    if s_lo == s_hi:
        raise SearchFailure(f"both bracket ends leave on side {s_lo}")
    best = None
    for it in range(1, cfg.shoot_max_iter + 1):
        mid = 0.5 * (lo + hi)
        tm, side = trial(mid)
        log.append((it, lo, hi, str(side) if tm.exited else f"{side}*"))
        if not tm.exited:
            best = (mid, tm)
        if side == s_lo:
            lo = mid
        else:
            hi = mid
        if hi - lo < cfg.shoot_tol:
            break
    mid = 0.5 * (lo + hi)
    tm, _ = trial(mid)
    if tm.exited and best is not None:
        mid, tm = best
    return ShootReport(np.array([mid]), tm, log, not tm.exited)


def _shoot_box(cfg, model, fluid_init, exit_level: float = 0.02):
    if model is None:
        rcfg = replace(cfg, frame="radial_selfsim", n=128)
        model = BoxModel(cfg, RadialModel(rcfg))
    a = 0.0
    log = []

    for it in range(cfg.shoot_max_iter):
        state = model.initial_state(a, fluid_init)

        def test(st, row):
            c = model.unstable_coefficient(st.psi)
            return (1 if c > 0 else -1) if abs(c) > exit_level else 0

        traj = run(model, state, cfg, exit_test=test)
        side = traj.exit_side if traj.exited else 0
        log.append((it, a, a, str(side)))
        if not traj.exited:
            return ShootReport(np.array([a]), traj, log, True)
        c = model.unstable_coefficient(traj.final.psi)
        a = a - c * math.exp(-traj.final.tau)
    raise SearchFailure("box shooting did not settle within the iteration budget")


@dataclass
class BoundReport:
    name: str
    first_violation: float | None
    fitted_exponent: float
    required_exponent: float


def _fit_exponent(tau, values):
    tau = np.asarray(tau)
    v = np.asarray(values)
    ok = v > 0
    if ok.sum() < 2:
        return float("inf")
    slope = np.polyfit(tau[ok], np.log(v[ok]), 1)[0]
    return float(-slope)


def monitor_bootstrap(rows, deltas: DeltaBudget, delta_g: float, hk1=None):
    """First violation and fitted decay exponent of the four bootstrap norms."""
    tau = np.array([r.tau for r in rows])
    hk1 = np.zeros(len(rows)) if hk1 is None else np.asarray(hk1)
    series = [
        ("stable_hk", np.array([r.h_k_stable for r in rows]), deltas.d1 * np.exp(-0.5 * delta_g * tau), 0.5 * delta_g),
        ("stable_hk1", hk1, deltas.d2 * np.exp(-0.5 * delta_g * tau), 0.5 * delta_g),
        ("unstable_b", np.array([r.b_unstable for r in rows]), deltas.d3 * np.exp(-0.7 * delta_g * tau), 0.7 * delta_g),
        ("flow", np.array([r.u_h1hk1 for r in rows]), deltas.d4 * np.exp(-tau / 8.0), 1.0 / 8.0),
    ]
    out = []
    for name, vals, bound, rate in series:
        bad = np.nonzero(vals > bound)[0]
        out.append(BoundReport(name, float(tau[bad[0]]) if bad.size else None, _fit_exponent(tau, vals), rate))
    return out


@dataclass
class RateReport:
    T_estimate: float
    rho_scaled_last_decade: float  # max |max_rho (T - t) / 6 - 1| over the last decade
    rho_scaled_values: np.ndarray
    gradpi_exponent: float
    u_slope: float
    u_r2: float
    decades: float
    reliable: bool


def fluid_blowup_rates(rows, window_decades: float = 2.0, T: float | None = None) -> RateReport:
    """Fits of ||u||_inf against |log(T - t)| and ||grad pi||_inf against T - t.

    T is the blowup time when known (self-similar runs have T = mu0^2);
    otherwise it is the zero of a linear fit of 1/max_rho over the latest third of the rows.
    """
    t = np.array([r.t for r in rows])
    rho = np.array([r.max_rho for r in rows])
    gp = np.array([r.max_gradpi for r in rows])
    u = np.array([r.max_u for r in rows])
    if T is None:
        late = slice(2 * len(rows) // 3, None)
        slope, icpt = np.polyfit(t[late], 1.0 / rho[late], 1)
        T = -icpt / slope
    rem = T - t
    good = rem > 0
    lo = np.min(rem[good])
    win = good & (rem <= lo * 10**window_decades)
    decades = float(np.log10(np.max(rem[win]) / lo))
    last = good & (rem <= lo * 10.0)
    scaled = rho[last] * rem[last]
    gp_exp = float(np.polyfit(np.log(rem[win]), np.log(gp[win]), 1)[0])
    x = np.abs(np.log(rem[win]))
    us, ui = np.polyfit(x, u[win], 1)
    pred = us * x + ui
    ss_res = float(np.sum((u[win] - pred) ** 2))
    ss_tot = float(np.sum((u[win] - np.mean(u[win])) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    reliable = decades >= 1.5
    if not reliable:
        warnings.warn(f"fit-unreliable: only {decades:.2f} decades of T - t", RuntimeWarning)
    return RateReport(
        float(T), float(np.max(np.abs(scaled / 6.0 - 1.0))), scaled, gp_exp, float(us), float(r2), decades, reliable
    )


def config_to_dict(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    return d


def config_field_names():
    return [f.name for f in fields(RunConfig)]


@dataclass
class FrameComparison:
    rho_rel: float
    u_rel: float
    joint_rel: float
    mass_drift: float  # largest relative mass change over one physical step
    min_rho_ratio: float  # min rho / max rho over the physical run


def frame_consistency(cfg: RunConfig, dtau: float, steps: int, rho0=None, u0=None) -> FrameComparison:
    """Evolve the physical frame for t = 1 - e^{-dtau} and the self-similar frame (mu0 = 1)
    for dtau from the same data, then compare Psi(y) with mu^2 rho(mu y) and U(y) with mu u(mu y).
    """
    pcfg = replace(cfg, frame="box3d_physical", mu0=1.0)
    scfg = replace(cfg, frame="box3d_selfsim", mu0=1.0)
    phys = BoxModel(pcfg)
    g = phys.grid
    p = phys.initial_state(fluid_init=u0, rho_init=rho0)
    s = SimState(0.0, 1.0, p.psi.copy(), p.U.copy())
    ss = _PlainSelfSim(scfg)
    dt_phys = -math.expm1(-dtau) / steps
    mass_drift, min_ratio = 0.0, float(np.min(p.psi) / np.max(p.psi))
    for _ in range(steps):
        m0 = g.integrate(p.psi)
        p = phys.step(p, dt_phys)
        s = ss.step(s, dtau / steps)
        mass_drift = max(mass_drift, abs(g.integrate(p.psi) - m0) / abs(m0))
        min_ratio = min(min_ratio, float(np.min(p.psi) / np.max(p.psi)))
    mu = math.exp(-0.5 * dtau)
    m = g.dilation_matrix(mu, 0.0)
    rho_s = mu * mu * g.apply_separable(m, p.psi)
    u_s = np.stack([mu * g.apply_separable(m, p.U[i]) for i in range(3)])
    d_rho = float(np.max(np.abs(rho_s - s.psi)))
    d_u = float(np.max(np.abs(u_s - s.U)))
    a_rho, a_u = float(np.max(np.abs(s.psi))), float(np.max(np.abs(s.U)))
    return FrameComparison(
        d_rho / a_rho, d_u / a_u if a_u > 0 else d_u, max(d_rho, d_u) / max(a_rho, a_u), mass_drift, min_ratio
    )


class _PlainSelfSim(BoxModel):
    """Self-similar box stepper for general data (no profile subtraction)."""

    def __init__(self, cfg):
        super().__init__(cfg)
        self.q = np.zeros(self.grid.shape)
        self._minus_l0_q = np.zeros(self.grid.shape)
