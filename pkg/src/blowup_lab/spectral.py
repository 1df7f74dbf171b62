"""Spectrum of -L per sector, unstable projections and their cutoff-localized versions.

Duality is taken in the H^k pairing (f, g) = f^T G g with G the sector Gram
matrix.  Unstable modes are stored in a real basis (real and imaginary parts
for complex pairs) together with dual vectors psi such that (phi_i, psi_j) = delta_ij.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .grids import NumericalFailure, RadialGrid
from .linop import SectorOperator, assemble

REFINE_TOL = 1e-3
NEUTRAL_TOL = 1e-6
GAP_CAP = np.nextafter(1.0 / 16.0, 0.0)


@dataclass(eq=False)
class SectorSpectrum:
    op: SectorOperator
    eigenvalues: np.ndarray  # of -L, sorted by descending real part
    right: np.ndarray  # columns, full-length nodal vectors
    left: np.ndarray  # H^k duals: right[:, i] . G . left[:, j] = delta_ij
    refinement_stable: np.ndarray
    refined_eigenvalues: np.ndarray | None = None

    @property
    def ell(self) -> int:
        return self.op.ell


@dataclass(eq=False)
class UnstableBlock:
    """Real unstable basis of one sector with its duals and the action of -L on it."""

    ell: int
    eigenvalues: np.ndarray
    phi: np.ndarray  # (n, N)
    psi: np.ndarray  # (n, N)
    jmat: np.ndarray  # (N, N), -L phi = phi @ jmat

    @property
    def size(self) -> int:
        return self.phi.shape[1]


@dataclass(eq=False)
class SpectralDecomposition:
    grid: RadialGrid
    k: int
    delta_g: float
    sectors: dict = field(default_factory=dict)  # ell -> SectorSpectrum
    unstable: dict = field(default_factory=dict)  # ell -> UnstableBlock
    counts: dict = field(default_factory=dict)

    def gram(self, ell: int) -> np.ndarray:
        return self.sectors[ell].op.gram


def _sorted_eig(a):
    try:
        w, vl, vr = sla.eig(a, left=True, right=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise NumericalFailure(f"eigensolver failed: {exc}") from exc
    order = np.lexsort((-w.imag, -w.real))
    return w[order], vl[:, order], vr[:, order]


def eig_sector(op: SectorOperator, refine: bool = True, refine_factor: float = 1.5) -> SectorSpectrum:
    """Dense eigensolve of -L on interior nodes with H^k duals and refinement flags."""
    idx = op.interior
    a = -op.L[np.ix_(idx, idx)]
    w, vl, vr = _sorted_eig(a)
    g = op.gram[np.ix_(idx, idx)]
    # dual of v_j: G^{-1} conj(y_j) scaled so that v_j^T G psi_j = 1
    scale = np.einsum("ij,ij->j", vl.conj(), vr)
    psi_int = np.linalg.solve(g, vl.conj() / scale[None, :])
    n = op.grid.n
    right = np.zeros((n, len(w)), dtype=complex)
    left = np.zeros((n, len(w)), dtype=complex)
    right[idx] = vr
    left[idx] = psi_int
    stable = np.zeros(len(w), dtype=bool)
    refined = None
    if refine:
        grid = op.grid
        fine = RadialGrid(int(round(refine_factor * grid.n)), grid.scale, grid.r_max)
        fop = assemble(op.ell, fine, op.k)
        fidx = fop.interior
        try:
            refined = sla.eigvals(-fop.L[np.ix_(fidx, fidx)])
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise NumericalFailure(f"eigensolver failed: {exc}") from exc
        stable = np.array([np.min(np.abs(refined - z)) < REFINE_TOL for z in w])
    return SectorSpectrum(op, w, right, left, stable, refined)


def measure_gap(spectra):
    """Spectral gap from refinement-stable eigenvalues across sectors.

    Eigenvalues with real part above -1e-6 form the unstable set; the gap is
    the largest delta_g below 1/16 leaving every other stable eigenvalue in
    Re lambda <= -delta_g / 2.  Returns (delta_g, counts, info).
    """
    counts = {}
    worst = -np.inf
    for sp in spectra:
        z = sp.eigenvalues[sp.refinement_stable]
        unstable = z.real > -NEUTRAL_TOL
        counts[sp.ell] = int(np.sum(unstable))
        rest = z[~unstable]
        if rest.size:
            worst = max(worst, float(np.max(rest.real)))
    info = {"largest_stable_real_part": worst}
    if worst == -np.inf:
        return GAP_CAP, counts, info
    gap = min(-2.0 * worst, GAP_CAP)
    if gap <= 0:
        info["reason"] = "stable eigenvalues accumulate at the imaginary axis"
        return 0.0, counts, info
    return gap, counts, info


def _unstable_block(sp: SectorSpectrum, delta_g: float) -> UnstableBlock:
    op = sp.op
    idx = op.interior
    n = op.grid.n
    sel = sp.refinement_stable & (sp.eigenvalues.real > min(-0.5 * delta_g, -NEUTRAL_TOL))
    z = sp.eigenvalues[sel]
    vr = sp.right[:, sel]
    vl = sp.left[:, sel]
    g = op.gram
    cols, duals, vals = [], [], []
    for j, lam in enumerate(z):
        if abs(lam.imag) <= 1e-12 * max(1.0, abs(lam)):
            v = vr[:, j].real.copy()
            y = vl[:, j].real.copy()
            # sign: largest-magnitude entry positive; unit H^k norm
            v *= np.sign(v[np.argmax(np.abs(v))])
            v /= np.sqrt(v @ g @ v)
            cols.append(v)
            duals.append(y)
            vals.append(lam.real)
        elif lam.imag > 0:
            cols += [vr[:, j].real, vr[:, j].imag]
            duals += [vl[:, j].real, vl[:, j].imag]
            vals += [lam, np.conj(lam)]
    if not cols:
        return UnstableBlock(op.ell, np.array([]), np.zeros((n, 0)), np.zeros((n, 0)), np.zeros((0, 0)))
    phi = np.array(cols).T
    y = np.array(duals).T
    # re-dualize in the real basis: psi = Y (phi^T G Y)^{-1}
    psi = y @ np.linalg.inv(phi.T @ g @ y)
    a = -op.L[np.ix_(idx, idx)]
    lphi = np.zeros_like(phi)
    lphi[idx] = a @ phi[idx]
    jmat = psi.T @ g @ lphi
    return UnstableBlock(op.ell, np.array(vals), phi, psi, jmat)


def decompose(grid: RadialGrid, ell_max: int = 2, k: int = 2, refine: bool = True) -> SpectralDecomposition:
    """Eigen-decompose sectors 0..ell_max, measure the gap and extract unstable blocks."""
    spectra = [eig_sector(assemble(ell, grid, k), refine=refine) for ell in range(ell_max + 1)]
    delta_g, counts, _ = measure_gap(spectra)
    dec = SpectralDecomposition(grid, k, delta_g, {sp.ell: sp for sp in spectra}, {}, counts)
    for sp in spectra:
        dec.unstable[sp.ell] = _unstable_block(sp, delta_g)
    return dec


def _as_sector_dict(f):
    return f if isinstance(f, dict) else {0: f}


def riesz_project(decomp: SpectralDecomposition, f):
    """(P_u f, f - P_u f); f is a sector array or a dict ell -> sector array."""
    single = not isinstance(f, dict)
    fd = _as_sector_dict(f)
    up, st = {}, {}
    for ell, vals in fd.items():
        blk = decomp.unstable[ell]
        vals = np.asarray(vals, dtype=float)
        c = blk.psi.T @ (decomp.gram(ell) @ vals)
        up[ell] = blk.phi @ c
        st[ell] = vals - up[ell]
    return (up[0], st[0]) if single else (up, st)


def unstable_coefficients(decomp: SpectralDecomposition, f, ell: int = 0):
    """(f, psi_j)_{H^k} for the unstable duals of a sector."""
    blk = decomp.unstable[ell]
    return blk.psi.T @ (decomp.gram(ell) @ np.asarray(f, dtype=float))


# ---------------------------------------------------------------------------
# Smooth cutoff


def _smooth_step(t):
    """C-infinity step: 0 for t <= 0, 1 for t >= 1, built from e^{-1/t}."""
    t = np.asarray(t, dtype=float)
    a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
    b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1.0 - t, 1.0)), 0.0)
    return a / (a + b)


def cutoff(r, radius: float = 1.0):
    """chi(r / radius): 1 on |y| <= radius, 0 on |y| >= 2 radius."""
    r = np.asarray(r, dtype=float) / radius
    return 1.0 - _smooth_step(r - 1.0)


# ---------------------------------------------------------------------------
# Modified unstable space


@dataclass(eq=False)
class ModifiedBlock:
    ell: int
    m_r: np.ndarray
    phi_tilde: np.ndarray  # (n, N), supported in r <= 2R
    jordan: np.ndarray  # real block form of -P~_u L P_u in coordinates
    basis: np.ndarray  # S with jmat = S jordan S^{-1}
    condition: float


@dataclass(eq=False)
class ModifiedUnstableSpace:
    decomp: SpectralDecomposition
    radius: float
    blocks: dict


def real_jordan_form(jmat, delta_g: float):
    """S, T with jmat = S T S^{-1}, T real block upper triangular.

    Complex 2x2 blocks are rotated to [[a, -b], [b, a]] and the off-diagonal
    part is scaled below delta_g / 10.
    """
    n = jmat.shape[0]
    if n == 0:
        return np.zeros((0, 0)), np.zeros((0, 0))
    t, z = sla.schur(jmat, output="real")
    # diagonal blocks
    blocks = []
    i = 0
    while i < n:
        if i + 1 < n and abs(t[i + 1, i]) > 0:
            blocks.append((i, 2))
            i += 2
        else:
            blocks.append((i, 1))
            i += 1
    v = np.eye(n)
    for start, size in blocks:
        if size == 2:
            b = t[start : start + 2, start : start + 2]
            w, vec = np.linalg.eig(b)
            k = int(np.argmax(w.imag))
            u = vec[:, k]
            v[start : start + 2, start : start + 2] = np.column_stack([u.real, u.imag])
    s = z @ v
    t = np.linalg.solve(s, jmat @ s)
    # scale block rows/cols by eta^block_index so couplings shrink
    bidx = np.zeros(n)
    for j, (start, size) in enumerate(blocks):
        bidx[start : start + size] = j
    off = np.abs(np.triu(t, 1))
    for start, size in blocks:
        off[start : start + size, start : start + size] = 0.0
    target = delta_g / 10.0
    eta = 1.0
    if off.max() > target and target > 0:
        eta = target / off.max()
    d = eta**bidx
    s = s * d[None, :]
    t = (t * d[None, :]) / d[:, None]
    return s, t


def build_modified(decomp: SpectralDecomposition, radius: float, max_condition: float = 1e6) -> ModifiedUnstableSpace:
    """Cutoff-localized unstable modes phi~ = M_R^{-1} (chi_R phi) per sector."""
    if radius <= 0:
        raise ValueError("cutoff radius must be positive")
    grid = decomp.grid
    chi = cutoff(np.where(grid.finite, grid.r, np.inf), radius)
    blocks = {}
    for ell, blk in decomp.unstable.items():
        if blk.size == 0:
            continue
        g = decomp.gram(ell)
        cphi = chi[:, None] * blk.phi
        m_r = cphi.T @ g @ blk.psi  # M[i, j] = (chi phi_i, psi_j)
        cond = float(np.linalg.cond(m_r))
        if not np.isfinite(cond) or cond > max_condition:
            raise ValueError(f"M_R is numerically singular (cond {cond:.2e}); try a larger R than {radius}")
        phi_t = cphi @ np.linalg.inv(m_r).T
        s, t = real_jordan_form(blk.jmat, decomp.delta_g)
        blocks[ell] = ModifiedBlock(ell, m_r, phi_t, t, s, cond)
    return ModifiedUnstableSpace(decomp, float(radius), blocks)


def modified_project(space: ModifiedUnstableSpace, f, ell: int = 0):
    """P~_u f = sum_j (f, psi_j) phi~_j."""
    c = unstable_coefficients(space.decomp, f, ell)
    return space.blocks[ell].phi_tilde @ c


def b_coordinates(space: ModifiedUnstableSpace, f, ell: int = 0, tol: float = 1e-8):
    """Coordinates of f in the rescaled real Jordan basis of the modified span."""
    blk = space.blocks[ell]
    f = np.asarray(f, dtype=float)
    w = unstable_coefficients(space.decomp, f, ell)
    resid = f - blk.phi_tilde @ w
    scale = max(np.sqrt(abs(f @ space.decomp.gram(ell) @ f)), 1e-300)
    if np.sqrt(abs(resid @ space.decomp.gram(ell) @ resid)) > tol * scale:
        raise ValueError("field is not in the modified unstable span")
    return np.linalg.solve(blk.basis, w)


def b_inner(space: ModifiedUnstableSpace, f, g, ell: int = 0) -> float:
    return float(b_coordinates(space, f, ell) @ b_coordinates(space, g, ell))


def b_norm_from_coefficients(space: ModifiedUnstableSpace, w, ell: int = 0) -> float:
    """B~ norm of sum_j w_j phi~_j without forming the field."""
    return float(np.linalg.norm(np.linalg.solve(space.blocks[ell].basis, w)))
