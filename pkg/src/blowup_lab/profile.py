"""Closed forms for the stationary profile Q(y) = 4(6+|y|^2)/(2+|y|^2)^2 and its companions.

All functions accept points as an array whose last axis has length 3, or radii
for the ``*_radial`` helpers. Nothing here touches a grid except
``profile_residual`` and ``truncated_mass``.
"""

from __future__ import annotations

from enum import Enum

import numpy as np


class ProfileField(str, Enum):
    Q = "Q"
    GRAD_Q = "GradQ"
    LAMBDA_Q = "LambdaQ"
    INV_LAP_Q = "InvLapQ"
    GRAD_INV_LAP_Q = "GradInvLapQ"
    LERAY_BUOYANCY3 = "LerayBuoyancy3"


# radial forms, r may be an array; r = inf is allowed and gives the limit


def q_radial(r):
    r = np.asarray(r, dtype=float)
    r2 = r * r
    with np.errstate(invalid="ignore"):
        out = 4.0 * (6.0 + r2) / (2.0 + r2) ** 2
    return np.where(np.isinf(r), 0.0, out)


def dq_radial(r):
    """dQ/dr = -8r(10+r^2)/(2+r^2)^3."""
    r = np.asarray(r, dtype=float)
    r2 = r * r
    with np.errstate(invalid="ignore"):
        out = -8.0 * r * (10.0 + r2) / (2.0 + r2) ** 3
    return np.where(np.isinf(r), 0.0, out)


def lambda_q_radial(r):
    """Lambda Q = 2Q + r Q' = 16(6 - r^2)/(2+r^2)^3."""
    r = np.asarray(r, dtype=float)
    r2 = r * r
    with np.errstate(invalid="ignore"):
        out = 16.0 * (6.0 - r2) / (2.0 + r2) ** 3
    return np.where(np.isinf(r), 0.0, out)


def inv_lap_q_radial(r):
    """Potential with Laplacian Q, gauge F(0) = 2 log 2."""
    r = np.asarray(r, dtype=float)
    return 2.0 * np.log(2.0 + r * r)


def drift_radial(r):
    """Radial component of grad(inv_lap Q): 4r/(2+r^2)."""
    r = np.asarray(r, dtype=float)
    with np.errstate(invalid="ignore"):
        out = 4.0 * r / (2.0 + r * r)
    return np.where(np.isinf(r), 0.0, out)


# pointwise forms on R^3


def _points(y):
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != 3:
        raise ValueError("points must have a trailing axis of length 3")
    return y


def profile_q(y):
    y = _points(y)
    return q_radial(np.linalg.norm(y, axis=-1))


def grad_q(y):
    y = _points(y)
    r2 = np.sum(y * y, axis=-1)
    coef = -8.0 * (10.0 + r2) / (2.0 + r2) ** 3
    return coef[..., None] * y


def lambda_q(y):
    y = _points(y)
    return 2.0 * profile_q(y) + np.sum(y * grad_q(y), axis=-1)


def inv_lap_q(y):
    y = _points(y)
    return 2.0 * np.log(2.0 + np.sum(y * y, axis=-1))


def grad_inv_lap_q(y):
    y = _points(y)
    r2 = np.sum(y * y, axis=-1)
    return (4.0 / (2.0 + r2))[..., None] * y


def inv_lap_d3_q(y):
    """inv_lap(d_3 Q) = d_3 inv_lap(Q) = 4 y_3/(2+r^2)."""
    y = _points(y)
    r2 = np.sum(y * y, axis=-1)
    return 4.0 * y[..., 2] / (2.0 + r2)


def leray_buoyancy3(y):
    """Third component of the Leray projection of Q e_3: 8(2+y_3^2)/(2+r^2)^2."""
    y = _points(y)
    r2 = np.sum(y * y, axis=-1)
    return 8.0 * (2.0 + y[..., 2] ** 2) / (2.0 + r2) ** 2


_EVALUATORS = {
    ProfileField.Q: profile_q,
    ProfileField.GRAD_Q: grad_q,
    ProfileField.LAMBDA_Q: lambda_q,
    ProfileField.INV_LAP_Q: inv_lap_q,
    ProfileField.GRAD_INV_LAP_Q: grad_inv_lap_q,
    ProfileField.LERAY_BUOYANCY3: leray_buoyancy3,
}


def eval_profile(kind, y):
    """Evaluate one of the closed-form profile fields at y (shape (..., 3))."""
    return _EVALUATORS[ProfileField(kind)](y)


def profile_residual(grid) -> float:
    """Max of |Delta Q + div(Q grad inv_lap Q) - Lambda Q / 2| over the grid nodes.

    Q and the drift 4r/(2+r^2) come from the closed forms; all derivatives are
    taken with the grid's differentiation matrices.
    """
    if grid.n < 8:
        raise ValueError(f"grid too coarse: {grid.n} nodes (need at least 8)")
    q = q_radial(grid.r)
    flux = q * drift_radial(grid.r)
    lap_q = grid.laplacian(0) @ q
    div_flux = grid.divergence_radial(flux)
    scaling = 2.0 * q + grid.rD(1) @ q
    residual = lap_q + div_flux - 0.5 * scaling
    return float(np.max(np.abs(residual)))


def truncated_mass(radius: float, nodes: int = 400) -> float:
    """Integral of Q over the ball of given radius (Gauss-Legendre in r)."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    x, w = np.polynomial.legendre.leggauss(nodes)
    # split at r = 4 so the core and the 4/r^2 tail are both resolved
    total = 0.0
    for a, b in ((0.0, min(radius, 4.0)), (min(radius, 4.0), radius)):
        if b <= a:
            continue
        r = 0.5 * (b - a) * (x + 1.0) + a
        total += 0.5 * (b - a) * np.sum(w * q_radial(r) * r * r)
    return 4.0 * np.pi * total
