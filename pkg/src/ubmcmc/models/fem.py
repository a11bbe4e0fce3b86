"""Piecewise-linear finite elements for -(phi(t) h'(t))' = f(t) on an
interval with zero Dirichlet boundary values.

Uniform mesh with M elements of width delta.  Hat-function gradients are
constant per element, so the stiffness entries only need the permeability
phi at element midpoints:

    A[i, i]   = (phi_mid[i-1] + phi_mid[i]) / delta      (interior node i)
    A[i, i+1] = -phi_mid[i] / delta

The load uses the trapezoid rule, f_i = delta * f(t_i).  The system is
symmetric positive definite whenever phi > 0, and is solved with a banded
Cholesky factorization in O(M).
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded, solveh_banded

from ..errors import IntegratorError


def stiffness_banded(phi_mid: np.ndarray, delta: float) -> np.ndarray:
    """Upper banded form (2, M-1) of the interior stiffness matrix.

    ``phi_mid``: permeability at the M element midpoints.  Row 0 holds the
    superdiagonal (shifted right, as solveh_banded expects), row 1 the
    diagonal.
    """
    m = phi_mid.shape[0]
    if m < 2:
        raise ValueError(f"need at least 2 elements, got {m}")
    ab = np.empty((2, m - 1))
    ab[1, :] = (phi_mid[:-1] + phi_mid[1:]) / delta
    ab[0, 0] = 0.0
    ab[0, 1:] = -phi_mid[1:-1] / delta
    return ab


def solve_dirichlet(phi_mid: np.ndarray, delta: float, load: np.ndarray) -> np.ndarray:
    """Nodal FEM solution (all M+1 nodes, boundary zeros included).

    ``load``: right-hand side entries for the M-1 interior nodes.
    """
    ab = stiffness_banded(phi_mid, delta)
    try:
        interior = solveh_banded(ab, load)
    except np.linalg.LinAlgError as exc:
        raise IntegratorError(
            "stiffness matrix is not positive definite (permeability "
            "non-positive somewhere on the mesh?)"
        ) from exc
    full = np.zeros(phi_mid.shape[0] + 1)
    full[1:-1] = interior
    return full


def solve_dirichlet_with_sensitivities(
    phi_mid: np.ndarray,
    delta: float,
    load: np.ndarray,
    dphi_mids: "list[np.ndarray]",
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Nodal solution plus its derivatives along permeability directions.

    For A(phi) u = f, the sensitivity along a permeability perturbation
    dphi is du = -A^-1 dA(dphi) u; one Cholesky factorization serves the
    solve and every sensitivity.  Returns full nodal vectors (boundary
    zeros included) for the solution and each direction in ``dphi_mids``.
    """
    ab = stiffness_banded(phi_mid, delta)
    try:
        cb = cholesky_banded(ab)
    except np.linalg.LinAlgError as exc:
        raise IntegratorError(
            "stiffness matrix is not positive definite (permeability "
            "non-positive somewhere on the mesh?)"
        ) from exc
    interior = cho_solve_banded((cb, False), load)
    m = phi_mid.shape[0]
    full = np.zeros(m + 1)
    full[1:-1] = interior

    sensitivities = []
    for dphi in dphi_mids:
        dab = stiffness_banded(dphi, delta)
        rhs = -_banded_matvec(dab, interior)
        dfull = np.zeros(m + 1)
        dfull[1:-1] = cho_solve_banded((cb, False), rhs)
        sensitivities.append(dfull)
    return full, sensitivities


def _banded_matvec(ab: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Symmetric tridiagonal product from the upper banded form."""
    out = ab[1] * v
    out[:-1] += ab[0, 1:] * v[1:]
    out[1:] += ab[0, 1:] * v[:-1]
    return out


def trapezoid_load(f_interior: np.ndarray, delta: float) -> np.ndarray:
    """Load vector <f, hat_i> by the trapezoid rule: delta * f(t_i)."""
    return delta * f_interior


def interpolate(nodal: np.ndarray, delta: float, points: np.ndarray) -> np.ndarray:
    """Evaluate the piecewise-linear interpolant of nodal values.

    ``points`` must lie inside [0, (len(nodal)-1) * delta].
    """
    s = np.asarray(points) / delta
    idx = np.minimum(s.astype(int), nodal.shape[0] - 2)
    frac = s - idx
    return (1.0 - frac) * nodal[idx] + frac * nodal[idx + 1]
