"""Realizability-enforcing limiter and the energy-restoring sweep.

The realizability limiter blends nodal moments toward the (realizable) cell
average until gamma = N - |G| is nonnegative on the full check set: the DG
nodes plus the Lobatto auxiliary points in every dimension.  It preserves
the element-integrated Eulerian number exactly.  The energy limiter then
walks each spatial column in energy, rescaling element pairs to restore the
column-integrated Eulerian energy to its pre-limiter value while keeping
the column-integrated number fixed.

Feasibility comparisons carry a relative roundoff slack of ``feas_tol``
(default 1e-15 of the local number scale); data algebraically on the
realizable boundary would otherwise trip on the last bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dg import element_integral
from .mesh import PhaseSpaceMesh

__all__ = [
    "LimiterConfig",
    "LimiterReport",
    "EnergyLimiterReport",
    "realizability_limiter",
    "element_number_energy",
    "compute_correction",
    "energy_limiter",
]


@dataclass(frozen=True)
class LimiterConfig:
    delta_small: float = 1e-10  # flux shrink in the non-realizable-average branch
    theta_min: float = -0.5  # damping floor for pairwise energy corrections
    energy_tol_rel: float = 1e-14  # |dE| tolerance relative to the column scale
    energy_limiter_enabled: bool = True
    bisection_iters: int = 12
    feas_tol: float = 1e-15

    def __post_init__(self):
        if self.theta_min <= -1.0:
            raise ValueError("theta_min must exceed -1")


@dataclass
class LimiterReport:
    theta_n_min: float
    theta_u_min: float
    theta_u_mean: float
    limited_elements: int
    fallback_elements: int


@dataclass
class EnergyLimiterReport:
    max_residual: float
    corrected_columns: int


def _aux_values(mesh: PhaseSpaceMesh, u: np.ndarray):
    """Nodal values plus per-dimension Lobatto-point values, flattened to
    (n_elems, n_points, 4) blocks."""
    nel = int(np.prod(mesh.elem_shape))
    ndim = 1 + mesh.d_x
    blocks = [u.reshape(nel, -1, 4)]
    for dim in range(ndim):
        node_axis = 1 + mesh.d_x + dim
        vals = np.tensordot(u, mesh.tables.to_lgl, axes=([node_axis], [1]))
        # tensordot appends the LGL axis after the component axis; restore order
        vals = np.moveaxis(vals, -1, node_axis)
        blocks.append(vals.reshape(nel, -1, 4))
    return np.concatenate(blocks, axis=1)


def _gamma(pts: np.ndarray) -> np.ndarray:
    return pts[..., 0] - np.linalg.norm(pts[..., 1:4], axis=-1)


def realizability_limiter(
    mesh: PhaseSpaceMesh, u: np.ndarray, cfg: LimiterConfig = LimiterConfig()
) -> LimiterReport:
    """Enforce pointwise realizability on the node + Lobatto check set.

    Mutates ``u`` in place and returns the limiter statistics.  Requires
    every cell-averaged number density to be positive.
    """
    nel = int(np.prod(mesh.elem_shape))
    avg = (element_integral(mesh, u) / mesh.volumes[..., None]).reshape(nel, 4)
    n_avg = avg[:, 0]
    if np.any(n_avg <= 0.0):
        raise ValueError("cell-averaged number density must be positive")

    u_flat = u.reshape(nel, -1, 4)
    feas = cfg.feas_tol * n_avg

    pts = _aux_values(mesh, u)
    theta_n = np.ones(nel)
    min_n = pts[..., 0].min(axis=1)
    neg = min_n < 0.0
    if np.any(neg):
        theta_n[neg] = n_avg[neg] / (n_avg[neg] - min_n[neg])
        u_flat[neg, :, 0] = (
            theta_n[neg, None] * (u_flat[neg, :, 0] - n_avg[neg, None]) + n_avg[neg, None]
        )
        pts = _aux_values(mesh, u)

    avg_realizable = _gamma(avg) >= -feas
    theta_u = np.ones(nel)

    # convex blend toward the cell average where any check point is infeasible
    gam_min = _gamma(pts).min(axis=1)
    fix = avg_realizable & (gam_min < -feas)
    if np.any(fix):
        p = pts[fix]
        a = avg[fix][:, None, :]
        f = feas[fix]
        lo = np.zeros(fix.sum())
        hi = np.ones(fix.sum())
        for _ in range(cfg.bisection_iters):
            mid = 0.5 * (lo + hi)
            g = _gamma(mid[:, None, None] * (p - a) + a).min(axis=1)
            ok = g >= -f
            lo = np.where(ok, mid, lo)
            hi = np.where(ok, hi, mid)
        theta_u[fix] = lo
        u_flat[fix] = lo[:, None, None] * (u_flat[fix] - avg[fix][:, None, :]) + avg[fix][:, None, :]

    # non-realizable average: flatten N and shrink fluxes onto the average
    fallback = ~avg_realizable
    if np.any(fallback):
        theta_u[fallback] = 0.0
        g = u_flat[fallback, :, 1:]
        gnorm = np.linalg.norm(g, axis=-1, keepdims=True)
        direction = np.where(gnorm > 0.0, g / np.where(gnorm > 0.0, gnorm, 1.0), 0.0)
        u_flat[fallback, :, 0] = n_avg[fallback, None]
        u_flat[fallback, :, 1:] = (
            (1.0 - cfg.delta_small) * n_avg[fallback, None, None] * direction
        )

    limited = int(np.sum(theta_u < 1.0))
    return LimiterReport(
        theta_n_min=float(theta_n.min()),
        theta_u_min=float(theta_u.min()),
        theta_u_mean=float(theta_u.mean()),
        limited_elements=limited,
        fallback_elements=int(fallback.sum()),
    )


def element_number_energy(mesh: PhaseSpaceMesh, u: np.ndarray, v_nodes: np.ndarray):
    """Element-integrated Eulerian number and energy:
    N = int N e^2, E = int (N + v.G) e^3 over each element."""
    n_density = u[..., 0]
    e_density = u[..., 0] + np.einsum("...k,...k->...", v_nodes, u[..., 1:4])
    w2 = mesh.quad_weights_eps(2)
    w3 = mesh.quad_weights_eps(3)
    if mesh.d_x == 1:
        wx = mesh.quad_weights_x(0)
        number = np.einsum("Ea,Xb,EXab->EX", w2, wx, n_density)
        energy = np.einsum("Ea,Xb,EXab->EX", w3, wx, e_density)
    else:
        wx, wy = mesh.quad_weights_x(0), mesh.quad_weights_x(1)
        number = np.einsum("Ea,Xb,Yc,EXYabc->EXY", w2, wx, wy, n_density)
        energy = np.einsum("Ea,Xb,Yc,EXYabc->EXY", w3, wx, wy, e_density)
    return number, energy


def compute_correction(n1, e1, n2, e2, de, theta_min: float = -0.5):
    """Pairwise redistribution factors (theta1, theta2) solving
    theta1 N1 + theta2 N2 = 0 and theta1 E1 + theta2 E2 = -dE, damped so
    min(theta1, theta2) >= theta_min; singular systems return zeros."""
    n1, e1, n2, e2, de = np.broadcast_arrays(
        *(np.asarray(x, dtype=float) for x in (n1, e1, n2, e2, de))
    )
    det = n1 * e2 - n2 * e1
    scale = np.abs(n1 * e2) + np.abs(n2 * e1)
    ok = np.abs(det) > 1e-14 * np.where(scale > 0, scale, 1.0)
    safe_det = np.where(ok, det, 1.0)
    th1 = np.where(ok, n2 * de / safe_det, 0.0)
    th2 = np.where(ok, -n1 * de / safe_det, 0.0)
    tmin = np.minimum(th1, th2)
    damp = tmin < theta_min
    g = np.where(damp, theta_min / np.where(damp, tmin, 1.0), 1.0)
    return th1 * g, th2 * g


def energy_limiter(
    mesh: PhaseSpaceMesh,
    u: np.ndarray,
    e_hat: np.ndarray,
    v_nodes: np.ndarray,
    cfg: LimiterConfig = LimiterConfig(),
) -> EnergyLimiterReport:
    """Forward/backward pairwise sweep in energy restoring each spatial
    column's integrated energy to the pre-limiter snapshot ``e_hat``.

    Mutates ``u`` in place; scalings are number-neutral by construction and
    strictly positive, so realizability is unaffected.
    """
    n_eps = mesh.n_eps
    if n_eps < 2:
        return EnergyLimiterReport(0.0, 0)

    number, energy = element_number_energy(mesh, u, v_nodes)
    ncol = int(np.prod(mesh.elem_shape[1:]))
    n = number.reshape(n_eps, ncol).copy()
    e = energy.reshape(n_eps, ncol).copy()
    ehat = e_hat.reshape(n_eps, ncol)
    u_cols = u.reshape((n_eps, ncol) + u.shape[1 + mesh.d_x :])

    col_scale = np.abs(ehat).sum(axis=0)
    tol = cfg.energy_tol_rel * np.where(col_scale > 0, col_scale, 1.0)
    needs = np.abs((e - ehat).sum(axis=0)) > tol
    if not np.any(needs):
        return EnergyLimiterReport(float(np.abs((e - ehat).sum(axis=0)).max()), 0)

    def apply_pair(i, j, de, active):
        th_i, th_j = compute_correction(n[i], e[i], n[j], e[j], de, cfg.theta_min)
        th_i = np.where(active, th_i, 0.0)
        th_j = np.where(active, th_j, 0.0)
        fi = np.maximum(1.0 + th_i, 1e-30)
        fj = np.maximum(1.0 + th_j, 1e-30)
        shape = (ncol,) + (1,) * (u_cols.ndim - 2)
        u_cols[i] *= fi.reshape(shape)
        u_cols[j] *= fj.reshape(shape)
        de = de + th_i * e[i] + th_j * e[j]
        n[i] *= fi
        e[i] *= fi
        n[j] *= fj
        e[j] *= fj
        return de

    de = e[0] - ehat[0]
    for idx in range(n_eps - 1):
        de = de + e[idx + 1] - ehat[idx + 1]
        active = needs & (np.abs(de) > tol)
        if np.any(active):
            de = apply_pair(idx, idx + 1, de, active)
    # full backward sweep (no early exit), mopping up any damped remainder
    for idx in range(n_eps - 2, 0, -1):
        active = needs & (np.abs(de) > tol)
        if not np.any(active):
            break
        de = apply_pair(idx, idx - 1, de, active)

    return EnergyLimiterReport(float(np.abs(de).max()), int(needs.sum()))
