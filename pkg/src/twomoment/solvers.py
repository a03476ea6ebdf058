"""Realizability-preserving fixed-point solvers.

Two node-local nonlinear systems arise when evolving the conserved moments:
recovering primitives from conserved moments, and the implicit collision
update.  Both are posed as damped (Richardson-style) fixed-point maps whose
iterates stay realizable for damping lambda <= 1/(1+v), and solved with
Picard iteration or Anderson acceleration.  Everything here is batched:
a solve over an array of nodes runs as one vectorized iteration with
per-node convergence tracking.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .closure import APPROXIMATE, ClosureSpec
from .moments import (
    ConservedMoments,
    OpacitySpec,
    PrimitiveMoments,
    Velocity,
    _vk_contract,
)

__all__ = [
    "Engine",
    "SolveKind",
    "SolverConfig",
    "SolveReport",
    "conversion_operator",
    "collision_operator",
    "fixed_point_solve",
    "random_realizable",
    "CONTRACTION_SPEED_LIMIT",
]

# Contraction of both fixed-point maps is certified for |v| below this bound.
CONTRACTION_SPEED_LIMIT = np.sqrt(2.0) - 1.0


class Engine(Enum):
    PICARD = "picard"
    ANDERSON = "anderson"


class SolveKind(Enum):
    CONVERSION = "conversion"
    COLLISION = "collision"


@dataclass(frozen=True)
class SolverConfig:
    engine: Engine = Engine.ANDERSON
    memory: int = 1
    tol: float = 1e-8
    max_iter: int = 200
    # None selects lambda = 1/(1+v); a float in (0, 1] fixes it.
    fixed_lambda: float | None = None

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.memory < 1:
            raise ValueError("memory must be >= 1")
        if self.fixed_lambda is not None and not (0.0 < self.fixed_lambda <= 1.0):
            raise ValueError("fixed lambda must lie in (0, 1]")

    def lam(self, speed: np.ndarray) -> np.ndarray:
        if self.fixed_lambda is not None:
            return np.full_like(np.asarray(speed, dtype=float), self.fixed_lambda)
        return 1.0 / (1.0 + np.asarray(speed, dtype=float))


@dataclass(frozen=True)
class SolveReport:
    """Per-node solve record; fields mirror the batch shape of the inputs."""

    iterations: np.ndarray
    converged: np.ndarray
    residual: np.ndarray
    realizable_every_iterate: np.ndarray
    contraction_certified: np.ndarray


def _gamma(m: np.ndarray) -> np.ndarray:
    return m[..., 0] - np.linalg.norm(m[..., 1:4], axis=-1)


def _conversion_map(m, u, v, lam, spec):
    d, i = m[..., 0], m[..., 1:4]
    out = np.empty_like(m)
    out[..., 0] = d - lam * (d + np.einsum("...k,...k->...", v, i) - u[..., 0])
    out[..., 1:] = i - lam[..., None] * (i + _vk_contract(d, i, v, spec) - u[..., 1:])
    return out


def _collision_map(m, u_star, v, dt, opac, lam, spec):
    d, i = m[..., 0], m[..., 1:4]
    mu_chi = 1.0 / (1.0 + lam * dt * opac.chi)
    mu_kap = 1.0 / (1.0 + lam * dt * opac.kappa)
    out = np.empty_like(m)
    out[..., 0] = mu_chi * (
        (1.0 - lam) * d
        + lam * (-np.einsum("...k,...k->...", v, i) + u_star[..., 0] + dt * opac.chi * opac.d0)
    )
    out[..., 1:] = mu_kap[..., None] * (
        (1.0 - lam[..., None]) * i + lam[..., None] * (-_vk_contract(d, i, v, spec) + u_star[..., 1:])
    )
    return out


def conversion_operator(
    moments: PrimitiveMoments,
    conserved: ConservedMoments,
    vel: Velocity,
    lam,
    spec: ClosureSpec = APPROXIMATE,
) -> PrimitiveMoments:
    """One application of the damped conversion map H_U(M)."""
    lam = np.asarray(lam, dtype=float)
    out = _conversion_map(moments.packed(), conserved.packed(), vel.v, lam, spec)
    return PrimitiveMoments.from_packed(out)


def collision_operator(
    moments: PrimitiveMoments,
    conserved_star: ConservedMoments,
    vel: Velocity,
    dt: float,
    opac: OpacitySpec,
    lam,
    spec: ClosureSpec = APPROXIMATE,
) -> PrimitiveMoments:
    """One application of the damped implicit-collision map Q(M)."""
    if opac.kappa < opac.chi:
        raise ValueError("kappa >= chi is required")
    lam = np.asarray(lam, dtype=float)
    out = _collision_map(moments.packed(), conserved_star.packed(), vel.v, dt, opac, lam, spec)
    return PrimitiveMoments.from_packed(out)


def _solve_packed(op, m0, u_norm, cfg: SolverConfig):
    """Batched fixed-point driver on packed (..., 4) arrays.

    Anderson memory-1 uses the two-point residual extrapolation; iterates
    that leave the realizable set fall back to the plain Picard step.
    Returns (m, iterations, converged, residual, realizable_every).
    """
    batch = m0.shape[:-1]
    m = m0.reshape(-1, 4).copy()
    npts = m.shape[0]
    tol_scaled = cfg.tol * u_norm.reshape(-1)

    iters = np.zeros(npts, dtype=int)
    converged = np.zeros(npts, dtype=bool)
    residual = np.full(npts, np.inf)
    realizable_every = _gamma(m) >= -1e-12 * np.abs(m[..., 0])

    anderson = cfg.engine is Engine.ANDERSON
    g_prev = None
    r_prev = None

    active = np.arange(npts)
    for _ in range(cfg.max_iter):
        if active.size == 0:
            break
        ma = m[active]
        g = op(ma, active)
        if anderson and r_prev is not None:
            r = g - ma
            dr = r - r_prev
            denom = np.einsum("pc,pc->p", dr, dr)
            theta = np.where(denom > 0.0, np.einsum("pc,pc->p", r, dr) / np.where(denom > 0.0, denom, 1.0), 0.0)
            m_new = g - theta[:, None] * (g - g_prev)
            # safeguard: reject non-realizable extrapolations
            bad = _gamma(m_new) < 0.0
            if np.any(bad):
                m_new[bad] = g[bad]
            r_prev, g_prev = r, g
        else:
            m_new = g
            if anderson:
                r_prev, g_prev = g - ma, g
        step = np.linalg.norm(m_new - ma, axis=-1)
        realizable_every[active] &= _gamma(m_new) >= -1e-12 * np.abs(m_new[..., 0])
        m[active] = m_new
        iters[active] += 1
        residual[active] = step
        done = step <= tol_scaled[active]
        if np.any(done):
            converged[active[done]] = True
            keep = ~done
            active = active[keep]
            if anderson and r_prev is not None:
                r_prev, g_prev = r_prev[keep], g_prev[keep]

    return (
        m.reshape(batch + (4,)),
        iters.reshape(batch),
        converged.reshape(batch),
        residual.reshape(batch),
        realizable_every.reshape(batch),
    )


def fixed_point_solve(
    kind: SolveKind,
    conserved: ConservedMoments,
    vel: Velocity,
    cfg: SolverConfig = SolverConfig(),
    spec: ClosureSpec = APPROXIMATE,
    dt: float | None = None,
    opac: OpacitySpec | None = None,
    initial: PrimitiveMoments | None = None,
):
    """Solve for primitive moments; returns (PrimitiveMoments, SolveReport).

    For CONVERSION the target is U = L(M, v) M; for COLLISION it is the
    backward-Euler system U = U* + dt C(U), with ``conserved`` playing the
    role of U*.  The default initial guess is M = U.
    """
    u = conserved.packed()
    batch = u.shape[:-1]
    v = np.broadcast_to(vel.v, batch + (3,))
    speed = np.linalg.norm(v, axis=-1)
    lam = cfg.lam(speed)

    if kind is SolveKind.COLLISION:
        if dt is None or opac is None:
            raise ValueError("collision solve requires dt and opacities")
        if opac.kappa < opac.chi:
            raise ValueError("kappa >= chi is required")

    m0 = u.copy() if initial is None else np.broadcast_to(initial.packed(), u.shape).copy()
    u_norm = np.linalg.norm(u, axis=-1)

    u_flat = u.reshape(-1, 4)
    v_flat = v.reshape(-1, 3)
    lam_flat = lam.reshape(-1)

    if kind is SolveKind.CONVERSION:
        def op(ma, active):
            return _conversion_map(ma, u_flat[active], v_flat[active], lam_flat[active], spec)
    else:
        def op(ma, active):
            return _collision_map(ma, u_flat[active], v_flat[active], dt, opac, lam_flat[active], spec)

    m, iters, conv, res, realiz = _solve_packed(op, m0, u_norm, cfg)
    report = SolveReport(
        iterations=iters,
        converged=conv,
        residual=res,
        realizable_every_iterate=realiz,
        contraction_certified=speed < CONTRACTION_SPEED_LIMIT,
    )
    return PrimitiveMoments.from_packed(m), report


def random_realizable(rng, h_max: float = 1.0, d_range=(0.5, 2.0), size=()) -> PrimitiveMoments:
    """Random realizable moment: D uniform, h uniform in [0, h_max], direction
    uniform on the sphere.  ``rng`` is a seed or a numpy Generator."""
    if h_max > 1.0:
        raise ValueError("h_max must be <= 1")
    gen = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if isinstance(size, int):
        size = (size,)
    d = gen.uniform(d_range[0], d_range[1], size=size)
    h = gen.uniform(0.0, h_max, size=size)
    n = gen.normal(size=size + (3,))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return PrimitiveMoments(d, (d * h)[..., None] * n)


def random_unit_vector(rng, size=()) -> np.ndarray:
    """Uniform direction on the sphere (helper shared by scans and benches)."""
    gen = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    if isinstance(size, int):
        size = (size,)
    n = gen.normal(size=size + (3,))
    return n / np.linalg.norm(n, axis=-1, keepdims=True)
