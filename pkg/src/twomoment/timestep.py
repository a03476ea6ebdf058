"""Time-step control and SSP / IMEX integrators with limiter interleaving.

The realizability time-step bound combines, per element, the spatial bound
(1-v) C^i |K_x^i|, the energy bound (1-v) gamma w-hat |K_eps| / (alpha_eps
eps_H), and, in one spatial dimension, the source bound
(1/2) gamma (1-v)/|dv/dx|.  The convex budget across active mechanisms is
allocated optimally (harmonic combination); the literal equal split is
available as a mode.

Every stage of every integrator is followed by the realizability limiter
and, when enabled, the energy limiter (with the element-energy snapshot
taken before limiting).  Boundary fluxes are accumulated with the stage
weights of the Shu-Osher convex combinations so the number ledger closes
to round-off.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dg import MomentField
from .limiters import (
    LimiterConfig,
    element_number_energy,
    energy_limiter,
    realizability_limiter,
)
from .mesh import PhaseSpaceMesh
from .moments import ConservedMoments, OpacitySpec, PrimitiveMoments, Velocity, primitive_to_conserved
from .solvers import SolveKind, SolverConfig, fixed_point_solve

__all__ = [
    "CflSpec",
    "ImexTableau",
    "StepReport",
    "compute_dt",
    "explicit_step",
    "imex_step",
    "SSPRK_STAGES",
]

# Shu-Osher convex-combination coefficients (a, b) per stage:
#   u <- a * u^n + b * (u_prev + dt L(u_prev)),
# with the resulting effective flux weights per stage listed alongside.
SSPRK_STAGES = {
    "fe": {"stages": [(0.0, 1.0)], "flux_weights": [1.0]},
    "ssprk2": {"stages": [(0.0, 1.0), (0.5, 0.5)], "flux_weights": [0.5, 0.5]},
    "ssprk3": {
        "stages": [(0.0, 1.0), (0.75, 0.25), (1.0 / 3.0, 2.0 / 3.0)],
        "flux_weights": [1.0 / 6.0, 1.0 / 6.0, 2.0 / 3.0],
    },
}

SAFEGUARD_DENSITY = 1e-40


@dataclass(frozen=True)
class CflSpec:
    cfl_safety: float = 0.9
    gamma_mode: str = "optimal"  # or "equal": equal split over active mechanisms
    beta: tuple | None = None  # per-direction spatial weights (equal if None)

    def __post_init__(self):
        if not 0.0 < self.cfl_safety <= 1.0:
            raise ValueError("cfl_safety must lie in (0, 1]")
        if self.gamma_mode not in ("optimal", "equal"):
            raise ValueError("gamma_mode must be 'optimal' or 'equal'")
        if self.beta is not None:
            b = np.asarray(self.beta, dtype=float)
            if np.any(b <= 0) or not np.isclose(b.sum(), 1.0):
                raise ValueError("beta weights must be positive and sum to 1")


def _element_speed_max(mesh: PhaseSpaceMesh, vel) -> np.ndarray:
    """Max |v| per spatial element over nodes and adjacent face values."""
    d_x = mesh.d_x
    node_axes = tuple(range(d_x, 2 * d_x))
    speed = vel.speed_nodes.max(axis=node_axes)
    for d in range(d_x):
        vhat = np.linalg.norm(vel.vhat[d], axis=-1)
        # reduce transverse node axes, keep the face axis
        if d_x == 2:
            vhat = vhat.max(axis=-1)
        lo = np.moveaxis(np.moveaxis(vhat, d, 0)[:-1], 0, d)
        hi = np.moveaxis(np.moveaxis(vhat, d, 0)[1:], 0, d)
        speed = np.maximum(speed, np.maximum(lo, hi))
    return speed


def compute_dt(mesh: PhaseSpaceMesh, vel, cfl: CflSpec = CflSpec()) -> float:
    """Largest time step satisfying the realizability restriction."""
    d_x = mesh.d_x
    what = mesh.tables.what_end
    speed = _element_speed_max(mesh, vel)
    if np.any(speed >= 1.0):
        raise ValueError("velocity must stay below 1")
    one_minus = 1.0 - speed

    node_axes = tuple(range(d_x, 2 * d_x))
    alpha = vel.alpha_eps.max(axis=node_axes)
    eps_ratio = float((mesh.eps_widths / mesh.eps_hi).min())

    widths = []
    for d in range(d_x):
        w = mesh.x_widths[d]
        shape = [1] * d_x
        shape[d] = w.size
        widths.append(w.reshape(shape))

    with np.errstate(divide="ignore"):
        bound_eps = np.where(alpha > 0.0, one_minus * what * eps_ratio / np.where(alpha > 0, alpha, 1.0), np.inf)
        if d_x == 1:
            dvmax = np.abs(vel.dv_nodes[..., 0, 0]).max(axis=node_axes)
            bound_src = np.where(dvmax > 0.0, 0.5 * one_minus / np.where(dvmax > 0, dvmax, 1.0), np.inf)
        else:
            bound_src = np.full_like(one_minus, np.inf)

        beta = np.full(d_x, 1.0 / d_x) if cfl.beta is None else np.asarray(cfl.beta, dtype=float)
        if cfl.gamma_mode == "equal":
            bound_x = np.min(
                np.stack([one_minus * what * widths[d] * beta[d] for d in range(d_x)]), axis=0
            )
            active = 1 + np.isfinite(bound_eps).astype(int) * (bound_eps < np.inf) + (
                bound_src < np.inf
            ).astype(int)
            gamma = 1.0 / active
            dt_elem = gamma * np.minimum(bound_x, np.minimum(bound_eps, bound_src))
        else:
            inv = sum(1.0 / (one_minus * what * widths[d]) for d in range(d_x))
            inv = inv + np.where(np.isinf(bound_eps), 0.0, 1.0 / bound_eps)
            inv = inv + np.where(np.isinf(bound_src), 0.0, 1.0 / bound_src)
            dt_elem = 1.0 / inv
    return float(cfl.cfl_safety * dt_elem.min())


@dataclass(frozen=True)
class ImexTableau:
    """Generic diagonally-implicit IMEX tableau (explicit part strictly
    lower triangular)."""

    a_exp: np.ndarray
    w_exp: np.ndarray
    a_imp: np.ndarray
    w_imp: np.ndarray

    def __post_init__(self):
        a_exp = np.asarray(self.a_exp, dtype=float)
        a_imp = np.asarray(self.a_imp, dtype=float)
        w_exp = np.asarray(self.w_exp, dtype=float)
        w_imp = np.asarray(self.w_imp, dtype=float)
        s = a_exp.shape[0]
        if a_exp.shape != (s, s) or a_imp.shape != (s, s):
            raise ValueError("tableau matrices must be square and matching")
        if w_exp.shape != (s,) or w_imp.shape != (s,):
            raise ValueError("weight vectors must have one entry per stage")
        if np.any(np.triu(a_exp) != 0.0):
            raise ValueError("explicit part must be strictly lower triangular")
        if np.any(np.triu(a_imp, 1) != 0.0):
            raise ValueError("implicit part must be lower triangular")
        object.__setattr__(self, "a_exp", a_exp)
        object.__setattr__(self, "a_imp", a_imp)
        object.__setattr__(self, "w_exp", w_exp)
        object.__setattr__(self, "w_imp", w_imp)

    @property
    def stages(self) -> int:
        return self.a_exp.shape[0]


# forward-backward Euler expressed as a 2-stage tableau (analysis default)
FBE = ImexTableau(
    a_exp=[[0.0, 0.0], [1.0, 0.0]],
    w_exp=[1.0, 0.0],
    a_imp=[[0.0, 0.0], [0.0, 1.0]],
    w_imp=[0.0, 1.0],
)


@dataclass
class StepReport:
    theta_u_min: float = 1.0
    theta_u_mean: float = 1.0
    safeguard_count: int = 0
    number_out: float = 0.0
    energy_out: float = 0.0
    energy_residual: float = 0.0
    limited_elements: int = 0


def _safeguard(field: MomentField) -> int:
    """Replace elements with non-positive average density by a near-vacuum
    isotropic state; returns the number of repaired elements."""
    avg = field.cell_averages()
    bad = avg[..., 0] <= 0.0
    if not np.any(bad):
        return 0
    sel = bad[(...,) + (None,) * (field.u.ndim - bad.ndim)]
    iso = np.zeros(4)
    iso[0] = SAFEGUARD_DENSITY
    field.u[...] = np.where(sel, iso, field.u)
    return int(bad.sum())


def _post_stage(field: MomentField, cfg: LimiterConfig, report: StepReport) -> None:
    """Safeguard, snapshot, realizability limiter, energy limiter."""
    report.safeguard_count += _safeguard(field)
    v_nodes = field.node_velocity()
    if cfg.energy_limiter_enabled:
        _, e_hat = element_number_energy(field.mesh, field.u, v_nodes)
    rep = realizability_limiter(field.mesh, field.u, cfg)
    report.theta_u_min = min(report.theta_u_min, rep.theta_u_min)
    report.theta_u_mean = min(report.theta_u_mean, rep.theta_u_mean)
    report.limited_elements += rep.limited_elements
    if cfg.energy_limiter_enabled:
        erep = energy_limiter(field.mesh, field.u, e_hat, v_nodes, cfg)
        report.energy_residual = max(report.energy_residual, erep.max_residual)
    field.m_nodes = None  # caches are stale


def explicit_step(
    field: MomentField,
    dt: float,
    scheme: str = "ssprk2",
    limiter: LimiterConfig = LimiterConfig(),
) -> StepReport:
    """Advance one explicit SSP step (fe, ssprk2, or ssprk3) in place."""
    try:
        tab = SSPRK_STAGES[scheme]
    except KeyError:
        raise ValueError(f"unknown scheme '{scheme}'") from None
    report = StepReport()
    u0 = field.u.copy()
    for (a, b), wf in zip(tab["stages"], tab["flux_weights"]):
        rhs, sample = field.assemble_rhs()
        report.number_out += wf * dt * sample.number_out
        report.energy_out += wf * dt * sample.energy_out
        field.u[...] = a * u0 + b * (field.u + dt * rhs)
        _post_stage(field, limiter, report)
    return report


def _collision_term(m_packed: np.ndarray, opac: OpacitySpec) -> np.ndarray:
    c = np.empty_like(m_packed)
    c[..., 0] = opac.chi * (opac.d0 - m_packed[..., 0])
    c[..., 1:] = -opac.kappa * m_packed[..., 1:]
    return c


def _implicit_solve(field: MomentField, u_star: np.ndarray, dt_c: float, opac: OpacitySpec):
    v = field.node_velocity()
    m, rep = fixed_point_solve(
        SolveKind.COLLISION,
        ConservedMoments.from_packed(u_star),
        Velocity(v),
        field.solver,
        spec=field.closure,
        dt=dt_c,
        opac=opac,
    )
    if not rep.converged.all():
        raise RuntimeError(
            f"collision solver failed at {int((~rep.converged).sum())} nodes "
            f"(max residual {float(rep.residual.max()):.3e})"
        )
    u = primitive_to_conserved(m, Velocity(v), field.closure).packed()
    return u, m.packed()


def imex_step(
    field: MomentField,
    dt: float,
    opac: OpacitySpec,
    tableau: ImexTableau = FBE,
    limiter: LimiterConfig = LimiterConfig(),
) -> StepReport:
    """One IMEX step: explicit phase-space advection, node-local implicit
    collisions, limiters after every stage that changes the field.

    Stiffly-accurate tableaus (final weights equal to the last stage row,
    e.g. forward-backward Euler) finish on the limited last stage; otherwise
    the weighted recombination is followed by one more limiter pass.
    """
    report = StepReport()
    u0 = field.u.copy()
    s = tableau.stages
    b_stages: list = [None] * s
    c_stages: list = [None] * s
    stiffly_accurate = np.array_equal(tableau.w_exp, tableau.a_exp[-1]) and np.array_equal(
        tableau.w_imp, tableau.a_imp[-1]
    )

    for i in range(s):
        u_star = u0
        changed = False
        for j in range(i):
            if tableau.a_exp[i, j] != 0.0:
                u_star = u_star + dt * tableau.a_exp[i, j] * b_stages[j]
                changed = True
            if tableau.a_imp[i, j] != 0.0:
                u_star = u_star + dt * tableau.a_imp[i, j] * c_stages[j]
                changed = True
        # realizability is restored before the node-local implicit solve,
        # mirroring the forward/backward Euler sequence it generalizes
        if changed:
            field.u[...] = u_star
            field.m_nodes = None
            _post_stage(field, limiter, report)
        need_c = bool(np.any(tableau.a_imp[i + 1 :, i] != 0.0)) or (
            not stiffly_accurate and tableau.w_imp[i] != 0.0
        )
        aii = tableau.a_imp[i, i]
        if aii != 0.0 and opac.kappa > 0.0:
            u_new, m_new = _implicit_solve(field, field.u, aii * dt, opac)
            field.u[...] = u_new
            field.m_nodes = None
            if need_c:
                c_stages[i] = _collision_term(m_new, opac)
            _post_stage(field, limiter, report)
        elif need_c:
            if field.m_nodes is None:
                field.refresh_primitives()
            c_stages[i] = _collision_term(field.m_nodes, opac)
        need_b = bool(np.any(tableau.a_exp[i + 1 :, i] != 0.0)) or tableau.w_exp[i] != 0.0
        if need_b:
            rhs, sample = field.assemble_rhs()
            b_stages[i] = rhs
            report.number_out += tableau.w_exp[i] * dt * sample.number_out
            report.energy_out += tableau.w_exp[i] * dt * sample.energy_out

    if not stiffly_accurate:
        u_final = u0
        for i in range(s):
            if tableau.w_exp[i] != 0.0 and b_stages[i] is not None:
                u_final = u_final + dt * tableau.w_exp[i] * b_stages[i]
            if tableau.w_imp[i] != 0.0 and c_stages[i] is not None:
                u_final = u_final + dt * tableau.w_imp[i] * c_stages[i]
        field.u[...] = u_final
        field.m_nodes = None
        _post_stage(field, limiter, report)
    return report
