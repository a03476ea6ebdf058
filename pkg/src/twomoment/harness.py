"""Benchmark problems, runners, and CSV emission.

Five PDE benchmarks (sine-wave streaming, Gaussian diffusion, streaming
Doppler shift, transparent shock, transparent vortex) plus the solver
iteration study.  Each run writes versioned CSV files and a manifest
(config echo, build id, wall time) into its output directory and returns a
summary dict of the headline metrics.

Configs are flat ``key = value`` text files; unknown keys are errors.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import BalanceLedger, rms_energy
from .closure import APPROXIMATE, EXACT, ClosureSpec
from .dg import MomentField, element_integral, project_velocity
from .limiters import LimiterConfig
from .mesh import BCKind, BoundaryCondition, build_mesh, lagrange_matrix
from .moments import OpacitySpec, PrimitiveMoments, Velocity, primitive_to_conserved
from .solvers import (
    Engine,
    SolveKind,
    SolverConfig,
    fixed_point_solve,
    random_unit_vector,
)
from .timestep import CflSpec, compute_dt, explicit_step, imex_step

__all__ = [
    "ProblemSpec",
    "PROBLEMS",
    "parse_config",
    "problem_from_config",
    "run",
    "convergence_study",
    "solver_bench",
    "CSV_SCHEMAS",
    "write_csv",
]

OUTDIR_ENV = "TWOMOMENT_OUTDIR"

CSV_SCHEMAS = {
    "balance": ("t", "dN_int", "dN_ext", "dN_sum", "dE_int", "dE_ext", "dE_sum"),
    "spectra": ("x_probe", "eps", "D", "D_analytic"),
    "rms": ("x", "eps_rms", "eps_rms_analytic"),
    "conv": ("N", "k", "error_L2", "fitted_order"),
    "violation": ("v_max", "rel_energy_violation", "energy_limiter"),
    "bench": ("v", "h", "engine", "lambda_rule", "guess", "mean_iterations", "failures"),
    "wavespeed": ("v", "h", "lambda_max"),
    "wavespeed3d": ("v", "lambda_max", "samples"),
    "bounds": ("closure", "h", "psi", "psi_prime", "phi1", "phi2", "g"),
    "lipschitz": ("samples", "ratio_dD", "ratio_dI"),
    "fields1d": ("eps", "x", "D", "I1", "I2", "I3", "N", "G1", "G2", "G3"),
    "fields2d": ("eps", "x", "y", "D", "I1", "I2", "I3", "N", "G1", "G2", "G3"),
    "fluxdiff": ("y", "flux_in", "flux_out", "rel_diff"),
}


def write_csv(path, kind: str, rows) -> None:
    """Write rows under the versioned schema ``kind`` (deterministic text)."""
    cols = CSV_SCHEMAS[kind]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for row in rows:
            out = []
            for x in row:
                out.append(repr(float(x)) if isinstance(x, (float, np.floating)) else str(x))
            writer.writerow(out)


def fermi_dirac(eps):
    return 1.0 / (np.exp(np.asarray(eps, dtype=float) / 3.0 - 3.0) + 1.0)


def doppler_shift_factor(v_obs_minus_src: float) -> float:
    """s = sqrt((1+dv)/(1-dv)) for the relative velocity between the frame
    observing a spectrum and the frame where it was imposed."""
    dv = v_obs_minus_src
    return float(np.sqrt((1.0 + dv) / (1.0 - dv)))


@dataclass(frozen=True)
class ProblemSpec:
    """One benchmark configuration (documented ranges per problem)."""

    name: str
    n_x: int = 32
    n_y: int = 32
    n_eps: int = 16
    degree: int = 2
    v_max: float = 0.1
    shock_h: float = 1e-3
    closure: str = "approximate"
    realizability_limiter: bool = True
    energy_limiter: bool = True
    t_end: float | None = None
    cfl_mode: str = "theorem1"  # or "benchmark03": dt = 0.3 |K|/(k+1)
    cfl_safety: float = 0.9
    cfl_factor: float = 1.0  # extra dt reduction (e.g. 1/25 for the Gaussian study)
    sigma: float = 3.2e3
    solver_tol: float = 1e-10
    output: str = "out"
    seed: int = 0
    record_every: int = 1

    def closure_spec(self) -> ClosureSpec:
        return EXACT if self.closure == "exact" else APPROXIMATE


PROBLEMS = (
    "sine_wave_streaming",
    "gaussian_diffusion",
    "streaming_doppler_shift",
    "transparent_shock",
    "transparent_vortex",
    "solver_bench",
)

_CONFIG_TYPES = {
    "name": str,
    "problem": str,
    "n_x": int,
    "n_y": int,
    "n_eps": int,
    "degree": int,
    "v_max": float,
    "shock_h": float,
    "closure": str,
    "realizability_limiter": bool,
    "energy_limiter": bool,
    "t_end": float,
    "cfl_mode": str,
    "cfl_safety": float,
    "cfl_factor": float,
    "sigma": float,
    "solver_tol": float,
    "output": str,
    "seed": int,
    "record_every": int,
}


def parse_config(path) -> dict:
    """Flat ``key = value`` parser; '#' comments; unknown keys are errors."""
    out = {}
    for ln, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{ln}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_TYPES:
            raise ValueError(f"{path}:{ln}: unknown key '{key}'")
        typ = _CONFIG_TYPES[key]
        if typ is bool:
            if value.lower() not in ("true", "false", "on", "off", "1", "0"):
                raise ValueError(f"{path}:{ln}: boolean expected for '{key}'")
            out[key] = value.lower() in ("true", "on", "1")
        else:
            out[key] = typ(value)
    return out


def problem_from_config(path) -> ProblemSpec:
    cfg = parse_config(path)
    name = cfg.pop("problem", None) or cfg.pop("name", None)
    if name is None:
        raise ValueError("config must set 'problem'")
    if name not in PROBLEMS:
        raise ValueError(f"unknown problem '{name}'")
    cfg.pop("name", None)
    return ProblemSpec(name=name, **cfg)


def _outdir(spec: ProblemSpec) -> Path:
    root = os.environ.get(OUTDIR_ENV, "")
    out = Path(root) / spec.output if root else Path(spec.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(outdir: Path, spec: ProblemSpec, wall: float, summary: dict) -> None:
    lines = [f"build_id = twomoment-{__version__}", f"wall_time_s = {wall:.3f}"]
    for f in fields(spec):
        lines.append(f"{f.name} = {getattr(spec, f.name)}")
    for k in sorted(summary):
        lines.append(f"summary.{k} = {summary[k]}")
    (outdir / "manifest.txt").write_text("\n".join(lines) + "\n")


def _limiter_config(spec: ProblemSpec) -> LimiterConfig:
    return LimiterConfig(energy_limiter_enabled=spec.energy_limiter)


def _solver_config(spec: ProblemSpec) -> SolverConfig:
    return SolverConfig(engine=Engine.ANDERSON, tol=spec.solver_tol, max_iter=500)


def _inflow_profile(d_fn, hfac, v_boundary, spec: ProblemSpec):
    """Conserved-moment inflow profile from comoving data D(eps), I = hfac D e_x."""

    def profile(eps, *transverse):
        eps = np.asarray(eps, dtype=float)
        shape = np.broadcast(eps, *transverse).shape if transverse else eps.shape
        d = np.broadcast_to(d_fn(eps), shape)
        i = np.zeros(shape + (3,))
        i[..., 0] = hfac * d
        m = PrimitiveMoments(d, i)
        vel = Velocity(np.broadcast_to(v_boundary, shape + (3,)))
        return primitive_to_conserved(m, vel, spec.closure_spec()).packed()

    return profile


# ---------------------------------------------------------------------------
# problem builders


def _build_sine(spec: ProblemSpec):
    mesh = build_mesh([0.0, 1.0], [np.linspace(0.0, 1.0, spec.n_x + 1)], spec.degree)
    vel = project_velocity(mesh, _const_v([spec.v_max, 0.0, 0.0]))
    x = mesh.x_nodes[0]
    d = 0.5 + 0.49 * np.sin(2.0 * np.pi * x)
    m = np.zeros(mesh.elem_shape + mesh.node_shape + (4,))
    m[..., 0] = d[None, :, None, :]
    m[..., 1] = d[None, :, None, :]
    f = MomentField.from_primitives(mesh, vel, m, spec.closure_spec(), _solver_config(spec))
    return f, OpacitySpec(), "ssprk2" if spec.degree == 1 else "ssprk3"


def _build_gaussian(spec: ProblemSpec):
    mesh = build_mesh([0.0, 1.0], [np.linspace(0.0, 3.0, spec.n_x + 1)], spec.degree)
    vel = project_velocity(mesh, _const_v([spec.v_max, 0.0, 0.0]))
    kd = 1.0 / (3.0 * spec.sigma)
    x0, t0 = 1.0, 5.0
    x = mesh.x_nodes[0]
    d = np.exp(-((x - x0) ** 2) / (4.0 * t0 * kd))
    i1 = -kd * (-(x - x0) / (2.0 * t0 * kd)) * d  # -kd dD/dx
    d = np.maximum(d, 1e-40)
    m = np.zeros(mesh.elem_shape + mesh.node_shape + (4,))
    m[..., 0] = d[None, :, None, :]
    m[..., 1] = i1[None, :, None, :]
    f = MomentField.from_primitives(mesh, vel, m, spec.closure_spec(), _solver_config(spec))
    return f, OpacitySpec(chi=0.0, sigma=spec.sigma), "imex"


def _doppler_velocity(v_max):
    def fn(x):
        x = np.asarray(x, dtype=float)
        v = np.zeros(x.shape + (3,))
        ramp = np.sin(2.0 * np.pi * (x - 2.0) / 6.0) ** 2
        v1 = np.where(
            x < 2.0,
            0.0,
            np.where(
                x < 3.5,
                v_max * ramp,
                np.where(x < 6.5, v_max, np.where(x < 8.0, v_max * ramp, 0.0)),
            ),
        )
        v[..., 0] = v1
        return v

    return fn


def _build_doppler(spec: ProblemSpec):
    out = BoundaryCondition(BCKind.OUTFLOW)
    inflow = BoundaryCondition(
        BCKind.INFLOW,
        _inflow_profile(fermi_dirac, 0.999, np.zeros(3), spec),
    )
    mesh = build_mesh(
        np.linspace(0.0, 50.0, spec.n_eps + 1),
        [np.linspace(0.0, 10.0, spec.n_x + 1)],
        spec.degree,
        bc=[(inflow, out)],
    )
    vel = project_velocity(mesh, _doppler_velocity(spec.v_max))
    m = np.zeros(mesh.elem_shape + mesh.node_shape + (4,))
    m[..., 0] = 1e-40
    f = MomentField.from_primitives(mesh, vel, m, spec.closure_spec(), _solver_config(spec))
    return f, OpacitySpec(), "ssprk3"


def _build_shock(spec: ProblemSpec):
    v_max, height = spec.v_max, spec.shock_h

    def fn(x):
        x = np.asarray(x, dtype=float)
        v = np.zeros(x.shape + (3,))
        v[..., 0] = 0.5 * v_max * (1.0 - np.tanh((x - 1.0) / height))
        return v

    out = BoundaryCondition(BCKind.OUTFLOW)
    inflow = BoundaryCondition(
        BCKind.INFLOW,
        _inflow_profile(fermi_dirac, 0.999, np.array([v_max, 0.0, 0.0]), spec),
    )
    mesh = build_mesh(
        np.linspace(0.0, 50.0, spec.n_eps + 1),
        [np.linspace(0.0, 2.0, spec.n_x + 1)],
        spec.degree,
        bc=[(inflow, out)],
    )
    vel = project_velocity(mesh, fn)
    m = np.zeros(mesh.elem_shape + mesh.node_shape + (4,))
    m[..., 0] = 1e-8
    f = MomentField.from_primitives(mesh, vel, m, spec.closure_spec(), _solver_config(spec))
    return f, OpacitySpec(), "ssprk3"


def _vortex_velocity(v_max):
    def fn(x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        shape = np.broadcast(x, y).shape
        v = np.zeros(shape + (3,))
        bell = np.exp(0.5 * (1.0 - (x * x + y * y)))
        v[..., 0] = -v_max * y * bell
        v[..., 1] = v_max * x * bell
        return v

    return fn


def _build_vortex(spec: ProblemSpec):
    out = BoundaryCondition(BCKind.OUTFLOW)
    inflow = BoundaryCondition(
        BCKind.INFLOW,
        _inflow_profile(lambda e: 0.05 * fermi_dirac(e), 0.95, np.zeros(3), spec),
    )
    mesh = build_mesh(
        np.linspace(0.0, 50.0, spec.n_eps + 1),
        [np.linspace(-5.0, 5.0, spec.n_x + 1), np.linspace(-5.0, 5.0, spec.n_y + 1)],
        spec.degree,
        bc=[(inflow, out), (out, out)],
    )
    vel = project_velocity(mesh, _vortex_velocity(spec.v_max))
    m = np.zeros(mesh.elem_shape + mesh.node_shape + (4,))
    m[..., 0] = 1e-8
    f = MomentField.from_primitives(mesh, vel, m, spec.closure_spec(), _solver_config(spec))
    return f, OpacitySpec(), "ssprk3"


def _const_v(vec):
    vec = np.asarray(vec, dtype=float)

    def fn(*coords):
        shape = np.broadcast(*coords).shape if len(coords) > 1 else np.shape(coords[0])
        return np.broadcast_to(vec, shape + (3,))

    return fn


_BUILDERS = {
    "sine_wave_streaming": _build_sine,
    "gaussian_diffusion": _build_gaussian,
    "streaming_doppler_shift": _build_doppler,
    "transparent_shock": _build_shock,
    "transparent_vortex": _build_vortex,
}

_DEFAULT_T_END = {
    "sine_wave_streaming": 1.0,
    "gaussian_diffusion": 30.0,
    "streaming_doppler_shift": 20.0,
    "transparent_shock": 3.0,
    "transparent_vortex": 20.0,
}


def _choose_dt(spec: ProblemSpec, field: MomentField) -> float:
    if spec.cfl_mode == "benchmark03":
        width = float(field.mesh.x_widths[0].min())
        dt = 0.3 * width / (spec.degree + 1)
    elif spec.cfl_mode == "theorem1":
        dt = compute_dt(field.mesh, field.vel, CflSpec(cfl_safety=spec.cfl_safety))
    else:
        raise ValueError(f"unknown cfl_mode '{spec.cfl_mode}'")
    return dt * spec.cfl_factor


def _evolve(spec: ProblemSpec, field: MomentField, opac, scheme, t_end, ledger=None):
    """March to t_end; returns aggregate step diagnostics."""
    dt = _choose_dt(spec, field)
    limiter = _limiter_config(spec)
    v_nodes = field.node_velocity()
    if ledger is not None:
        ledger.initialize(field.mesh, field.u, v_nodes)
    t, step_idx = 0.0, 0
    agg = {"safeguard_count": 0, "theta_u_min": 1.0, "steps": 0, "max_abs_dn_sum": 0.0}
    while t < t_end - 1e-12:
        dt_step = min(dt, t_end - t)
        if scheme == "imex":
            rep = imex_step(field, dt_step, opac, limiter=limiter)
        else:
            rep = explicit_step(field, dt_step, scheme, limiter)
        t += dt_step
        step_idx += 1
        agg["safeguard_count"] += rep.safeguard_count
        agg["theta_u_min"] = min(agg["theta_u_min"], rep.theta_u_min)
        if ledger is not None:
            ledger.add_outflow(rep.number_out, rep.energy_out)
            if step_idx % spec.record_every == 0 or t >= t_end - 1e-12:
                row = ledger.record(t, field.mesh, field.u, v_nodes)
                denom = max(abs(row[1]), 1e-300)
                agg["max_abs_dn_sum"] = max(agg["max_abs_dn_sum"], abs(row[3]) / denom)
    agg["steps"] = step_idx
    agg["dt"] = dt
    return agg


# ---------------------------------------------------------------------------
# probing helpers


def _eval_at_x(field: MomentField, x_probe: float) -> np.ndarray:
    """Primitive moments interpolated to x = x_probe: shape (NE, ne, 4).

    The element containing the probe owns it; a probe on a face belongs to
    the element on its left.
    """
    mesh = field.mesh
    edges = mesh.space_edges[0]
    e = int(np.searchsorted(edges, x_probe, side="left") - 1)
    e = min(max(e, 0), mesh.n_x[0] - 1)
    xi = 2.0 * (x_probe - edges[e]) / (edges[e + 1] - edges[e]) - 1.0
    basis = lagrange_matrix(mesh.tables.lg_points, np.array([xi]))[0]
    if field.m_nodes is None:
        field.refresh_primitives()
    return np.einsum("x,Eaxc->Eac", basis, field.m_nodes[:, e])


def _energy_integrated_density(mesh, d_eps_nodes) -> float:
    """4 pi int D eps^2 deps of spectral nodal data (NE, ne)."""
    return float(4.0 * np.pi * np.sum(mesh.quad_weights_eps(2) * d_eps_nodes))


def _rms_of_spectrum_fn(fn, lo=0.0, hi=50.0, n=20001) -> float:
    eps = np.linspace(lo, hi, n)
    d = fn(eps)
    num = np.trapz(d * eps**5, eps)
    den = np.trapz(d * eps**3, eps)
    return float(np.sqrt(num / den))


# ---------------------------------------------------------------------------
# runners


def run(spec: ProblemSpec) -> dict:
    """Run one benchmark, write its CSV outputs and manifest, and return the
    summary metrics."""
    if spec.name == "solver_bench":
        return solver_bench(spec)
    t_start = time.perf_counter()
    outdir = _outdir(spec)
    t_end = spec.t_end if spec.t_end is not None else _DEFAULT_T_END[spec.name]
    field, opac, scheme = _BUILDERS[spec.name](spec)
    ledger = BalanceLedger()
    agg = _evolve(spec, field, opac, scheme, t_end, ledger)

    write_csv(outdir / "balance.csv", "balance", ledger.rows)
    summary = {
        "steps": agg["steps"],
        "dt": agg["dt"],
        "safeguard_count": agg["safeguard_count"],
        "theta_u_min": agg["theta_u_min"],
        "number_balance_rel": agg["max_abs_dn_sum"],
    }
    final = ledger.rows[-1]
    if abs(final[4]) > 0:
        summary["energy_violation_rel"] = final[6] / final[4]
    else:
        summary["energy_violation_rel"] = 0.0

    if spec.name == "sine_wave_streaming":
        summary.update(_sine_metrics(spec, field, t_end, outdir))
    elif spec.name == "gaussian_diffusion":
        summary.update(_gaussian_metrics(spec, field, t_end, outdir))
    elif spec.name == "streaming_doppler_shift":
        summary.update(_doppler_metrics(spec, field, outdir))
    elif spec.name == "transparent_shock":
        summary.update(_shock_metrics(spec, field, outdir))
    elif spec.name == "transparent_vortex":
        summary.update(_vortex_metrics(spec, field, outdir))

    _write_fields(spec, field, outdir)
    _write_manifest(outdir, spec, time.perf_counter() - t_start, summary)
    return summary


def _write_fields(spec, field, outdir):
    mesh = field.mesh
    if field.m_nodes is None:
        field.refresh_primitives()
    m, u = field.m_nodes, field.u
    rows = []
    if mesh.d_x == 1:
        eps = np.broadcast_to(mesh.eps_nodes[:, None, :, None], u.shape[:-1])
        x = np.broadcast_to(mesh.x_nodes[0][None, :, None, :], u.shape[:-1])
        flat = lambda a: a.reshape(-1)
        cols = [flat(eps), flat(x)] + [flat(m[..., c]) for c in range(4)] + [
            flat(u[..., c]) for c in range(4)
        ]
        rows = list(zip(*cols))
        write_csv(outdir / "fields.csv", "fields1d", rows)
    else:
        eps = np.broadcast_to(
            mesh.eps_nodes[:, None, None, :, None, None], u.shape[:-1]
        )
        x = np.broadcast_to(mesh.x_nodes[0][None, :, None, None, :, None], u.shape[:-1])
        y = np.broadcast_to(mesh.x_nodes[1][None, None, :, None, None, :], u.shape[:-1])
        flat = lambda a: a.reshape(-1)
        cols = [flat(eps), flat(x), flat(y)] + [flat(m[..., c]) for c in range(4)] + [
            flat(u[..., c]) for c in range(4)
        ]
        rows = list(zip(*cols))
        write_csv(outdir / "fields.csv", "fields2d", rows)


def _sine_metrics(spec, field, t_end, outdir) -> dict:
    mesh = field.mesh
    if field.m_nodes is None:
        field.refresh_primitives()
    x = mesh.x_nodes[0]
    exact = 0.5 + 0.49 * np.sin(2.0 * np.pi * (x - t_end))
    d = field.m_nodes[0, :, 0, :, 0]  # single energy bin: any energy node
    w = mesh.quad_weights_x(0)
    err = float(np.sqrt(np.sum(w * (d - exact) ** 2)))
    peak = float(d.max())
    return {"error_L2": err, "peak": peak, "peak_err_rel": abs(peak - 0.99) / 0.99}


def _gaussian_metrics(spec, field, t_end, outdir) -> dict:
    mesh = field.mesh
    if field.m_nodes is None:
        field.refresh_primitives()
    kd = 1.0 / (3.0 * spec.sigma)
    x0, t0, v = 1.0, 5.0, spec.v_max
    x = mesh.x_nodes[0]
    shift = np.mod(x - v * t_end - x0 + 1.5, 3.0) - 1.5
    exact = np.sqrt(t0 / (t0 + t_end)) * np.exp(-(shift**2) / (4.0 * (t0 + t_end) * kd))
    d = field.m_nodes[0, :, 0, :, 0]
    w = mesh.quad_weights_x(0)
    err = float(np.sqrt(np.sum(w * (d - exact) ** 2)))
    return {
        "error_L2": err,
        "peak": float(d.max()),
        "peak_ratio": float(d.max()),
        "amplitude_factor_expected": float(np.sqrt(t0 / (t0 + t_end))),
    }


def _doppler_metrics(spec, field, outdir) -> dict:
    mesh = field.mesh
    x_probe = 5.0
    m_probe = _eval_at_x(field, x_probe)  # (NE, ne, 4)
    d_probe = m_probe[..., 0]
    s = doppler_shift_factor(spec.v_max)
    d_analytic = lambda e: s * s * fermi_dirac(s * np.asarray(e))

    rows = []
    for e in range(mesh.n_eps):
        for a in range(mesh.degree + 1):
            eps = mesh.eps_nodes[e, a]
            rows.append((x_probe, eps, d_probe[e, a], float(d_analytic(eps))))
    write_csv(outdir / "spectra.csv", "spectra", rows)

    rms_num = rms_energy(mesh, d_probe)
    rms_ana = _rms_of_spectrum_fn(d_analytic)
    rel = abs(rms_num - rms_ana) / rms_ana

    rms_rows = []
    vel_fn = _doppler_velocity(spec.v_max)
    for e, xc in enumerate(0.5 * (mesh.space_edges[0][:-1] + mesh.space_edges[0][1:])):
        m_x = _eval_at_x(field, xc)
        v_here = float(vel_fn(np.array(xc))[0])
        s_here = doppler_shift_factor(v_here)
        ana = _rms_of_spectrum_fn(lambda u: s_here**2 * fermi_dirac(s_here * np.asarray(u)))
        rms_rows.append((xc, rms_energy(mesh, m_x[..., 0]), ana))
    write_csv(outdir / "rms.csv", "rms", rms_rows)
    return {"eps_rms": rms_num, "eps_rms_analytic": rms_ana, "eps_rms_rel_err": rel}


def _shock_metrics(spec, field, outdir) -> dict:
    mesh = field.mesh
    # post-shock comoving density vs the special-relativistic shift of the
    # inflow spectrum; relative frame velocity = 0 - v_max
    m_post = _eval_at_x(field, 1.5)
    d_tot = _energy_integrated_density(mesh, m_post[..., 0])
    s = doppler_shift_factor(-spec.v_max)
    d_in = lambda e: fermi_dirac(e)
    eps = np.linspace(0.0, 50.0, 20001)
    d_in_tot = 4.0 * np.pi * np.trapz(d_in(eps) * eps**2, eps)
    d_ana_tot = d_in_tot / s

    rows = []
    for e in range(mesh.n_eps):
        for a in range(mesh.degree + 1):
            ee = mesh.eps_nodes[e, a]
            rows.append((1.5, ee, m_post[e, a, 0], float(s * s * fermi_dirac(s * ee))))
    write_csv(outdir / "spectra.csv", "spectra", rows)

    # Eulerian N across the shock
    n_profile = []
    for xc in np.linspace(0.5, 1.5, 21):
        m_x = _eval_at_x(field, xc)
        v_here = 0.5 * spec.v_max * (1.0 - np.tanh((xc - 1.0) / spec.shock_h))
        n_spec = m_x[..., 0] + v_here * m_x[..., 1]
        n_profile.append(_energy_integrated_density(mesh, n_spec))
    n_profile = np.asarray(n_profile)

    m_probe = _eval_at_x(field, 1.5)
    rms_num = rms_energy(mesh, m_probe[..., 0])
    rms_ana = _rms_of_spectrum_fn(lambda u: s * s * fermi_dirac(s * np.asarray(u)))
    return {
        "post_shock_density": d_tot,
        "post_shock_density_analytic": d_ana_tot,
        "post_shock_excess": d_tot / d_ana_tot - 1.0,
        "eulerian_n_variation": float(n_profile.max() / n_profile.min() - 1.0),
        "eps_rms_rel_err": abs(rms_num - rms_ana) / rms_ana,
    }


def _vortex_metrics(spec, field, outdir) -> dict:
    mesh = field.mesh
    if field.m_nodes is None:
        field.refresh_primitives()
    # comoving I^1, energy-integrated, on the inflow and outflow x-faces
    m_lo, m_hi = field.m_trace[0]
    w2 = mesh.quad_weights_eps(2)
    flux_out = 4.0 * np.pi * np.einsum("Ea,EYay->Yy", w2, m_hi[:, -1, :, :, :, 1])
    eps = np.linspace(0.0, 50.0, 20001)
    flux_in = 4.0 * np.pi * np.trapz(0.95 * 0.05 * fermi_dirac(eps) * eps**2, eps)
    rel = np.abs(flux_out - flux_in) / flux_in
    rows = []
    y_flat = mesh.x_nodes[1].reshape(-1)
    for yv, fo, rd in zip(y_flat, flux_out.reshape(-1), rel.reshape(-1)):
        rows.append((yv, flux_in, fo, rd))
    write_csv(outdir / "fluxdiff.csv", "fluxdiff", rows)
    return {"max_flux_rel_diff": float(rel.max()), "flux_in": flux_in}


# ---------------------------------------------------------------------------
# studies


def convergence_study(
    name: str,
    n_list,
    degree: int,
    spec: ProblemSpec | None = None,
    reference_n: int = 2048,
) -> dict:
    """L2 errors and fitted order over a resolution sweep.

    Sine-wave errors are against the analytic translate; Gaussian errors are
    against a high-resolution reference solution at t = 5.
    """
    if name not in ("sine_wave_streaming", "gaussian_diffusion"):
        raise ValueError("convergence study supports the sine and Gaussian tests")
    base = spec or ProblemSpec(name=name)
    errors = []
    if name == "sine_wave_streaming":
        for n in n_list:
            s = replace(base, name=name, n_x=n, degree=degree, cfl_mode="benchmark03",
                        t_end=1.0, output=f"{base.output}/sine_n{n}_k{degree}")
            summary = run(s)
            errors.append(summary["error_L2"])
    else:
        t_end = 5.0
        ref_spec = replace(
            base, name=name, n_x=reference_n, degree=degree, cfl_mode="benchmark03",
            t_end=t_end, output=f"{base.output}/gauss_ref{reference_n}_k{degree}",
        )
        ref_field, opac, scheme = _BUILDERS[name](ref_spec)
        _evolve(ref_spec, ref_field, opac, scheme, t_end)
        ref_field.refresh_primitives()
        ref_x = ref_field.mesh.x_nodes[0].reshape(-1)
        ref_d = ref_field.m_nodes[0, :, 0, :, 0].reshape(-1)
        order = np.argsort(ref_x)
        ref_x, ref_d = ref_x[order], ref_d[order]
        for n in n_list:
            s = replace(base, name=name, n_x=n, degree=degree, cfl_mode="benchmark03",
                        t_end=t_end, output=f"{base.output}/gauss_n{n}_k{degree}")
            f, opac, scheme = _BUILDERS[name](s)
            _evolve(s, f, opac, scheme, t_end)
            f.refresh_primitives()
            d = f.m_nodes[0, :, 0, :, 0]
            ref_interp = np.interp(f.mesh.x_nodes[0], ref_x, ref_d)
            w = f.mesh.quad_weights_x(0)
            errors.append(float(np.sqrt(np.sum(w * (d - ref_interp) ** 2))))

    n_arr = np.asarray(n_list, dtype=float)
    fit = -np.polyfit(np.log(n_arr), np.log(np.asarray(errors)), 1)[0]
    outdir = _outdir(base)
    rows = [(int(n), degree, e, fit) for n, e in zip(n_list, errors)]
    write_csv(outdir / f"conv_k{degree}.csv", "conv", rows)
    return {"n": list(n_list), "errors": errors, "fitted_order": float(fit)}


def solver_bench(
    spec: ProblemSpec,
    v_grid=None,
    h_grid=None,
    trials: int = 100,
    tol: float = 1e-8,
) -> dict:
    """Iteration-count study over (v, h) for Picard/Anderson, both damping
    rules, both initial guesses; writes bench.csv."""
    v_grid = np.asarray(v_grid if v_grid is not None else np.linspace(0.0, 0.6, 13))
    h_grid = np.asarray(h_grid if h_grid is not None else np.linspace(0.0, 1.0, 11))
    rng = np.random.default_rng(spec.seed)
    outdir = _outdir(spec)
    t0 = time.perf_counter()

    configs = []
    for engine in (Engine.PICARD, Engine.ANDERSON):
        for lam_rule in ("inverse_one_plus_v", "fixed_0.5"):
            for guess in ("conserved", "isotropic"):
                configs.append((engine, lam_rule, guess))

    rows = []
    results = {}
    realizable_ok = True
    for v in v_grid:
        for h in h_grid:
            nhat = random_unit_vector(rng, trials)
            vdir = random_unit_vector(rng, trials)
            d = np.ones(trials)
            m0 = PrimitiveMoments(d, (d * h)[:, None] * nhat)
            vel = Velocity(v * vdir)
            u = primitive_to_conserved(m0, vel, spec.closure_spec())
            for engine, lam_rule, guess in configs:
                cfg = SolverConfig(
                    engine=engine,
                    tol=tol,
                    max_iter=200,
                    fixed_lambda=0.5 if lam_rule == "fixed_0.5" else None,
                )
                initial = None
                if guess == "isotropic":
                    initial = PrimitiveMoments(u.n, np.zeros((trials, 3)))
                m, rep = fixed_point_solve(
                    SolveKind.CONVERSION, u, vel, cfg, spec=spec.closure_spec(), initial=initial
                )
                fails = int((~rep.converged).sum())
                mean_iter = float(rep.iterations.mean())
                if engine is Engine.PICARD and lam_rule == "inverse_one_plus_v":
                    if v < np.sqrt(2.0) - 1.0 and not rep.realizable_every_iterate.all():
                        realizable_ok = False
                rows.append(
                    (v, h, engine.value, lam_rule, guess, mean_iter, fails)
                )
                results[(round(float(v), 6), round(float(h), 6), engine.value, lam_rule, guess)] = (
                    mean_iter,
                    fails,
                )
    write_csv(outdir / "bench.csv", "bench", rows)
    summary = {
        "total_failures_v_le_0.6": sum(r[6] for r in rows if r[0] <= 0.6 + 1e-12),
        "picard_iterates_realizable": realizable_ok,
    }
    _write_manifest(outdir, spec, time.perf_counter() - t0, summary)
    return {"rows": rows, "results": results, **summary}
