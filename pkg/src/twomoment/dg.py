"""Nodal collocation DG operator in phase space.

The evolved array U has shape (*elem_shape, *node_shape, 4), element axes
ordered (energy, x1[, x2]) and node axes likewise.  All inner products use
the (k+1)-point LG rule at the interpolation nodes, so the mass matrix is
diagonal and the semi-discrete right-hand side is assembled per node.

Face fluxes are global Lax-Friedrichs with unit signal speed in space
(dissipation built on conserved moments recombined with the face-restricted
velocity) and an LF-type flux in energy whose dissipation acts on the
primitive moments.  Primitive moments are recovered once per stage at the
nodes and at every face trace before assembly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .closure import APPROXIMATE, ClosureSpec, eddington_factors
from .mesh import BCKind, PhaseSpaceMesh
from .moments import ConservedMoments, PrimitiveMoments, Velocity, primitive_to_conserved
from .solvers import Engine, SolveKind, SolverConfig, fixed_point_solve

__all__ = [
    "VelocityTables",
    "project_velocity",
    "lf_flux_spatial",
    "lf_flux_energy",
    "MomentField",
    "BoundaryFluxSample",
    "cell_average",
]


# ---------------------------------------------------------------------------
# velocity projection


@dataclass(frozen=True)
class VelocityTables:
    """DG projection of the background velocity and derived static data."""

    v_nodes: np.ndarray  # (*sx_elem, *sx_node, 3)
    dv_nodes: np.ndarray  # (*sx_elem, *sx_node, 3, 3); dv[..., i, j] = d_i v^j
    vhat: tuple  # per dim: face-averaged velocity arrays
    alpha_eps: np.ndarray  # (*sx_elem, *sx_node)
    speed_nodes: np.ndarray

    @property
    def max_speed(self) -> float:
        return float(self.speed_nodes.max())


def _spatial_node_grids(mesh: PhaseSpaceMesh):
    if mesh.d_x == 1:
        return (mesh.x_nodes[0],)
    x = mesh.x_nodes[0][:, None, :, None]
    y = mesh.x_nodes[1][None, :, None, :]
    nx, ny = mesh.n_x
    k1 = mesh.degree + 1
    return (
        np.broadcast_to(x, (nx, ny, k1, k1)),
        np.broadcast_to(y, (nx, ny, k1, k1)),
    )


def _weak_derivative(vals, vhat_lo, vhat_hi, width, tab, elem_axis, node_axis):
    """Weak DG derivative along one dimension of a nodal scalar field."""
    v = np.moveaxis(np.moveaxis(vals, elem_axis, 0), node_axis, 1)
    out = np.einsum("br,Nr...->Nb...", tab.weak_deriv, v)
    lo = np.moveaxis(vhat_lo, elem_axis, 0)
    hi = np.moveaxis(vhat_hi, elem_axis, 0)
    out = (
        np.einsum("b,N...->Nb...", tab.lift_hi, hi)
        - np.einsum("b,N...->Nb...", tab.lift_lo, lo)
        - out
    )
    w = width.reshape((-1,) + (1,) * (out.ndim - 1))
    out = out * (2.0 / w)
    return np.moveaxis(np.moveaxis(out, 1, node_axis), 0, elem_axis)


def project_velocity(mesh: PhaseSpaceMesh, v_fn: Callable) -> VelocityTables:
    """Project an analytic velocity field onto the spatial DG space.

    ``v_fn(*coords) -> (..., 3)`` must broadcast over coordinate arrays.
    Face velocities are arithmetic means of the one-sided traces; the
    derivative tensor satisfies the weak DG identity with those face values.
    """
    grids = _spatial_node_grids(mesh)
    v = np.asarray(v_fn(*grids), dtype=float)
    if v.shape[-1] != 3:
        raise ValueError("velocity function must return 3-vectors")
    speed = np.linalg.norm(v, axis=-1)
    if np.any(speed >= 1.0):
        raise ValueError("|v| must be < 1 at every node")

    tab = mesh.tables
    d_x = mesh.d_x
    vhats = []
    dv = np.zeros(v.shape[:-1] + (3, 3))
    for d in range(d_x):
        elem_axis, node_axis = d, d_x + d
        vd = np.moveaxis(np.moveaxis(v, elem_axis, 0), node_axis, 1)
        lo = np.einsum("r,Nr...->N...", tab.to_faces[0], vd)
        hi = np.einsum("r,Nr...->N...", tab.to_faces[1], vd)
        nd = vd.shape[0]
        per = mesh.bc[d][0].kind is BCKind.PERIODIC
        vhat = np.empty((nd + 1,) + lo.shape[1:])
        vhat[1:-1] = 0.5 * (hi[:-1] + lo[1:])
        if per:
            wrap = 0.5 * (hi[-1] + lo[0])
            vhat[0] = wrap
            vhat[-1] = wrap
        else:
            vhat[0] = lo[0]
            vhat[-1] = hi[-1]
        vhats.append(np.moveaxis(vhat, 0, elem_axis))

        # one-sided face values seen by each element along this dim
        vhat_lo = np.moveaxis(vhat[:-1], 0, 0)
        vhat_hi = np.moveaxis(vhat[1:], 0, 0)
        for j in range(3):
            dv[..., d, j] = _weak_derivative(
                v[..., j],
                np.moveaxis(vhat_lo[..., j], 0, elem_axis),
                np.moveaxis(vhat_hi[..., j], 0, elem_axis),
                mesh.x_widths[d],
                tab,
                elem_axis,
                node_axis,
            )

    a = -0.5 * (dv + np.swapaxes(dv, -1, -2))
    mean = 0.5 * (a[..., 0, 0] + a[..., 1, 1])
    rad = np.sqrt((0.5 * (a[..., 0, 0] - a[..., 1, 1])) ** 2 + a[..., 0, 1] ** 2)
    alpha = np.maximum(np.abs(mean + rad), np.abs(mean - rad))

    return VelocityTables(
        v_nodes=v,
        dv_nodes=dv,
        vhat=tuple(vhats),
        alpha_eps=alpha,
        speed_nodes=speed,
    )


# ---------------------------------------------------------------------------
# pointwise flux kernels on packed arrays


def _k_row(m, axis: int, spec: ClosureSpec):
    """Row ``axis`` of k_ij D for packed primitives m = (D, I)."""
    d, i = m[..., 0], m[..., 1:4]
    inorm = np.linalg.norm(i, axis=-1)
    h = np.clip(inorm / d, 0.0, 1.0)
    psi, _, _ = eddington_factors(h, spec)
    n = i / np.where(inorm > 0.0, inorm, 1.0)[..., None]
    row = (0.5 * (3.0 * psi - 1.0) * n[..., axis])[..., None] * n
    row[..., axis] += 0.5 * (1.0 - psi)
    return row * d[..., None]


def _spatial_flux(m, w, axis: int, spec: ClosureSpec):
    """F^axis(M, v) where only the axis component w of the velocity enters."""
    d, i = m[..., 0], m[..., 1:4]
    out = np.empty_like(m)
    out[..., 0] = i[..., axis] + w * d
    out[..., 1:] = _k_row(m, axis, spec) + w[..., None] * i
    return out


def _restricted_conserved(m, w, axis: int, spec: ClosureSpec):
    """U[v^axis]: conserved moments of m with velocity restricted to one axis."""
    d, i = m[..., 0], m[..., 1:4]
    out = np.empty_like(m)
    out[..., 0] = d + w * i[..., axis]
    out[..., 1:] = i + w[..., None] * _k_row(m, axis, spec)
    return out


def _lf_spatial_packed(ma, mb, vhat_axis, axis: int, spec: ClosureSpec):
    fa = _spatial_flux(ma, vhat_axis, axis, spec)
    fb = _spatial_flux(mb, vhat_axis, axis, spec)
    ua = _restricted_conserved(ma, vhat_axis, axis, spec)
    ub = _restricted_conserved(mb, vhat_axis, axis, spec)
    return 0.5 * (fa + fb - (ub - ua))


def _energy_flux(m, dv, spec: ClosureSpec):
    """F^eps(M) = -(k^i_k D; q^i_kj D) dv^k/dx^i, contracted without
    materializing the closure tensors."""
    d, i = m[..., 0], m[..., 1:4]
    inorm = np.linalg.norm(i, axis=-1)
    h = np.clip(inorm / d, 0.0, 1.0)
    psi, zeta, _ = eddington_factors(h, spec)
    n = i / np.where(inorm > 0.0, inorm, 1.0)[..., None]

    trdv = np.trace(dv, axis1=-2, axis2=-1)
    ndvn = np.einsum("...i,...ik,...k->...", n, dv, n)
    kdv = 0.5 * ((1.0 - psi) * trdv + (3.0 * psi - 1.0) * ndvn)

    ndv = np.einsum("...i,...ik->...k", n, dv)  # sum_i n_i dv_ik
    dvn = np.einsum("...ik,...k->...i", dv, n)  # sum_k dv_ik n_k
    qdv = 0.5 * (
        (h - zeta)[..., None] * (ndv + dvn + trdv[..., None] * n)
        + ((5.0 * zeta - 3.0 * h) * ndvn)[..., None] * n
    )

    out = np.empty_like(m)
    out[..., 0] = -kdv * d
    out[..., 1:] = -qdv * d[..., None]
    return out


def _lf_energy_packed(ma, mb, dv, alpha, spec: ClosureSpec):
    fa = _energy_flux(ma, dv, spec)
    fb = _energy_flux(mb, dv, spec)
    return 0.5 * (fa + fb - alpha[..., None] * (mb - ma))


def lf_flux_spatial(m_a: PrimitiveMoments, m_b: PrimitiveMoments, vhat, direction: int,
                    spec: ClosureSpec = APPROXIMATE) -> np.ndarray:
    """Spatial LF flux through a face with trace primitives m_a (left), m_b
    (right) and face velocity ``vhat``; unit signal speed, dissipation on the
    conserved moments rebuilt with the direction-restricted face velocity."""
    w = np.asarray(vhat, dtype=float)[..., direction]
    return _lf_spatial_packed(m_a.packed(), m_b.packed(), w, direction, spec)


def lf_flux_energy(m_a: PrimitiveMoments, m_b: PrimitiveMoments, dv, spec: ClosureSpec = APPROXIMATE):
    """Energy LF flux and its signal-speed estimate alpha_eps = max |eig| of
    the symmetrized velocity-gradient quadratic form."""
    dv = np.asarray(dv, dtype=float)
    a = -0.5 * (dv + np.swapaxes(dv, -1, -2))
    lam = np.linalg.eigvalsh(a)
    alpha = np.abs(lam).max(axis=-1)
    return _lf_energy_packed(m_a.packed(), m_b.packed(), dv, alpha, spec), alpha


# ---------------------------------------------------------------------------
# moment field


@dataclass
class BoundaryFluxSample:
    """Outward boundary-flux integrals of one RHS evaluation (tau-weighted)."""

    number_out: float = 0.0
    energy_out: float = 0.0


def _trace(arr, tab, node_axis, side: int):
    return np.tensordot(arr, tab.to_faces[side], axes=([node_axis], [0]))


class MomentField:
    """Conserved nodal moments plus cached primitives and velocity tables."""

    def __init__(
        self,
        mesh: PhaseSpaceMesh,
        vel: VelocityTables,
        u: np.ndarray,
        closure: ClosureSpec = APPROXIMATE,
        solver: SolverConfig | None = None,
    ):
        self.mesh = mesh
        self.vel = vel
        expected = mesh.elem_shape + mesh.node_shape + (4,)
        u = np.asarray(u, dtype=float)
        if u.shape != expected:
            raise ValueError(f"field shape {u.shape} != {expected}")
        self.u = u
        self.closure = closure
        self.solver = solver or SolverConfig(engine=Engine.ANDERSON, tol=1e-10)
        self._ghosts = self._build_ghosts()
        self.m_nodes = None
        self.m_trace = None  # per spatial dim: (lo, hi) primitive traces
        self.m_etrace = None  # (lo, hi) energy-face primitive traces
        self.solver_iterations = 0

    # -- construction helpers ------------------------------------------------

    @classmethod
    def from_primitives(
        cls,
        mesh: PhaseSpaceMesh,
        vel: VelocityTables,
        m_packed: np.ndarray,
        closure: ClosureSpec = APPROXIMATE,
        solver: SolverConfig | None = None,
    ) -> "MomentField":
        v = cls._node_velocity_static(mesh, vel)
        m = PrimitiveMoments.from_packed(m_packed)
        u = primitive_to_conserved(m, Velocity(v), closure).packed()
        return cls(mesh, vel, u, closure, solver)

    @staticmethod
    def _node_velocity_static(mesh: PhaseSpaceMesh, vel: VelocityTables) -> np.ndarray:
        """Velocity broadcast to the full phase-space node array."""
        v = vel.v_nodes
        ne, k1 = mesh.n_eps, mesh.degree + 1
        if mesh.d_x == 1:
            out = np.broadcast_to(v[None, :, None, :, :], (ne, v.shape[0], k1, k1, 3))
        else:
            nx, ny = mesh.n_x
            out = np.broadcast_to(
                v[None, :, :, None, :, :, :], (ne, nx, ny, k1, k1, k1, 3)
            )
        return out

    def node_velocity(self) -> np.ndarray:
        return self._node_velocity_static(self.mesh, self.vel)

    def node_energies(self) -> np.ndarray:
        eps = self.mesh.eps_nodes  # (NE, k+1)
        shape = [self.mesh.n_eps] + [1] * self.mesh.d_x + [self.mesh.degree + 1]
        shape += [1] * self.mesh.d_x
        return eps.reshape(shape[: 1 + self.mesh.d_x] + shape[1 + self.mesh.d_x :])

    def _build_ghosts(self):
        """Pre-tabulated inflow ghost states (conserved and primitive)."""
        mesh = self.mesh
        ghosts = []
        for d in range(mesh.d_x):
            pair = []
            for side, bc in enumerate(mesh.bc[d]):
                if bc.kind is not BCKind.INFLOW:
                    pair.append(None)
                    continue
                u_ghost = np.asarray(self._eval_profile(bc.profile, d), dtype=float)
                vhat = self._boundary_vhat(d, side)
                m_ghost, rep = fixed_point_solve(
                    SolveKind.CONVERSION,
                    ConservedMoments.from_packed(u_ghost),
                    Velocity(np.broadcast_to(vhat, u_ghost.shape[:-1] + (3,))),
                    self.solver,
                    spec=self.closure,
                )
                if not rep.converged.all():
                    raise RuntimeError("inflow ghost conversion failed")
                pair.append({"u": u_ghost, "m": m_ghost.packed()})
            ghosts.append(pair)
        return ghosts

    def _eval_profile(self, profile, d):
        mesh = self.mesh
        k1 = mesh.degree + 1
        if mesh.d_x == 1:
            eps = mesh.eps_nodes  # (NE, ne)
            return profile(eps)
        other = 1 - d
        eps = mesh.eps_nodes[:, None, :, None]
        xt = mesh.x_nodes[other][None, :, None, :]
        return profile(eps, xt)

    def _boundary_vhat(self, d, side):
        vhat = self.vel.vhat[d]
        idx = [slice(None)] * vhat.ndim
        idx[d] = 0 if side == 0 else -1
        w = vhat[tuple(idx)]
        if self.mesh.d_x == 1:
            return w  # (3,)
        # transverse structure: broadcast over energy nodes happens later
        return w[None, :, None, :] if d == 0 else w[None, :, None, :]

    # -- primitive recovery ---------------------------------------------------

    def _solve(self, u_packed, v):
        m, rep = fixed_point_solve(
            SolveKind.CONVERSION,
            ConservedMoments.from_packed(u_packed),
            Velocity(np.broadcast_to(v, u_packed.shape[:-1] + (3,))),
            self.solver,
            spec=self.closure,
        )
        if not rep.converged.all():
            bad = int((~rep.converged).sum())
            worst = float(rep.residual.max())
            raise RuntimeError(
                f"moment conversion failed at {bad} points (max residual {worst:.3e})"
            )
        self.solver_iterations += int(rep.iterations.sum())
        return m.packed()

    def refresh_primitives(self):
        """Recover primitives at nodes, spatial-face traces, and energy-face
        traces; caches feed the flux assembly."""
        mesh, tab = self.mesh, self.mesh.tables
        d_x = mesh.d_x
        self.m_nodes = self._solve(self.u, self.node_velocity())

        self.m_trace = []
        for d in range(d_x):
            node_axis = 2 + d_x + d
            lo = _trace(self.u, tab, node_axis, 0)
            hi = _trace(self.u, tab, node_axis, 1)
            vlo, vhi = self._face_velocity_for_traces(d)
            both = self._solve(
                np.stack([lo, hi]), np.stack([np.broadcast_to(vlo, lo.shape[:-1] + (3,)),
                                              np.broadcast_to(vhi, hi.shape[:-1] + (3,))])
            )
            self.m_trace.append((both[0], both[1]))

        lo = _trace(self.u, tab, 1 + d_x, 0)
        hi = _trace(self.u, tab, 1 + d_x, 1)
        v = self._etrace_velocity(lo.shape)
        both = self._solve(np.stack([lo, hi]), np.stack([v, v]))
        self.m_etrace = (both[0], both[1])

    def _face_velocity_for_traces(self, d):
        """Face-averaged velocity adjacent to each element's lo/hi face."""
        vhat = self.vel.vhat[d]  # face-indexed along spatial dim d
        d_x = self.mesh.d_x
        ne, k1 = self.mesh.n_eps, self.mesh.degree + 1
        sl_lo = [slice(None)] * vhat.ndim
        sl_hi = [slice(None)] * vhat.ndim
        sl_lo[d] = slice(None, -1)
        sl_hi[d] = slice(1, None)
        lo, hi = vhat[tuple(sl_lo)], vhat[tuple(sl_hi)]
        if d_x == 1:
            # traces have shape (NE, NX, ne, 4); velocity (NX, 3)
            return lo[None, :, None, :], hi[None, :, None, :]
        if d == 0:
            # traces (NE, NX, NY, ne, ny, 4); vhat_x (NX+1, NY, ny, 3)
            return lo[None, :, :, None], hi[None, :, :, None]
        # d == 1: traces (NE, NX, NY, ne, nx, 4); vhat_y (NX, NY+1, nx, 3)
        return lo[None, :, :, None], hi[None, :, :, None]

    def _etrace_velocity(self, trace_shape):
        v = self.vel.v_nodes
        if self.mesh.d_x == 1:
            out = v[None, :, :, :]  # (1, NX, nx, 3)
        else:
            out = v[None, :, :, :, :, :]
        return np.broadcast_to(out, trace_shape[:-1] + (3,))

    # -- assembly -------------------------------------------------------------

    def assemble_rhs(self):
        """Semi-discrete RHS of the advection operator (fluxes plus the
        velocity source; no collision term).  Returns (rhs, BoundaryFluxSample).
        """
        if self.m_nodes is None:
            self.refresh_primitives()
        mesh, tab = self.mesh, self.mesh.tables
        d_x = mesh.d_x
        spec = self.closure
        rhs = np.zeros_like(self.u)
        sample = BoundaryFluxSample()

        v_nodes = self.node_velocity()
        # spatial directions
        for d in range(d_x):
            elem_axis, node_axis = 1 + d, 2 + d_x + d
            m_lo, m_hi = self.m_trace[d]
            vlo, vhi = self._face_velocity_for_traces(d)

            # face arrays indexed by interface f = 0..Nd
            a, b, vf = self._face_states(d, m_lo, m_hi, vlo, vhi)
            w = vf[..., d]
            fhat = _lf_spatial_packed(a, b, w, d, spec)

            fvol = _spatial_flux(self.m_nodes, v_nodes[..., d], d, spec)
            self._accumulate_dim(rhs, fvol, fhat, mesh.x_widths[d], elem_axis, node_axis)
            self._boundary_sample(sample, d, fhat, vf)

        # energy direction; zero flux at eps = 0 (the eps^3 factor) and at eps_max
        m_lo, m_hi = self.m_etrace
        a = np.concatenate([np.zeros_like(m_lo[:1]), m_hi], axis=0)  # A[f] = hi of f-1
        b = np.concatenate([m_lo, np.zeros_like(m_lo[:1])], axis=0)
        fhat = np.zeros(a.shape)
        if mesh.n_eps > 1:
            dv_b = self._broadcast_spatial(self.vel.dv_nodes, extra=(3, 3))
            al_b = self._broadcast_spatial(self.vel.alpha_eps)
            interior = slice(1, mesh.n_eps)
            fhat[interior] = _lf_energy_packed(
                a[interior], b[interior], dv_b[: mesh.n_eps - 1], al_b[: mesh.n_eps - 1], spec
            )
        dv_nodes = self._broadcast_nodes(self.vel.dv_nodes, extra=(3, 3))
        fvol = _energy_flux(self.m_nodes, dv_nodes, spec)
        self._accumulate_energy(rhs, fvol, fhat)

        # aberration source (collision handled by the time integrator)
        rhs += self._source_nodes(dv_nodes)
        return rhs, sample

    def _face_states(self, d, m_lo, m_hi, vlo, vhi):
        """(A, B, vhat) arrays indexed by interface along spatial dim d."""
        mesh = self.mesh
        elem_axis = 1 + d
        bc_lo, bc_hi = mesh.bc[d]
        a_int = np.moveaxis(m_hi, elem_axis, 0)
        b_int = np.moveaxis(m_lo, elem_axis, 0)
        nd = a_int.shape[0]
        shape = (nd + 1,) + a_int.shape[1:]
        a = np.empty(shape)
        b = np.empty(shape)
        a[1:] = a_int
        b[:-1] = b_int
        if bc_lo.kind is BCKind.PERIODIC:
            a[0] = a_int[-1]
            b[-1] = b_int[0]
        else:
            a[0] = self._ghost_state(d, 0, b_int[0])
            b[-1] = self._ghost_state(d, 1, a_int[-1])
        vf_lo = np.moveaxis(np.broadcast_to(vlo, m_lo.shape[:-1] + (3,)), elem_axis, 0)
        vf_hi = np.moveaxis(np.broadcast_to(vhi, m_hi.shape[:-1] + (3,)), elem_axis, 0)
        vf = np.concatenate([vf_lo, vf_hi[-1:]], axis=0)
        return a, b, vf

    def _ghost_state(self, d, side, interior_m):
        bc = self.mesh.bc[d][side]
        if bc.kind is BCKind.OUTFLOW:
            return interior_m
        g = self._ghosts[d][side]["m"]
        return np.broadcast_to(g, interior_m.shape)

    def _accumulate_dim(self, rhs, fvol, fhat, widths, elem_axis, node_axis):
        tab = self.mesh.tables
        r = np.moveaxis(np.moveaxis(rhs, elem_axis, 0), node_axis, 1)
        fv = np.moveaxis(np.moveaxis(fvol, elem_axis, 0), node_axis, 1)
        add = np.einsum("br,Nr...->Nb...", tab.weak_deriv, fv)
        add -= np.einsum("b,N...->Nb...", tab.lift_hi, fhat[1:])
        add += np.einsum("b,N...->Nb...", tab.lift_lo, fhat[:-1])
        w = widths.reshape((-1,) + (1,) * (add.ndim - 1))
        r += add * (2.0 / w)

    def _accumulate_energy(self, rhs, fvol, fhat):
        mesh, tab = self.mesh, self.mesh.tables
        d_x = mesh.d_x
        r = np.moveaxis(rhs, 1 + d_x, 1)  # (NE, ne, ..., 4)
        eps3 = self.node_energies() ** 3
        fv = np.moveaxis(fvol * eps3[..., None], 1 + d_x, 1)
        edges3 = mesh.energy_edges**3
        sh = (-1,) + (1,) * (fhat.ndim - 1)
        fh = fhat * edges3.reshape(sh)
        add = np.einsum("br,Nr...->Nb...", tab.weak_deriv, fv)
        add -= np.einsum("b,N...->Nb...", tab.lift_hi, fh[1:])
        add += np.einsum("b,N...->Nb...", tab.lift_lo, fh[:-1])
        w = mesh.eps_widths.reshape((-1,) + (1,) * (add.ndim - 1))
        add *= 2.0 / w
        eps2 = np.moveaxis(np.broadcast_to(self.node_energies(), self.u.shape[:-1]), 1 + d_x, 1) ** 2
        r += add / eps2[..., None]

    def _source_nodes(self, dv_nodes):
        m = self.m_nodes
        d, i = m[..., 0], m[..., 1:4]
        inorm = np.linalg.norm(i, axis=-1)
        h = np.clip(inorm / d, 0.0, 1.0)
        _, zeta, _ = eddington_factors(h, self.closure)
        n = i / np.where(inorm > 0.0, inorm, 1.0)[..., None]
        trdv = np.trace(dv_nodes, axis1=-2, axis2=-1)
        ndvn = np.einsum("...i,...ik,...k->...", n, dv_nodes, n)
        ndv = np.einsum("...i,...ik->...k", n, dv_nodes)
        dvn = np.einsum("...ik,...k->...i", dv_nodes, n)
        qdv = 0.5 * (
            (h - zeta)[..., None] * (ndv + dvn + trdv[..., None] * n)
            + ((5.0 * zeta - 3.0 * h) * ndvn)[..., None] * n
        ) * d[..., None]
        s = np.zeros_like(m)
        s[..., 1:] = qdv - np.einsum("...i,...ij->...j", i, dv_nodes)
        return s

    def _broadcast_spatial(self, arr, extra=()):
        """Spatial-node array -> energy-face trace layout (NE, spatial...)."""
        mesh = self.mesh
        ne = mesh.n_eps
        return np.broadcast_to(arr[None], (ne,) + arr.shape[: arr.ndim - len(extra)] + extra)

    def _broadcast_nodes(self, arr, extra=()):
        """Spatial-node array -> full node layout with energy axes added."""
        mesh = self.mesh
        ne, k1 = mesh.n_eps, mesh.degree + 1
        base = arr.shape[: arr.ndim - len(extra)]
        if mesh.d_x == 1:
            out = arr[None, :, None]
            target = (ne, base[0], k1, base[1]) + extra
        else:
            out = arr[None, :, :, None]
            target = (ne, base[0], base[1], k1, base[2], base[3]) + extra
        return np.broadcast_to(out, target)

    def _boundary_sample(self, sample, d, fhat, vf):
        mesh = self.mesh
        if mesh.bc[d][0].kind is BCKind.PERIODIC:
            return
        for side, fidx in ((0, 0), (1, -1)):
            f = fhat[fidx]
            v = vf[fidx]
            sign = -1.0 if side == 0 else 1.0
            w2, w3 = self._face_measure(d)
            fn = f[..., 0]
            fe = f[..., 0] + np.einsum("...j,...j->...", v, f[..., 1:])
            sample.number_out += sign * float(np.sum(w2 * fn))
            sample.energy_out += sign * float(np.sum(w3 * fe))

    def _face_measure(self, d):
        """tau-weighted (and eps^3-weighted) quadrature over a spatial face."""
        mesh = self.mesh
        w2 = mesh.quad_weights_eps(2)  # (NE, ne)
        w3 = mesh.quad_weights_eps(3)
        if mesh.d_x == 1:
            return w2, w3
        other = 1 - d
        wt = mesh.quad_weights_x(other)  # (Nt, nt)
        if d == 0:
            # face arrays: (NE, NY, ne, ny)
            return (
                w2[:, None, :, None] * wt[None, :, None, :],
                w3[:, None, :, None] * wt[None, :, None, :],
            )
        return (
            w2[:, None, :, None] * wt[None, :, None, :],
            w3[:, None, :, None] * wt[None, :, None, :],
        )

    # -- integrals ------------------------------------------------------------

    def cell_averages(self) -> np.ndarray:
        """Cell-averaged conserved moments (tau measure), shape (*elem, 4)."""
        return element_integral(self.mesh, self.u) / self.mesh.volumes[..., None]


def element_integral(mesh: PhaseSpaceMesh, arr: np.ndarray) -> np.ndarray:
    """Integral of a nodal field against tau = eps^2 over each element."""
    w_eps = mesh.quad_weights_eps(2)  # (NE, ne)
    if mesh.d_x == 1:
        wx = mesh.quad_weights_x(0)
        return np.einsum("Ea,Xb,EXab...->EX...", w_eps, wx, arr)
    wx = mesh.quad_weights_x(0)
    wy = mesh.quad_weights_x(1)
    return np.einsum("Ea,Xb,Yc,EXYabc...->EXY...", w_eps, wx, wy, arr)


def cell_average(mesh: PhaseSpaceMesh, arr: np.ndarray, element: tuple) -> np.ndarray:
    """Cell average of one element's nodal values (spec surface)."""
    integral = element_integral(mesh, arr)
    return integral[element] / mesh.volumes[element]
