"""Offline verification scans and runtime conservation diagnostics.

Wave-speed scans assemble the spatial-flux Jacobian with respect to the
conserved moments, either in the closed 2x2 one-dimensional form or as the
full 4x4 chain (dF/dM)(dU/dM)^{-1} at arbitrary moments and velocities.
Bound and Lipschitz scans verify the closure inequalities that feed the
contraction estimates.  The balance ledger accumulates interior changes and
time-integrated boundary fluxes of Eulerian number and energy, with the
4 pi energy-integration convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .closure import (
    APPROXIMATE,
    ClosureSpec,
    closure_tensor_derivatives,
    eddington_factors,
    phi_functions,
)
from .dg import element_integral
from .limiters import element_number_energy
from .mesh import PhaseSpaceMesh
from .moments import PrimitiveMoments, Velocity, primitive_to_conserved
from .solvers import random_realizable, random_unit_vector

__all__ = [
    "flux_jacobian_1d",
    "wavespeed_scan_1d",
    "full_jacobians",
    "wavespeed_scan_3d",
    "bound_scan",
    "lipschitz_scan",
    "BalanceLedger",
    "rms_energy",
]


def flux_jacobian_1d(v, h, spec: ClosureSpec = APPROXIMATE):
    """Closed-form 2x2 flux Jacobian dF^1/dU for streaming along x with
    I = (I, 0, 0); returns (jacobian, lambda_max).  A vanishing prefactor
    denominator yields NaN entries (singular grid point)."""
    v = np.asarray(v, dtype=float)
    h = np.asarray(h, dtype=float)
    psi, _, prime = eddington_factors(h, spec)
    denom = 1.0 - v * v * psi + v * (1.0 + v * h) * prime
    with np.errstate(divide="ignore", invalid="ignore"):
        pref = np.where(denom != 0.0, 1.0 / denom, np.nan)
    jac = np.empty(np.broadcast(v, h).shape + (2, 2))
    jac[..., 0, 0] = v - v * psi + v * (v + h) * prime
    jac[..., 0, 1] = 1.0 - v * v
    jac[..., 1, 0] = (1.0 - v * v) * (psi - h * prime)
    jac[..., 1, 1] = v - v * psi + (1.0 + v * h) * prime
    jac *= pref[..., None, None]
    tr = jac[..., 0, 0] + jac[..., 1, 1]
    det = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
    disc = tr * tr - 4.0 * det
    # the discriminant carries O(eps) rounding noise; below that floor the
    # roots are numerically coincident (the beam point h = 1 is a double root)
    noise = 1e-13 * (tr * tr + 4.0 * np.abs(det))
    with np.errstate(invalid="ignore"):
        root = np.where(disc > noise, np.sqrt(np.maximum(disc, 0.0)), 0.0)
    lam = np.maximum(np.abs(0.5 * (tr + root)), np.abs(0.5 * (tr - root)))
    lam = np.where(disc < -noise, np.nan, lam)
    return jac, lam


def wavespeed_scan_1d(v_grid, h_grid, spec: ClosureSpec = APPROXIMATE):
    """lambda_max over the (v, h) tensor grid; shape (len(v), len(h))."""
    v = np.asarray(v_grid, dtype=float)[:, None]
    h = np.asarray(h_grid, dtype=float)[None, :]
    _, lam = flux_jacobian_1d(v, h, spec)
    return lam


def full_jacobians(moments: PrimitiveMoments, vel: Velocity, spec: ClosureSpec = APPROXIMATE):
    """(dU/dM, dF/dM) with dF/dM[..., a, :, :] the Jacobian of the flux in
    spatial direction a; all with respect to M = (D, I)."""
    d = np.asarray(moments.d, dtype=float)
    i = np.asarray(moments.i, dtype=float)
    v = vel.v
    dk_dD, dk_dI = closure_tensor_derivatives(moments, spec)

    batch = d.shape
    du = np.zeros(batch + (4, 4))
    du[..., 0, 0] = 1.0
    du[..., 0, 1:] = v
    du[..., 1:, 0] = np.einsum("...i,...ij->...j", v, dk_dD)
    du[..., 1:, 1:] = np.eye(3) + np.einsum("...i,...ijm->...jm", v, dk_dI)

    df = np.zeros(batch + (3, 4, 4))
    for a in range(3):
        df[..., a, 0, 0] = v[..., a]
        df[..., a, 0, 1 + a] = 1.0
        df[..., a, 1:, 0] = dk_dD[..., a, :]
        df[..., a, 1:, 1:] = dk_dI[..., a, :, :]
        df[..., a, 1, 1] += v[..., a]
        df[..., a, 2, 2] += v[..., a]
        df[..., a, 3, 3] += v[..., a]
    return du, df


def wavespeed_scan_3d(v_values, samples: int, rng, spec: ClosureSpec = APPROXIMATE):
    """Max |eigenvalue| over random realizable moments and random velocity
    directions, per velocity magnitude; returns an array like v_values."""
    gen = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    out = np.empty(len(v_values))
    for iv, vmag in enumerate(v_values):
        m = random_realizable(gen, h_max=1.0, d_range=(0.5, 2.0), size=samples)
        vdir = random_unit_vector(gen, samples)
        vel = Velocity(vmag * vdir)
        du, df = full_jacobians(m, vel, spec)
        jac = np.linalg.solve(
            np.swapaxes(du, -1, -2)[:, None], np.swapaxes(df, -1, -2)
        )
        jac = np.swapaxes(jac, -1, -2)  # J = dF/dM (dU/dM)^{-1}
        lam = np.linalg.eigvals(jac)
        out[iv] = np.abs(lam).max()
    return out


def bound_scan(h_grid, spec: ClosureSpec):
    """Closure bounds on a flux-factor grid.

    Returns a dict with the sampled functions and one boolean per bound:
      (a) -4 <= phi1 <= 0
      (b) phi2^2 - psi' phi2 >= 0
      (c) 3 psi'^2 - 3 psi' phi2 + phi2^2 >= 0
      (d) d/dh (phi2^2 - psi' phi2 + psi'^2) > 0
      (e) psi - h^2 - (1 - psi)^2 / 4 >= 0
      (f) h^2 <= psi <= 1
    """
    h = np.asarray(h_grid, dtype=float)
    psi, _, prime = eddington_factors(h, spec)
    phi1, phi2 = phi_functions(h, spec)
    g = phi2 * phi2 - prime * phi2 + prime * prime
    tol = 1e-11
    results = {
        "h": h,
        "psi": psi,
        "psi_prime": prime,
        "phi1": phi1,
        "phi2": phi2,
        "g": g,
        "a": bool(np.all((phi1 >= -4.0 - tol) & (phi1 <= tol))),
        "b": bool(np.all(phi2 * phi2 - prime * phi2 >= -tol)),
        "c": bool(np.all(3.0 * prime**2 - 3.0 * prime * phi2 + phi2**2 >= -tol)),
        "d": bool(np.all(np.diff(g) > 0.0)),
        "e": bool(np.all(psi - h * h - 0.25 * (1.0 - psi) ** 2 >= -tol)),
        "f": bool(np.all((h * h <= psi + tol) & (psi <= 1.0 + tol))),
    }
    results["all"] = all(results[k] for k in "abcdef")
    return results


def lipschitz_scan(samples: int, rng, spec: ClosureSpec = APPROXIMATE, step: float = 1e-6):
    """Finite-difference check of the closure-term Lipschitz bounds.

    Returns (max ||d_D(v.kD)||/v, max ||grad_I(v.kD)||/(2v)) over random
    realizable moments and velocities; both must not exceed 1.
    """
    gen = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    m = random_realizable(gen, h_max=1.0 - 1e-5, size=samples)
    v = gen.uniform(0.05, 0.999, samples)[:, None] * random_unit_vector(gen, samples)
    vmag = np.linalg.norm(v, axis=-1)

    def t_of(d, i):
        from .moments import _vk_contract

        return _vk_contract(np.asarray(d), np.asarray(i), v, spec)

    delta = step * m.d
    td = (t_of(m.d + delta, m.i) - t_of(m.d - delta, m.i)) / (2.0 * delta[:, None])
    ratio_d = np.linalg.norm(td, axis=-1) / vmag

    grad = np.empty((samples, 3, 3))
    for comp in range(3):
        di = np.zeros_like(m.i)
        di[:, comp] = delta
        grad[:, :, comp] = (t_of(m.d, m.i + di) - t_of(m.d, m.i - di)) / (2.0 * delta[:, None])
    opnorm = np.linalg.norm(grad, ord=2, axis=(1, 2))
    ratio_i = opnorm / (2.0 * vmag)
    return float(ratio_d.max()), float(ratio_i.max())


@dataclass
class BalanceLedger:
    """Running number/energy balance: interior changes versus time-integrated
    boundary fluxes (both with the 4 pi convention)."""

    n_ref: float = 0.0
    e_ref: float = 0.0
    n_ext: float = 0.0
    e_ext: float = 0.0
    rows: list = field(default_factory=list)
    _initialized: bool = False

    @staticmethod
    def _interior(mesh: PhaseSpaceMesh, u: np.ndarray, v_nodes: np.ndarray):
        number = 4.0 * np.pi * float(element_integral(mesh, u)[..., 0].sum())
        _, energy = element_number_energy(mesh, u, v_nodes)
        return number, 4.0 * np.pi * float(energy.sum())

    def initialize(self, mesh, u, v_nodes):
        self.n_ref, self.e_ref = self._interior(mesh, u, v_nodes)
        self._initialized = True
        self.rows.append((0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0))

    def add_outflow(self, number_out: float, energy_out: float):
        """Accumulate one step's stage-weighted, dt-scaled boundary fluxes."""
        self.n_ext += 4.0 * np.pi * number_out
        self.e_ext += 4.0 * np.pi * energy_out

    def record(self, t: float, mesh, u, v_nodes):
        if not self._initialized:
            raise RuntimeError("ledger must be initialized at t=0")
        n_int, e_int = self._interior(mesh, u, v_nodes)
        dn_int = n_int - self.n_ref
        de_int = e_int - self.e_ref
        row = (
            t,
            dn_int,
            self.n_ext,
            dn_int + self.n_ext,
            de_int,
            self.e_ext,
            de_int + self.e_ext,
        )
        self.rows.append(row)
        return row


def rms_energy(mesh: PhaseSpaceMesh, d_eps: np.ndarray) -> float:
    """RMS energy sqrt(int D e^5 / int D e^3) of a spectral density sampled
    on the energy nodes (shape (n_eps, k+1))."""
    w5 = mesh.quad_weights_eps(5)
    w3 = mesh.quad_weights_eps(3)
    num = float(np.sum(w5 * d_eps))
    den = float(np.sum(w3 * d_eps))
    return float(np.sqrt(num / den))
