"""Moment data types, realizability geometry, and pointwise model terms.

The primitive moments (D, I) live in the comoving frame; the evolved pair
(N, G) is the Eulerian-consistent combination N = D + v.I, G_j = I_j +
v^i k_ij D.  All operations broadcast over leading batch dimensions; the
third spatial component is carried everywhere and simply stays zero in
one- and two-dimensional runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .closure import APPROXIMATE, ClosureSpec, closure_tensors, eddington_factors

__all__ = [
    "PrimitiveMoments",
    "ConservedMoments",
    "Velocity",
    "VelocityDerivatives",
    "OpacitySpec",
    "realizability_check",
    "primitive_to_conserved",
    "model_fluxes",
    "model_sources",
    "eulerian_observables",
]


def _as_vec3(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 3:
        raise ValueError("expected a 3-vector in the trailing axis")
    return x


@dataclass(frozen=True)
class PrimitiveMoments:
    """Comoving spectral number density D and number flux I (batched)."""

    d: np.ndarray
    i: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "d", np.asarray(self.d, dtype=float))
        object.__setattr__(self, "i", _as_vec3(self.i))

    @property
    def flux_factor(self) -> np.ndarray:
        return np.linalg.norm(self.i, axis=-1) / self.d

    def packed(self) -> np.ndarray:
        return np.concatenate([self.d[..., None], self.i], axis=-1)

    @classmethod
    def from_packed(cls, arr) -> "PrimitiveMoments":
        arr = np.asarray(arr, dtype=float)
        return cls(arr[..., 0], arr[..., 1:4])


@dataclass(frozen=True)
class ConservedMoments:
    """Eulerian-consistent evolved pair (N, G)."""

    n: np.ndarray
    g: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "n", np.asarray(self.n, dtype=float))
        object.__setattr__(self, "g", _as_vec3(self.g))

    def packed(self) -> np.ndarray:
        return np.concatenate([self.n[..., None], self.g], axis=-1)

    @classmethod
    def from_packed(cls, arr) -> "ConservedMoments":
        arr = np.asarray(arr, dtype=float)
        return cls(arr[..., 0], arr[..., 1:4])


@dataclass(frozen=True)
class Velocity:
    """Background three-velocity in units of c; |v| < 1 enforced."""

    v: np.ndarray

    def __post_init__(self):
        v = _as_vec3(self.v)
        if np.any(np.linalg.norm(v, axis=-1) >= 1.0):
            raise ValueError("|v| must be < 1")
        object.__setattr__(self, "v", v)

    @property
    def speed(self) -> np.ndarray:
        return np.linalg.norm(self.v, axis=-1)


@dataclass(frozen=True)
class VelocityDerivatives:
    """Spatial derivative tensor, entry (i, j) = dv^j/dx^i."""

    dv: np.ndarray

    def __post_init__(self):
        dv = np.asarray(self.dv, dtype=float)
        if dv.shape[-2:] != (3, 3):
            raise ValueError("dv must have trailing shape (3, 3)")
        object.__setattr__(self, "dv", dv)


@dataclass(frozen=True)
class OpacitySpec:
    """Absorption opacity chi, scattering opacity sigma, equilibrium density D0."""

    chi: float = 0.0
    sigma: float = 0.0
    d0: float = 0.0

    def __post_init__(self):
        if self.chi < 0 or self.sigma < 0 or self.d0 < 0:
            raise ValueError("opacities and equilibrium density must be nonnegative")

    @property
    def kappa(self) -> float:
        return self.chi + self.sigma


@dataclass(frozen=True)
class RealizabilityReport:
    gamma: np.ndarray
    realizable: np.ndarray


def realizability_check(moments: PrimitiveMoments) -> RealizabilityReport:
    """gamma = D - |I|; realizable iff D > 0 and gamma >= 0.  Never raises."""
    gamma = moments.d - np.linalg.norm(moments.i, axis=-1)
    return RealizabilityReport(gamma, (moments.d > 0.0) & (gamma >= 0.0))


def _require_realizable(moments: PrimitiveMoments, rtol: float = 1e-12) -> None:
    inorm = np.linalg.norm(moments.i, axis=-1)
    if np.any(moments.d <= 0.0) or np.any(inorm > moments.d * (1.0 + rtol)):
        raise ValueError("primitive moments are not realizable")


def _vk_contract(d, i, v, spec: ClosureSpec):
    """v^i k_ij(M) D without materializing the full tensor.

    v^i k_ij D = (1/2)[(1-psi) v_j + (3 psi - 1) (v.n) n_j] D
    """
    inorm = np.linalg.norm(i, axis=-1)
    h = np.clip(inorm / d, 0.0, 1.0)
    psi, _, _ = eddington_factors(h, spec)
    safe = np.where(inorm > 0.0, inorm, 1.0)
    n = i / safe[..., None]
    s = np.einsum("...k,...k->...", v, n)
    out = 0.5 * ((1.0 - psi)[..., None] * v + ((3.0 * psi - 1.0) * s)[..., None] * n)
    return out * d[..., None]


def primitive_to_conserved(
    moments: PrimitiveMoments, vel: Velocity, spec: ClosureSpec = APPROXIMATE
) -> ConservedMoments:
    """N = D + v.I and G_j = I_j + v^i k_ij D."""
    _require_realizable(moments)
    n = moments.d + np.einsum("...k,...k->...", vel.v, moments.i)
    g = moments.i + _vk_contract(moments.d, moments.i, vel.v, spec)
    return ConservedMoments(n, g)


def model_fluxes(
    conserved: ConservedMoments,
    moments: PrimitiveMoments,
    vel: Velocity,
    derivs: VelocityDerivatives,
    spec: ClosureSpec = APPROXIMATE,
):
    """Phase-space fluxes.

    Returns (Fx, Fe): Fx[..., i, :] is the 4-vector flux in spatial
    direction i, (I^i + v^i D; k^i_j D + v^i I_j); Fe is the energy flux
    -(k^i_k D; q^i_kj D) dv^k/dx^i.
    """
    _require_realizable(moments)
    d, i, v, dv = moments.d, moments.i, vel.v, derivs.dv
    k, q = closure_tensors(moments, spec)
    kd = k * d[..., None, None]
    qd = q * d[..., None, None, None]

    fx = np.empty(d.shape + (3, 4))
    fx[..., :, 0] = i + v * d[..., None]
    fx[..., :, 1:] = kd + v[..., :, None] * i[..., None, :]

    fe = np.empty(d.shape + (4,))
    fe[..., 0] = -np.einsum("...ik,...ik->...", kd, dv)
    fe[..., 1:] = -np.einsum("...ikj,...ik->...j", qd, dv)
    return fx, fe


def model_sources(
    conserved: ConservedMoments,
    moments: PrimitiveMoments,
    vel: Velocity,
    derivs: VelocityDerivatives,
    opac: OpacitySpec,
    spec: ClosureSpec = APPROXIMATE,
):
    """Aberration source S = (0; q^i_kj dv_ik - I^i dv_ij) and collision term
    C = (chi (D0 - D); -kappa I_j)."""
    _require_realizable(moments)
    d, i, dv = moments.d, moments.i, derivs.dv
    _, q = closure_tensors(moments, spec)
    qd = q * d[..., None, None, None]

    s = np.zeros(d.shape + (4,))
    s[..., 1:] = np.einsum("...ikj,...ik->...j", qd, dv) - np.einsum(
        "...i,...ij->...j", i, dv
    )

    c = np.empty(d.shape + (4,))
    c[..., 0] = opac.chi * (opac.d0 - d)
    c[..., 1:] = -opac.kappa * i
    return s, c


def eulerian_observables(
    conserved: ConservedMoments, moments: PrimitiveMoments, vel: Velocity, eps
):
    """Eulerian-frame energy and momentum densities at particle energy eps:
    E = eps (N + v.G), P_j = eps (G_j + v_j N)."""
    eps = np.asarray(eps, dtype=float)
    n, g, v = conserved.n, conserved.g, vel.v
    e = eps * (n + np.einsum("...k,...k->...", v, g))
    p = eps[..., None] * (g + v * n[..., None])
    return e, p
