"""Maximum-entropy (Minerbo) closure for the two-moment model.

Provides the exact closure, evaluated through the inverse Langevin function,
and the polynomial approximation of the Eddington factor ``psi`` and the
heat-flux factor ``zeta``, together with the rank-2 and rank-3 closure
tensors built from the primitive moments.

All functions broadcast over leading array dimensions; scalars work too.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = [
    "ClosureKind",
    "ClosureSpec",
    "ClosureEval",
    "FluxFactor",
    "langevin",
    "langevin_prime",
    "langevin_inverse",
    "closure_exact",
    "closure_approx",
    "eddington_factors",
    "closure_tensors",
    "closure_tensor_derivatives",
    "phi_functions",
]

# Below this argument the Langevin function and its relatives are evaluated
# by series; the direct formulas lose ~|log10(beta)| digits to cancellation.
_BETA_SMALL = 0.05
# L(700) ~ 1 - 1/700; beyond this flux factor the asymptote beta = 1/(1-h)
# is exact to double precision (the csch^2 correction is ~e^-1400).
_BETA_ASYMPTOTIC = 700.0
_H_ASYMPTOTIC = 1.0 - 1.0 / _BETA_ASYMPTOTIC


class ClosureKind(Enum):
    EXACT = "exact"
    APPROXIMATE = "approximate"


@dataclass(frozen=True)
class ClosureSpec:
    """Selects the exact or approximate Minerbo evaluation."""

    kind: ClosureKind = ClosureKind.APPROXIMATE
    langevin_tol: float = 1e-12
    h_iso_threshold: float = 1e-14

    def __post_init__(self):
        if self.langevin_tol <= 0:
            raise ValueError("langevin_tol must be positive")
        if self.h_iso_threshold < 0:
            raise ValueError("h_iso_threshold must be nonnegative")


EXACT = ClosureSpec(kind=ClosureKind.EXACT)
APPROXIMATE = ClosureSpec(kind=ClosureKind.APPROXIMATE)


@dataclass(frozen=True)
class FluxFactor:
    """Flux factor h = |I|/D, clamped to [0, 1] on construction."""

    h: float

    def __post_init__(self):
        object.__setattr__(self, "h", float(min(max(self.h, 0.0), 1.0)))

    @classmethod
    def from_moments(cls, d: float, i) -> "FluxFactor":
        i = np.asarray(i, dtype=float)
        return cls(float(np.linalg.norm(i) / d))


@dataclass(frozen=True)
class ClosureEval:
    """Eddington factor, heat-flux factor, and d(psi)/dh at one or more h."""

    psi: np.ndarray
    zeta: np.ndarray
    psi_prime: np.ndarray


def langevin(beta):
    """Langevin function L(beta) = coth(beta) - 1/beta, L(0) = 0."""
    beta = np.asarray(beta, dtype=float)
    small = np.abs(beta) < _BETA_SMALL
    b = np.where(small, 1.0, beta)
    direct = 1.0 / np.tanh(b) - 1.0 / b
    b2 = beta * beta
    series = beta * (1.0 / 3.0 - b2 / 45.0 + 2.0 * b2 * b2 / 945.0)
    return np.where(small, series, direct)[()]


def _csch2(beta):
    # 4 e^{-2b} / (1 - e^{-2b})^2, overflow-free for any positive beta
    e = np.expm1(-2.0 * np.asarray(beta, dtype=float))
    return 4.0 * np.exp(-2.0 * np.asarray(beta, dtype=float)) / (e * e)


def langevin_prime(beta):
    """Derivative L'(beta) = 1/beta^2 - csch(beta)^2, L'(0) = 1/3."""
    beta = np.asarray(beta, dtype=float)
    small = np.abs(beta) < _BETA_SMALL
    b = np.where(small, 1.0, beta)
    direct = 1.0 / (b * b) - _csch2(b)
    b2 = beta * beta
    series = 1.0 / 3.0 - b2 / 15.0 + 2.0 * b2 * b2 / 189.0
    return np.where(small, series, direct)[()]


def langevin_inverse(h, tol: float = 1e-12):
    """Invert L(beta) = h for beta >= 0 by a safeguarded Newton/bisection hybrid.

    Accepts h in [0, 1); raises for h >= 1, where no finite beta exists.
    The residual satisfies |L(beta) - h| <= tol.
    """
    h_arr = np.asarray(h, dtype=float)
    if np.any(h_arr < 0.0) or np.any(h_arr >= 1.0):
        raise ValueError("langevin_inverse requires 0 <= h < 1")
    scalar = h_arr.ndim == 0
    h_arr = np.atleast_1d(h_arr)

    beta = np.empty_like(h_arr)
    zero = h_arr == 0.0
    asym = h_arr >= _H_ASYMPTOTIC
    beta[zero] = 0.0
    beta[asym] = 1.0 / (1.0 - h_arr[asym])

    mid = ~(zero | asym)
    if np.any(mid):
        hm = h_arr[mid]
        # rational approximant as the Newton seed
        x = hm * (3.0 - hm * hm) / (1.0 - hm * hm)
        x = np.where(hm < 1e-3, 3.0 * hm + 1.8 * hm**3, x)
        lo = np.zeros_like(hm)
        hi = 1.0 / (1.0 - hm) + 1.0
        x = np.clip(x, 1e-300, hi)
        for _ in range(100):
            f = langevin(x) - hm
            if np.all(np.abs(f) <= tol):
                break
            below = f < 0.0
            lo = np.where(below, x, lo)
            hi = np.where(below, hi, x)
            step = f / langevin_prime(x)
            xn = x - step
            bad = ~np.isfinite(xn) | (xn <= lo) | (xn >= hi)
            x = np.where(bad, 0.5 * (lo + hi), xn)
        beta[mid] = x

    return beta[0] if scalar else beta


def _psi_zeta_prime_from_beta(beta, h):
    """Exact (psi, zeta, psi_prime) given beta = L^{-1}(h); series for small beta."""
    beta = np.asarray(beta, dtype=float)
    h = np.asarray(h, dtype=float)
    small = beta < _BETA_SMALL
    b = np.where(small, 1.0, beta)

    psi_d = 1.0 - 2.0 * h / b
    coth = 1.0 / np.tanh(b)
    zeta_d = coth - 3.0 * psi_d / b
    # implicit differentiation: dpsi/dh = (dpsi/dbeta) / L'(beta)
    lp = 1.0 / (b * b) - _csch2(b)
    dpsi_dbeta = -2.0 * lp / b + 2.0 * langevin(b) / (b * b)
    prime_d = dpsi_dbeta / lp

    b2 = beta * beta
    psi_s = 1.0 / 3.0 + 2.0 * b2 / 45.0 - 4.0 * b2 * b2 / 945.0
    zeta_s = beta * (1.0 / 5.0 - b2 / 105.0 + 4.0 * b2 * b2 / 4725.0)
    lp_s = 1.0 / 3.0 - b2 / 15.0 + 2.0 * b2 * b2 / 189.0
    dpsi_s = beta * (4.0 / 45.0 - 16.0 * b2 / 945.0 + 12.0 * b2 * b2 / 4725.0)
    prime_s = dpsi_s / lp_s

    psi = np.where(small, psi_s, psi_d)
    zeta = np.where(small, zeta_s, zeta_d)
    prime = np.where(small, prime_s, prime_d)
    return psi, zeta, prime


def closure_exact(h, tol: float = 1e-12) -> ClosureEval:
    """Exact Minerbo closure: psi = 1 - 2h/beta, zeta = coth(beta) - 3 psi/beta.

    The boundary h = 1 corresponds to a Dirac-delta beam, with
    psi = zeta = 1 and dpsi/dh -> 2.
    """
    h_arr = np.atleast_1d(np.asarray(getattr(h, "h", h), dtype=float))
    if np.any(h_arr < 0.0) or np.any(h_arr > 1.0):
        raise ValueError("flux factor must lie in [0, 1]")
    scalar = np.asarray(getattr(h, "h", h)).ndim == 0

    psi = np.full_like(h_arr, 1.0 / 3.0)
    zeta = np.zeros_like(h_arr)
    prime = np.zeros_like(h_arr)

    beam = h_arr == 1.0
    psi[beam], zeta[beam], prime[beam] = 1.0, 1.0, 2.0

    interior = ~beam & (h_arr > 0.0)
    if np.any(interior):
        hi = h_arr[interior]
        beta = langevin_inverse(hi, tol=tol)
        psi[interior], zeta[interior], prime[interior] = _psi_zeta_prime_from_beta(beta, hi)

    if scalar:
        return ClosureEval(psi[0], zeta[0], prime[0])
    return ClosureEval(psi, zeta, prime)


def _psi_approx(h):
    # grouped so that psi(1) = 1 and psi'(1) = 2 evaluate exactly in floats
    return (1.0 + 2.0 * (h * h * (3.0 - h + 3.0 * h * h)) / 5.0) / 3.0


def _psi_approx_prime(h):
    return 2.0 * (h * (6.0 - 3.0 * h + 12.0 * h * h)) / 15.0


def _zeta_approx(h):
    return (
        h
        * (45.0 + h * (10.0 + h * (-12.0 + h * (-12.0 + h * (38.0 + h * (-12.0 + 18.0 * h))))))
        / 75.0
    )


def closure_approx(h) -> ClosureEval:
    """Polynomial Minerbo closure (relative error <1% in psi, <3% in zeta)."""
    h_arr = np.asarray(getattr(h, "h", h), dtype=float)
    if np.any(h_arr < 0.0) or np.any(h_arr > 1.0):
        raise ValueError("flux factor must lie in [0, 1]")
    return ClosureEval(_psi_approx(h_arr), _zeta_approx(h_arr), _psi_approx_prime(h_arr))


def eddington_factors(h, spec: ClosureSpec):
    """(psi, zeta, psi_prime) arrays for raw flux-factor input, per spec."""
    if spec.kind is ClosureKind.APPROXIMATE:
        h = np.asarray(h, dtype=float)
        return _psi_approx(h), _zeta_approx(h), _psi_approx_prime(h)
    ev = closure_exact(h, tol=spec.langevin_tol)
    return ev.psi, ev.zeta, ev.psi_prime


_DELTA = np.eye(3)


def closure_tensors(moments, spec: ClosureSpec = APPROXIMATE):
    """Rank-2 tensor k and rank-3 tensor q from primitive moments.

    k = (1/2)[(1-psi) delta + (3 psi - 1) n n],
    q = (1/2)[(h-zeta)(n delta + perms) + (5 zeta - 3h) n n n],
    with n = I/|I|.  Below the isotropy threshold, k = delta/3 and q = 0.
    """
    d = np.asarray(moments.d, dtype=float)
    i = np.asarray(moments.i, dtype=float)
    if np.any(d <= 0.0):
        raise ValueError("density must be positive")
    inorm = np.linalg.norm(i, axis=-1)
    if np.any(inorm > d * (1.0 + 1e-12)):
        raise ValueError("moments must be realizable: |I| <= D")

    h = np.clip(inorm / d, 0.0, 1.0)
    psi, zeta, _ = eddington_factors(h, spec)

    iso = inorm < spec.h_iso_threshold * d
    denom = np.where(iso, 1.0, inorm)
    n = i / denom[..., None]

    nn = n[..., :, None] * n[..., None, :]
    k = 0.5 * ((1.0 - psi)[..., None, None] * _DELTA + (3.0 * psi - 1.0)[..., None, None] * nn)

    ndelta = (
        n[..., :, None, None] * _DELTA[None, :, :]
        + n[..., None, :, None] * _DELTA[:, None, :]
        + n[..., None, None, :] * _DELTA[:, :, None]
    )
    nnn = nn[..., :, :, None] * n[..., None, None, :]
    q = 0.5 * ((h - zeta)[..., None, None, None] * ndelta + (5.0 * zeta - 3.0 * h)[..., None, None, None] * nnn)

    if np.any(iso):
        k = np.where(iso[..., None, None], _DELTA / 3.0, k)
        q = np.where(iso[..., None, None, None], 0.0, q)
    return k, q


def phi_functions(h, spec: ClosureSpec):
    """phi1 = 3 psi - 1 - 3 psi' h and phi2 = (3 psi - 1)/h, with the h -> 0 limit.

    Both vanish at h = 0 (psi'(0) = 0 and 3 psi - 1 = O(h^2) for either closure).
    """
    h = np.asarray(h, dtype=float)
    psi, _, prime = eddington_factors(h, spec)
    phi1 = 3.0 * psi - 1.0 - 3.0 * prime * h
    safe = np.where(h == 0.0, 1.0, h)
    phi2 = np.where(h == 0.0, 0.0, (3.0 * psi - 1.0) / safe)
    return phi1, phi2


def closure_tensor_derivatives(moments, spec: ClosureSpec = APPROXIMATE):
    """Closed-form partial derivatives of k_ij D with respect to D and I_k.

    d(k_ij D)/dD   = (1/2) phi1 (n_i n_j - delta_ij/3) + delta_ij/3
    d(k_ij D)/dI_k = (1/2) psi' (3 n_i n_j - delta_ij) n_k
                     + (1/2) phi2 (n_i delta_jk + delta_ik n_j - 2 n_i n_j n_k)
    """
    d = np.asarray(moments.d, dtype=float)
    i = np.asarray(moments.i, dtype=float)
    inorm = np.linalg.norm(i, axis=-1)
    h = np.clip(inorm / d, 0.0, 1.0)
    _, _, prime = eddington_factors(h, spec)
    phi1, phi2 = phi_functions(h, spec)

    iso = inorm < spec.h_iso_threshold * d
    denom = np.where(iso, 1.0, inorm)
    n = i / denom[..., None]
    nn = n[..., :, None] * n[..., None, :]

    dk_dD = 0.5 * phi1[..., None, None] * (nn - _DELTA / 3.0) + _DELTA / 3.0

    term1 = (3.0 * nn - _DELTA)[..., :, :, None] * n[..., None, None, :]
    nd_jk = n[..., :, None, None] * _DELTA[None, :, :]  # n_i delta_jk
    dn_ik = _DELTA[:, None, :] * n[..., None, :, None]  # delta_ik n_j
    nnn = nn[..., :, :, None] * n[..., None, None, :]
    term2 = nd_jk + dn_ik - 2.0 * nnn

    dk_dI = 0.5 * prime[..., None, None, None] * term1 + 0.5 * phi2[..., None, None, None] * term2
    if np.any(iso):
        dk_dI = np.where(iso[..., None, None, None], 0.0, dk_dI)
        dk_dD = np.where(iso[..., None, None], _DELTA / 3.0, dk_dD)
    return dk_dD, dk_dI
