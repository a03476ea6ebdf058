"""Tensor-product phase-space mesh (energy x space) and DG node tables.

Elements are K = K_eps x K_x with the energy measure tau(eps) = eps^2.
Interpolation nodes are the (k+1)-point Legendre-Gauss points per dimension;
the auxiliary Legendre-Gauss-Lobatto points (khat-point rule, khat =
ceil((k+5)/2)) enter the realizability analysis and the limiter.  All
reference-element operators are precomputed here and shared read-only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "BCKind",
    "BoundaryCondition",
    "QuadratureTables",
    "PhaseSpaceMesh",
    "build_mesh",
    "node_sets",
    "gauss_legendre",
    "gauss_lobatto",
    "lagrange_matrix",
    "lagrange_derivative_matrix",
]


class BCKind(Enum):
    PERIODIC = "periodic"
    INFLOW = "inflow"
    OUTFLOW = "outflow"


@dataclass(frozen=True)
class BoundaryCondition:
    """Spatial boundary condition; INFLOW carries a conserved-moment profile
    ``profile(eps, *x_transverse) -> (..., 4)`` evaluated at face quad points."""

    kind: BCKind
    profile: Callable | None = None

    def __post_init__(self):
        if self.kind is BCKind.INFLOW and self.profile is None:
            raise ValueError("inflow boundary requires a profile")


def gauss_legendre(n: int):
    """(points, weights) of the n-point LG rule on [-1, 1]."""
    return np.polynomial.legendre.leggauss(n)


def gauss_lobatto(n: int):
    """(points, weights) of the n-point LGL rule on [-1, 1] (n >= 2).

    Interior points are the roots of P'_{n-1}; weights are
    2 / (n (n-1) P_{n-1}(x)^2).
    """
    if n < 2:
        raise ValueError("LGL rule needs at least 2 points")
    cp = np.zeros(n)
    cp[-1] = 1.0
    dcp = np.polynomial.legendre.legder(cp)
    interior = np.sort(np.polynomial.legendre.legroots(dcp))
    pts = np.concatenate([[-1.0], interior, [1.0]])
    pn = np.polynomial.legendre.legval(pts, cp)
    wts = 2.0 / (n * (n - 1) * pn * pn)
    return pts, wts


def lagrange_matrix(nodes: np.ndarray, points: np.ndarray) -> np.ndarray:
    """L[r, b] = ell_b(points[r]) for the Lagrange basis on ``nodes``."""
    nodes = np.asarray(nodes, dtype=float)
    points = np.atleast_1d(np.asarray(points, dtype=float))
    nb = nodes.size
    out = np.ones((points.size, nb))
    for b in range(nb):
        for c in range(nb):
            if c != b:
                out[:, b] *= (points - nodes[c]) / (nodes[b] - nodes[c])
    return out


def lagrange_derivative_matrix(nodes: np.ndarray, points: np.ndarray) -> np.ndarray:
    """D[r, b] = ell_b'(points[r])."""
    nodes = np.asarray(nodes, dtype=float)
    points = np.atleast_1d(np.asarray(points, dtype=float))
    nb = nodes.size
    out = np.zeros((points.size, nb))
    for b in range(nb):
        for c in range(nb):
            if c == b:
                continue
            term = np.ones(points.size) / (nodes[b] - nodes[c])
            for e in range(nb):
                if e != b and e != c:
                    term *= (points - nodes[e]) / (nodes[b] - nodes[e])
            out[:, b] += term
    return out


@dataclass(frozen=True)
class QuadratureTables:
    """Reference-element ([-1,1]) node sets and DG operators for degree k."""

    degree: int
    lg_points: np.ndarray
    lg_weights: np.ndarray
    lgl_points: np.ndarray
    lgl_weights: np.ndarray  # normalized: sum = 1
    to_faces: np.ndarray  # (2, k+1): rows = basis values at -1, +1
    to_lgl: np.ndarray  # (khat, k+1)
    deriv: np.ndarray  # (k+1, k+1): D[r, b] = ell_b'(xi_r)
    weak_deriv: np.ndarray  # Dw[b, r] = w_r ell_b'(xi_r) / w_b
    lift_lo: np.ndarray  # ell_b(-1) / w_b
    lift_hi: np.ndarray  # ell_b(+1) / w_b

    @property
    def khat(self) -> int:
        return self.lgl_points.size

    @property
    def what_end(self) -> float:
        """Endpoint LGL weight, the w-hat_khat of the CFL constants."""
        return float(self.lgl_weights[-1])


def _make_tables(k: int) -> QuadratureTables:
    xg, wg = gauss_legendre(k + 1)
    khat = (k + 6) // 2  # ceil((k+5)/2)
    xl, wl = gauss_lobatto(khat)
    wl = wl / wl.sum()
    faces = lagrange_matrix(xg, np.array([-1.0, 1.0]))
    to_lgl = lagrange_matrix(xg, xl)
    deriv = lagrange_derivative_matrix(xg, xg)
    weak = (wg[None, :] * deriv.T) / wg[:, None]
    return QuadratureTables(
        degree=k,
        lg_points=xg,
        lg_weights=wg,
        lgl_points=xl,
        lgl_weights=wl,
        to_faces=faces,
        to_lgl=to_lgl,
        deriv=deriv,
        weak_deriv=weak,
        lift_lo=faces[0] / wg,
        lift_hi=faces[1] / wg,
    )


@dataclass(frozen=True)
class PhaseSpaceMesh:
    energy_edges: np.ndarray
    space_edges: tuple
    degree: int
    bc: tuple  # ((lo, hi) BoundaryCondition per spatial dim)
    tables: QuadratureTables
    # derived geometry
    eps_widths: np.ndarray = field(init=False)
    eps_vol: np.ndarray = field(init=False)  # integral of eps^2 over K_eps
    eps_nodes: np.ndarray = field(init=False)  # (NE, k+1)
    x_widths: tuple = field(init=False)
    x_nodes: tuple = field(init=False)  # per dim (ND, k+1)
    volumes: np.ndarray = field(init=False)  # |K| over element grid

    def __post_init__(self):
        ee = np.asarray(self.energy_edges, dtype=float)
        if ee.ndim != 1 or ee.size < 2 or np.any(np.diff(ee) <= 0):
            raise ValueError("energy edges must be strictly increasing")
        if ee[0] < 0:
            raise ValueError("energy edges must be nonnegative")
        object.__setattr__(self, "energy_edges", ee)
        if self.degree not in (1, 2):
            raise ValueError("polynomial degree must be 1 or 2")

        xes = []
        for edges in self.space_edges:
            xe = np.asarray(edges, dtype=float)
            if xe.ndim != 1 or xe.size < 2 or np.any(np.diff(xe) <= 0):
                raise ValueError("spatial edges must be strictly increasing")
            xes.append(xe)
        if not 1 <= len(xes) <= 2:
            raise ValueError("d_x must be 1 or 2")
        object.__setattr__(self, "space_edges", tuple(xes))
        if len(self.bc) != len(xes):
            raise ValueError("one (lo, hi) boundary pair per spatial dim required")
        for lo, hi in self.bc:
            if (lo.kind is BCKind.PERIODIC) != (hi.kind is BCKind.PERIODIC):
                raise ValueError("periodic boundaries must pair up")

        xi = self.tables.lg_points
        ew = np.diff(ee)
        object.__setattr__(self, "eps_widths", ew)
        object.__setattr__(self, "eps_vol", np.diff(ee**3) / 3.0)
        object.__setattr__(
            self, "eps_nodes", 0.5 * (ee[:-1] + ee[1:])[:, None] + 0.5 * ew[:, None] * xi
        )
        xw, xn = [], []
        for xe in xes:
            w = np.diff(xe)
            xw.append(w)
            xn.append(0.5 * (xe[:-1] + xe[1:])[:, None] + 0.5 * w[:, None] * xi)
        object.__setattr__(self, "x_widths", tuple(xw))
        object.__setattr__(self, "x_nodes", tuple(xn))

        vol = self.eps_vol
        for w in xw:
            vol = vol[..., None] * w
        object.__setattr__(self, "volumes", vol)

    @property
    def d_x(self) -> int:
        return len(self.space_edges)

    @property
    def n_eps(self) -> int:
        return self.eps_widths.size

    @property
    def n_x(self) -> tuple:
        return tuple(w.size for w in self.x_widths)

    @property
    def elem_shape(self) -> tuple:
        return (self.n_eps,) + self.n_x

    @property
    def node_shape(self) -> tuple:
        return (self.degree + 1,) * (1 + self.d_x)

    @property
    def eps_hi(self) -> np.ndarray:
        return self.energy_edges[1:]

    def quad_weights_eps(self, power: int) -> np.ndarray:
        """Per-element nodal weights integrating f(eps) eps^power over K_eps."""
        w = self.tables.lg_weights
        return 0.5 * self.eps_widths[:, None] * w * self.eps_nodes**power

    def quad_weights_x(self, dim: int) -> np.ndarray:
        w = self.tables.lg_weights
        return 0.5 * self.x_widths[dim][:, None] * w


def build_mesh(
    energy_edges,
    space_edges: Sequence,
    degree: int,
    bc: Sequence | None = None,
) -> PhaseSpaceMesh:
    """Construct a mesh with all quadrature and interpolation tables.

    ``bc`` defaults to periodic in every spatial dimension.
    """
    space_edges = tuple(np.asarray(e, dtype=float) for e in space_edges)
    if bc is None:
        periodic = BoundaryCondition(BCKind.PERIODIC)
        bc = tuple((periodic, periodic) for _ in space_edges)
    else:
        bc = tuple(tuple(pair) for pair in bc)
    tables = _make_tables(degree)
    return PhaseSpaceMesh(
        energy_edges=np.asarray(energy_edges, dtype=float),
        space_edges=space_edges,
        degree=degree,
        bc=bc,
        tables=tables,
    )


def node_sets(mesh: PhaseSpaceMesh, element: tuple) -> dict:
    """Coordinate point sets for one element: the DG nodes and the auxiliary
    sets that replace one dimension's LG points by LGL points.

    Returns arrays of shape (npoints, 1 + d_x); key "union" concatenates all.
    """
    e_eps, *e_x = element
    xi_lgl = mesh.tables.lgl_points

    def phys(edges_lo, width, ref):
        return edges_lo + 0.5 * width * (ref + 1.0)

    coords_lg = [mesh.eps_nodes[e_eps]]
    lo_eps = mesh.energy_edges[e_eps]
    coords_lgl = [phys(lo_eps, mesh.eps_widths[e_eps], xi_lgl)]
    for d, e in enumerate(e_x):
        coords_lg.append(mesh.x_nodes[d][e])
        lo = mesh.space_edges[d][e]
        coords_lgl.append(phys(lo, mesh.x_widths[d][e], xi_lgl))

    def product(dims):
        grids = np.meshgrid(*dims, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    out = {"nodes": product(coords_lg)}
    aux_all = []
    dims = [coords_lgl[0]] + coords_lg[1:]
    out["aux_eps"] = product(dims)
    aux_all.append(out["aux_eps"])
    for d in range(mesh.d_x):
        dims = list(coords_lg)
        dims[1 + d] = coords_lgl[1 + d]
        out[f"aux_x{d + 1}"] = product(dims)
        aux_all.append(out[f"aux_x{d + 1}"])
    out["union"] = np.unique(np.concatenate([out["nodes"]] + aux_all, axis=0), axis=0)
    return out
