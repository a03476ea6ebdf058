import numpy as np
import pytest
from numpy.testing import assert_allclose

from twomoment.closure import APPROXIMATE
from twomoment.dg import (
    MomentField,
    cell_average,
    element_integral,
    lf_flux_energy,
    lf_flux_spatial,
    project_velocity,
    _restricted_conserved,
    _spatial_flux,
)
from twomoment.mesh import BCKind, BoundaryCondition, build_mesh
from twomoment.moments import PrimitiveMoments
from twomoment.solvers import random_realizable, random_unit_vector


def const_velocity(vec):
    vec = np.asarray(vec, dtype=float)

    def fn(*coords):
        shape = np.broadcast(*coords).shape if len(coords) > 1 else np.shape(coords[0])
        return np.broadcast_to(vec, shape + (3,))

    return fn


def smooth_field(mesh, h=0.4):
    """Smooth realizable primitives on the mesh nodes (packed)."""
    eps = mesh.eps_nodes  # (NE, ne)
    x = mesh.x_nodes[0]  # (NX, nx)
    if mesh.d_x == 1:
        E = eps[:, None, :, None]
        X = x[None, :, None, :]
        d = 1.0 + 0.5 * np.sin(2 * np.pi * X) * np.cos(np.pi * E / (mesh.energy_edges[-1] + 1))
        shape = d.shape
    else:
        y = mesh.x_nodes[1]
        E = eps[:, None, None, :, None, None]
        X = x[None, :, None, None, :, None]
        Y = y[None, None, :, None, None, :]
        d = 1.0 + 0.4 * np.sin(2 * np.pi * X) * np.cos(2 * np.pi * Y) * np.cos(
            np.pi * E / (mesh.energy_edges[-1] + 1)
        )
        shape = d.shape
    m = np.zeros(shape + (4,))
    m[..., 0] = d
    m[..., 1] = h * d * np.cos(np.pi * (d - 1.0))
    m[..., 2] = 0.3 * h * d * np.sin(np.pi * (d - 1.0))
    return m


def test_project_constant_velocity():
    mesh = build_mesh([0.0, 1.0], [np.linspace(0, 1, 4)], degree=2)
    vel = project_velocity(mesh, const_velocity([0.3, 0.1, 0.0]))
    assert_allclose(vel.dv_nodes, 0.0, atol=1e-13)
    assert_allclose(vel.vhat[0], np.broadcast_to([0.3, 0.1, 0.0], (4, 3)))
    assert_allclose(vel.alpha_eps, 0.0, atol=1e-14)


@pytest.mark.parametrize("k", [1, 2])
def test_project_linear_velocity_exact_gradient(k):
    mesh = build_mesh([0.0, 1.0], [np.linspace(0, 1, 5)], degree=k)

    def fn(x):
        v = np.zeros(np.shape(x) + (3,))
        v[..., 0] = 0.05 + 0.2 * x
        v[..., 1] = -0.1 * x
        return v

    # periodic wrap would see the jump at the domain edge; use outflow bc
    out = BoundaryCondition(BCKind.OUTFLOW)
    mesh = build_mesh([0.0, 1.0], [np.linspace(0, 1, 5)], degree=k, bc=[(out, out)])
    vel = project_velocity(mesh, fn)
    assert_allclose(vel.dv_nodes[..., 0, 0], 0.2, atol=1e-13)
    assert_allclose(vel.dv_nodes[..., 0, 1], -0.1, atol=1e-13)
    assert_allclose(vel.dv_nodes[..., 0, 2], 0.0, atol=1e-14)
    # alpha is the largest |eigenvalue| of -sym(dv): diag(-0.2, 0) block + shear
    a = np.array([[0.2, 0.05], [0.05, 0.0]])
    lam = np.abs(np.linalg.eigvalsh(a)).max()
    assert_allclose(vel.alpha_eps, lam, atol=1e-12)


def test_project_velocity_jump_face_average():
    out = BoundaryCondition(BCKind.OUTFLOW)
    mesh = build_mesh([0.0, 1.0], [[0.0, 0.5, 1.0]], degree=1, bc=[(out, out)])
    vmax = 1e-3

    def fn(x):
        v = np.zeros(np.shape(x) + (3,))
        v[..., 0] = np.where(x < 0.5, 0.0, vmax)
        return v

    vel = project_velocity(mesh, fn)
    assert_allclose(vel.vhat[0][1, 0], vmax / 2.0)


def test_project_rejects_superluminal():
    mesh = build_mesh([0.0, 1.0], [[0.0, 1.0]], degree=1)
    with pytest.raises(ValueError):
        project_velocity(mesh, const_velocity([1.0, 0.0, 0.0]))


def test_lf_spatial_consistency():
    m = random_realizable(1, h_max=0.8, size=6)
    vhat = np.tile([0.2, 0.0, 0.0], (6, 1))
    flux = lf_flux_spatial(m, m, vhat, 0)
    direct = _spatial_flux(m.packed(), vhat[..., 0], 0, APPROXIMATE)
    assert_allclose(flux, direct, rtol=1e-14)


def test_lf_spatial_isotropic_rest():
    m = PrimitiveMoments(1.0, [0.0, 0.0, 0.0])
    flux = lf_flux_spatial(m, m, np.zeros(3), 0)
    assert_allclose(flux, [0.0, 1.0 / 3.0, 0.0, 0.0])


def test_lf_spatial_upwinds_beam_into_vacuum():
    beam = PrimitiveMoments(1.0, [1.0, 0.0, 0.0])
    vacuum = PrimitiveMoments(1e-40, [0.0, 0.0, 0.0])
    flux = lf_flux_spatial(beam, vacuum, np.zeros(3), 0)
    assert_allclose(flux, [1.0, 1.0, 0.0, 0.0], atol=1e-12)


def test_theta_states_realizable():
    # U[vhat^i] +- F^i(U, vhat) stay realizable for realizable inputs
    rng = np.random.default_rng(8)
    m = random_realizable(rng, h_max=1.0, size=5000).packed()
    vhat = rng.uniform(0.0, 0.999, 5000)[:, None] * random_unit_vector(rng, 5000)
    for axis in range(3):
        w = vhat[..., axis]
        u = _restricted_conserved(m, w, axis, APPROXIMATE)
        f = _spatial_flux(m, w, axis, APPROXIMATE)
        for theta in (u + f, u - f):
            gam = theta[..., 0] - np.linalg.norm(theta[..., 1:], axis=-1)
            assert np.all(gam >= -1e-12 * theta[..., 0])


def test_lf_energy_zero_gradient():
    m1 = random_realizable(2, size=4)
    m2 = random_realizable(3, size=4)
    flux, alpha = lf_flux_energy(m1, m2, np.zeros((4, 3, 3)))
    assert_allclose(alpha, 0.0)
    assert_allclose(flux, 0.0)


def test_lf_energy_alpha_cases():
    m = random_realizable(4, size=1)
    dv = np.zeros((1, 3, 3))
    dv[0, 0, 0] = 0.7
    _, alpha = lf_flux_energy(m, m, dv)
    assert_allclose(alpha, 0.7, atol=1e-14)
    rot = np.zeros((1, 3, 3))
    rot[0, 0, 1], rot[0, 1, 0] = 0.4, -0.4
    _, alpha = lf_flux_energy(m, m, rot)
    assert_allclose(alpha, 0.0, atol=1e-14)


def _uniform_field(mesh, vel, m_point):
    m = np.broadcast_to(m_point, mesh.elem_shape + mesh.node_shape + (4,)).copy()
    return MomentField.from_primitives(mesh, vel, m)


def test_rhs_free_stream_1d():
    mesh = build_mesh(np.linspace(0.0, 10.0, 4), [np.linspace(0, 1, 5)], degree=2)
    vel = project_velocity(mesh, const_velocity([0.2, 0.0, 0.0]))
    field = _uniform_field(mesh, vel, np.array([1.0, 0.3, 0.0, 0.0]))
    rhs, sample = field.assemble_rhs()
    assert_allclose(rhs, 0.0, atol=1e-13)
    assert sample.number_out == 0.0  # periodic: no boundary record


def test_rhs_free_stream_2d():
    mesh = build_mesh(
        np.linspace(0.0, 5.0, 3),
        [np.linspace(0, 1, 3), np.linspace(0, 1, 4)],
        degree=1,
    )
    vel = project_velocity(mesh, const_velocity([0.15, -0.1, 0.0]))
    field = _uniform_field(mesh, vel, np.array([1.0, 0.2, 0.1, 0.0]))
    rhs, _ = field.assemble_rhs()
    assert_allclose(rhs, 0.0, atol=1e-13)


def _reference_upwind_dg(xg, wg, nelem, width, nodal, nsteps=0):
    """Independent scalar DG for u_t + u_x = 0, pure upwind flux, collocation
    LG basis; returns du/dt.  Built directly from numpy polynomial tools."""
    k1 = xg.size
    # basis ell_b as polynomial coefficients via Vandermonde inversion
    V = np.vander(xg, k1, increasing=True)
    C = np.linalg.inv(V)  # column b: coeffs of ell_b in 1, x, x^2, ...
    ell_at = lambda pts: np.stack([np.polynomial.polynomial.polyval(pts, C[:, b]) for b in range(k1)], -1)
    dell = np.zeros((k1, k1))
    for b in range(k1):
        dc = np.polynomial.polynomial.polyder(C[:, b])
        dell[:, b] = np.polynomial.polynomial.polyval(xg, dc)
    lb = ell_at(np.array([-1.0]))[0]
    rb = ell_at(np.array([1.0]))[0]
    rhs = np.zeros_like(nodal)
    for e in range(nelem):
        um = nodal[e]
        # upwind flux: value from the left at each face
        f_left = nodal[e - 1] @ rb
        f_right = um @ rb
        for b in range(k1):
            vol = np.sum(wg * um * dell[:, b])
            rhs[e, b] = (2.0 / width) * (vol - f_right * rb[b] + f_left * lb[b]) / wg[b]
    return rhs


def test_rhs_matches_reference_upwind_advection():
    # v = 0 beam data: both moment components reduce to scalar advection
    nx = 8
    mesh = build_mesh([0.0, 1.0], [np.linspace(0, 1, nx + 1)], degree=2)
    vel = project_velocity(mesh, const_velocity([0.0, 0.0, 0.0]))
    x = mesh.x_nodes[0]
    d = 0.5 + 0.49 * np.sin(2 * np.pi * x)  # (NX, nx)
    m = np.zeros((1, nx, 3, 3, 4))
    m[..., 0] = d[None, :, None, :]
    m[..., 1] = d[None, :, None, :]
    field = MomentField.from_primitives(mesh, vel, m)
    rhs, _ = field.assemble_rhs()

    xg, wg = np.polynomial.legendre.leggauss(3)
    ref = _reference_upwind_dg(xg, wg, nx, 1.0 / nx, d)
    for a in range(3):  # every energy node sees the same spatial operator
        assert_allclose(rhs[0, :, a, :, 0], ref, atol=1e-12)
        assert_allclose(rhs[0, :, a, :, 1], ref, atol=1e-12)


def test_rhs_no_energy_coupling_without_gradients():
    # with dv = 0, energy-flux and source contributions vanish identically,
    # so each energy node must see exactly the spatial operator of its slice
    mesh = build_mesh(np.linspace(0.0, 8.0, 5), [np.linspace(0, 1, 4)], degree=1)
    vel = project_velocity(mesh, const_velocity([0.25, 0.0, 0.0]))
    field = MomentField.from_primitives(mesh, vel, smooth_field(mesh))
    rhs, _ = field.assemble_rhs()

    for e in range(mesh.n_eps):
        for a in range(2):
            single = build_mesh(mesh.energy_edges[e : e + 2], [mesh.space_edges[0]], degree=1)
            vel1 = project_velocity(single, const_velocity([0.25, 0.0, 0.0]))
            m_slice = smooth_field(mesh)[e : e + 1, :, a : a + 1, :]
            sub = MomentField.from_primitives(single, vel1, m_slice)
            rhs1, _ = sub.assemble_rhs()
            assert_allclose(rhs[e, :, a], rhs1[0, :, 0], atol=1e-13)


def test_global_number_conservation_periodic():
    mesh = build_mesh(np.linspace(0.0, 6.0, 4), [np.linspace(0, 1, 6)], degree=2)

    def fn(x):
        v = np.zeros(np.shape(x) + (3,))
        v[..., 0] = 0.2 + 0.1 * np.sin(2 * np.pi * x)
        return v

    vel = project_velocity(mesh, fn)
    field = MomentField.from_primitives(mesh, vel, smooth_field(mesh, h=0.5))
    rhs, _ = field.assemble_rhs()
    total = element_integral(mesh, rhs)[..., 0].sum()
    scale = element_integral(mesh, field.u)[..., 0].sum()
    assert abs(total) <= 1e-12 * abs(scale) / mesh.volumes.min() * mesh.volumes.max()


def test_cell_average_constant_and_linear():
    mesh = build_mesh([0.0, 1.0], [np.linspace(0, 2, 3)], degree=2)
    u = np.zeros(mesh.elem_shape + mesh.node_shape + (4,))
    u[..., 0] = 3.7
    avg = cell_average(mesh, u, (0, 0))
    assert_allclose(avg, [3.7, 0, 0, 0], rtol=1e-14)
    # linear in x, constant in eps: average = midpoint value
    x = mesh.x_nodes[0]
    u[..., 1] = (2.0 + 5.0 * x)[None, :, None, :]
    avg = cell_average(mesh, u, (0, 1))
    mid = 2.0 + 5.0 * 0.5 * (mesh.space_edges[0][1] + mesh.space_edges[0][2])
    assert_allclose(avg[1], mid, rtol=1e-13)


def test_cell_average_against_oversampled_quadrature():
    from twomoment.mesh import lagrange_matrix

    mesh = build_mesh([0.5, 2.0], [np.linspace(0, 1, 2)], degree=2)
    rng = np.random.default_rng(12)
    u = rng.normal(size=mesh.elem_shape + mesh.node_shape + (4,))
    avg = cell_average(mesh, u, (0, 0))

    xg, wg = np.polynomial.legendre.leggauss(30)
    L = lagrange_matrix(mesh.tables.lg_points, xg)  # (30, 3)
    dense = np.einsum("pa,qb,abc->pqc", L, L, u[0, 0])
    eps = 0.5 * (0.5 + 2.0) + 0.5 * 1.5 * xg
    w_eps = 0.5 * 1.5 * wg * eps**2
    w_x = 0.5 * 1.0 * wg
    integral = np.einsum("p,q,pqc->c", w_eps, w_x, dense)
    vol = np.sum(w_eps) * np.sum(w_x)
    assert_allclose(avg, integral / vol, rtol=1e-12)
