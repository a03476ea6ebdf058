import numpy as np
import pytest
from numpy.testing import assert_allclose

from twomoment.dg import element_integral
from twomoment.limiters import (
    LimiterConfig,
    _aux_values,
    compute_correction,
    element_number_energy,
    energy_limiter,
    realizability_limiter,
)
from twomoment.mesh import build_mesh


def _gamma_min(mesh, u):
    pts = _aux_values(mesh, u)
    return (pts[..., 0] - np.linalg.norm(pts[..., 1:], axis=-1)).min()


def _number_per_element(mesh, u):
    return element_integral(mesh, u)[..., 0]


def test_realizable_field_untouched():
    mesh = build_mesh([0.0, 1.0], [np.linspace(0, 1, 4)], degree=2)
    rng = np.random.default_rng(3)
    u = np.zeros(mesh.elem_shape + mesh.node_shape + (4,))
    u[..., 0] = 1.0 + 0.1 * rng.normal(size=u.shape[:-1])
    u[..., 1] = 0.2 * u[..., 0]
    before = u.copy()
    rep = realizability_limiter(mesh, u)
    assert rep.theta_u_min == 1.0 and rep.theta_n_min == 1.0
    assert rep.limited_elements == 0 and rep.fallback_elements == 0
    assert_allclose(u, before)


def test_theta_n_formula():
    # one element, N linear in x with average 1 and Lobatto-endpoint min -0.1
    mesh = build_mesh([0.0, 1.0], [[0.0, 1.0]], degree=1)
    u = np.zeros((1, 1, 2, 2, 4))
    xi = mesh.tables.lg_points
    u[0, 0, :, :, 0] = 1.0 + 1.1 * xi[None, :]
    rep = realizability_limiter(mesh, u)
    assert_allclose(rep.theta_n_min, 1.0 / 1.1, rtol=1e-12)
    # element average of N is preserved exactly
    assert_allclose(_number_per_element(mesh, u)[0, 0], 1.0 / 3.0, rtol=1e-13)
    assert _gamma_min(mesh, u) >= -1e-14


def test_limiter_enforces_gamma_and_preserves_number():
    mesh = build_mesh([0.0, 2.0], [np.linspace(0, 1, 5)], degree=2)
    rng = np.random.default_rng(7)
    shape = mesh.elem_shape + mesh.node_shape
    u = np.zeros(shape + (4,))
    u[..., 0] = 1.0 + 0.3 * rng.normal(size=shape)
    u[..., 1] = u[..., 0] * rng.uniform(-1.3, 1.3, size=shape)
    u[..., 2] = u[..., 0] * rng.uniform(-0.4, 0.4, size=shape)
    # keep cell averages realizable but nodal values often outside
    number_before = _number_per_element(mesh, u)
    assert np.all(number_before > 0)
    rep = realizability_limiter(mesh, u)
    assert _gamma_min(mesh, u) >= -1e-12
    assert rep.limited_elements > 0
    assert_allclose(_number_per_element(mesh, u), number_before, rtol=1e-14)


def test_fallback_branch_nonrealizable_average():
    mesh = build_mesh([0.0, 1.0], [[0.0, 1.0]], degree=1)
    u = np.zeros((1, 1, 2, 2, 4))
    u[..., 0] = 1.0
    u[..., 1] = 2.0  # |G| = 2N everywhere: average itself non-realizable
    number_before = _number_per_element(mesh, u)
    cfg = LimiterConfig(delta_small=1e-10)
    rep = realizability_limiter(mesh, u, cfg)
    assert rep.fallback_elements == 1
    assert_allclose(_number_per_element(mesh, u), number_before, rtol=1e-14)
    assert _gamma_min(mesh, u) >= 0.0
    gnorm = np.linalg.norm(u[..., 1:], axis=-1)
    assert_allclose(gnorm, (1.0 - 1e-10) * u[..., 0], rtol=1e-12)
    # idempotent: the repaired field passes through unchanged
    before = u.copy()
    rep2 = realizability_limiter(mesh, u, cfg)
    assert rep2.theta_u_min == 1.0
    assert_allclose(u, before)


def test_limiter_requires_positive_average():
    mesh = build_mesh([0.0, 1.0], [[0.0, 1.0]], degree=1)
    u = np.zeros((1, 1, 2, 2, 4))
    u[..., 0] = -1.0
    with pytest.raises(ValueError):
        realizability_limiter(mesh, u)


def test_element_number_energy_frozen():
    # N = c on [0,1] energy x unit cell: number = c/3, energy = c/4
    mesh = build_mesh([0.0, 1.0], [[0.0, 1.0]], degree=2)
    u = np.zeros((1, 1, 3, 3, 4))
    c = 2.5
    u[..., 0] = c
    v = np.zeros((1, 1, 3, 3, 3))
    number, energy = element_number_energy(mesh, u, v)
    assert_allclose(number[0, 0], c / 3.0, rtol=1e-14)
    assert_allclose(energy[0, 0], c / 4.0, rtol=1e-14)
    # scaling all nodal moments scales both linearly
    n2, e2 = element_number_energy(mesh, 1.7 * u, v)
    assert_allclose(n2, 1.7 * number, rtol=1e-14)
    assert_allclose(e2, 1.7 * energy, rtol=1e-14)
    # with nonzero v the energy sees v.G
    u[..., 1] = 1.0
    v[..., 0] = 0.5
    _, e3 = element_number_energy(mesh, u, v)
    assert_allclose(e3[0, 0], c / 4.0 + 0.5 / 4.0, rtol=1e-14)


def test_compute_correction_examples():
    th1, th2 = compute_correction(1.0, 1.0, 1.0, 2.0, 0.1)
    assert_allclose([th1, th2], [0.1, -0.1], atol=1e-15)
    th1, th2 = compute_correction(1.0, 1.0, 2.0, 2.0, 0.3)
    assert th1 == 0.0 and th2 == 0.0  # proportional rows: singular
    th1, th2 = compute_correction(1.0, 1.0, 1.0, 1.1, 0.2, theta_min=-0.5)
    assert_allclose([th1, th2], [0.5, -0.5], atol=1e-12)


def _column_setup():
    mesh = build_mesh([0.0, 1.0, 2.0, 3.0], [[0.0, 1.0]], degree=1)
    u = np.zeros(mesh.elem_shape + mesh.node_shape + (4,))
    eps = mesh.eps_nodes[:, None, :, None]
    u[..., 0] = 1.0 + 0.5 * np.sin(eps)
    u[..., 1] = 0.3 * u[..., 0]
    v = np.zeros(mesh.elem_shape + mesh.node_shape + (3,))
    return mesh, u, v


def test_energy_limiter_noop_when_energies_match():
    mesh, u, v = _column_setup()
    _, e_hat = element_number_energy(mesh, u, v)
    before = u.copy()
    rep = energy_limiter(mesh, u, e_hat, v)
    assert rep.corrected_columns == 0
    assert_allclose(u, before)


def test_energy_limiter_restores_column_energy():
    mesh, u, v = _column_setup()
    number0, e_hat = element_number_energy(mesh, u, v)

    # simulate a realizability-limiter pass: blend element 0 toward its cell
    # average (number-neutral, energy-shifting)
    avg = element_integral(mesh, u) / mesh.volumes[..., None]
    theta = 0.4
    u[0] = theta * (u[0] - avg[0, :, None, None, :]) + avg[0, :, None, None, :]
    number1, energy1 = element_number_energy(mesh, u, v)
    assert_allclose(number1, number0, rtol=1e-13)
    de = (energy1 - e_hat).sum(axis=0)
    assert np.abs(de).max() > 1e-6  # the blend did move energy

    rep = energy_limiter(mesh, u, e_hat, v)
    number2, energy2 = element_number_energy(mesh, u, v)
    assert_allclose(number2.sum(axis=0), number0.sum(axis=0), rtol=1e-13)
    assert_allclose(energy2.sum(axis=0), e_hat.sum(axis=0), rtol=1e-13)
    assert rep.corrected_columns == 1
    # positive rescaling preserves realizability
    assert _gamma_min(mesh, u) >= 0.0


def test_limiter_config_validation():
    with pytest.raises(ValueError):
        LimiterConfig(theta_min=-1.0)
