import numpy as np
import pytest
from numpy.testing import assert_allclose

from twomoment.closure import APPROXIMATE, EXACT
from twomoment.moments import (
    ConservedMoments,
    OpacitySpec,
    PrimitiveMoments,
    Velocity,
    VelocityDerivatives,
    eulerian_observables,
    model_fluxes,
    model_sources,
    primitive_to_conserved,
    realizability_check,
)
from twomoment.solvers import random_realizable, random_unit_vector

ZERO_DV = VelocityDerivatives(np.zeros((3, 3)))


def test_realizability_check_examples():
    rep = realizability_check(PrimitiveMoments(1.0, [0.5, 0.0, 0.0]))
    assert_allclose(rep.gamma, 0.5)
    assert rep.realizable
    rep = realizability_check(PrimitiveMoments(1.0, [1.2, 0.0, 0.0]))
    assert_allclose(rep.gamma, -0.2)
    assert not rep.realizable
    rep = realizability_check(PrimitiveMoments(1.0, [0.6, 0.8, 0.0]))
    assert_allclose(rep.gamma, 0.0, atol=1e-15)
    assert rep.realizable


def test_conversion_isotropic():
    u = primitive_to_conserved(
        PrimitiveMoments(1.0, [0.0, 0.0, 0.0]), Velocity([0.3, 0.0, 0.0])
    )
    assert_allclose(u.n, 1.0)
    assert_allclose(u.g, [0.1, 0.0, 0.0])


def test_conversion_beam_sits_on_boundary():
    u = primitive_to_conserved(
        PrimitiveMoments(1.0, [1.0, 0.0, 0.0]), Velocity([0.2, 0.0, 0.0]), APPROXIMATE
    )
    assert_allclose(u.n, 1.2)
    assert_allclose(u.g, [1.2, 0.0, 0.0])


def test_conversion_zero_velocity_identity():
    m = random_realizable(42, size=50)
    u = primitive_to_conserved(m, Velocity(np.zeros(3)))
    assert_allclose(u.n, m.d)
    assert_allclose(u.g, m.i)


@pytest.mark.parametrize("spec", [EXACT, APPROXIMATE])
def test_forward_map_realizability(spec):
    # the conversion map sends the realizable set into itself for |v| < 1
    rng = np.random.default_rng(2024)
    m = random_realizable(rng, h_max=1.0, size=10_000)
    v = rng.uniform(0.0, 1.0, size=10_000)[:, None] * random_unit_vector(rng, 10_000)
    v *= 0.999
    u = primitive_to_conserved(m, Velocity(v), spec)
    assert np.all(u.n > 0.0)
    assert np.all(np.linalg.norm(u.g, axis=-1) <= u.n * (1.0 + 1e-12))


def test_conversion_rejects_nonrealizable():
    with pytest.raises(ValueError):
        primitive_to_conserved(PrimitiveMoments(1.0, [2.0, 0.0, 0.0]), Velocity(np.zeros(3)))


def test_velocity_speed_limit():
    with pytest.raises(ValueError):
        Velocity([1.0, 0.0, 0.0])


def test_fluxes_isotropic_rest_frame():
    m = PrimitiveMoments(1.0, [0.0, 0.0, 0.0])
    u = primitive_to_conserved(m, Velocity(np.zeros(3)))
    fx, fe = model_fluxes(u, m, Velocity(np.zeros(3)), ZERO_DV)
    assert_allclose(fx[0], [0.0, 1.0 / 3.0, 0.0, 0.0])
    assert_allclose(fe, 0.0)


def test_energy_flux_from_compression():
    # only dv^1/dx^1 = a: isotropic moments give Fe = -(a D / 3; 0)
    a = 0.7
    dv = np.zeros((3, 3))
    dv[0, 0] = a
    m = PrimitiveMoments(2.0, [0.0, 0.0, 0.0])
    u = primitive_to_conserved(m, Velocity(np.zeros(3)))
    _, fe = model_fluxes(u, m, Velocity(np.zeros(3)), VelocityDerivatives(dv))
    assert_allclose(fe, [-a * 2.0 / 3.0, 0.0, 0.0, 0.0])


def test_flux_beam_with_velocity():
    m = PrimitiveMoments(1.0, [1.0, 0.0, 0.0])
    vel = Velocity([0.1, 0.0, 0.0])
    u = primitive_to_conserved(m, vel, APPROXIMATE)
    fx, _ = model_fluxes(u, m, vel, ZERO_DV, APPROXIMATE)
    assert_allclose(fx[0], [1.1, 1.1, 0.0, 0.0])


def test_sources_vanish_without_gradients_or_opacity():
    rng = np.random.default_rng(5)
    m = random_realizable(rng, size=10)
    vel = Velocity(np.tile([0.2, 0.0, 0.0], (10, 1)))
    u = primitive_to_conserved(m, vel)
    s, c = model_sources(u, m, vel, VelocityDerivatives(np.zeros((10, 3, 3))), OpacitySpec())
    assert_allclose(s, 0.0)
    assert_allclose(c, 0.0)


def test_sources_isotropic_any_gradient():
    dv = np.random.default_rng(6).normal(size=(3, 3))
    m = PrimitiveMoments(1.5, [0.0, 0.0, 0.0])
    u = primitive_to_conserved(m, Velocity(np.zeros(3)))
    s, _ = model_sources(u, m, Velocity(np.zeros(3)), VelocityDerivatives(dv), OpacitySpec())
    assert_allclose(s, 0.0, atol=1e-15)


def test_collision_term():
    op = OpacitySpec(chi=2.0, sigma=3.0, d0=4.0)
    m = PrimitiveMoments(1.0, [0.5, 0.0, 0.0])
    u = primitive_to_conserved(m, Velocity(np.zeros(3)))
    _, c = model_sources(u, m, Velocity(np.zeros(3)), ZERO_DV, op)
    assert_allclose(c[0], 2.0 * (4.0 - 1.0))
    assert_allclose(c[1:], [-5.0 * 0.5, 0.0, 0.0])


@pytest.mark.parametrize("spec", [EXACT, APPROXIMATE])
def test_beam_source_orthogonality(spec):
    # on the realizable boundary the aberration source cannot change |G|
    rng = np.random.default_rng(11)
    n = random_unit_vector(rng, 200)
    d = rng.uniform(0.5, 2.0, 200)
    m = PrimitiveMoments(d, d[:, None] * n)
    v = 0.3 * random_unit_vector(rng, 200)
    vel = Velocity(v)
    u = primitive_to_conserved(m, vel, spec)
    dv = VelocityDerivatives(rng.normal(size=(200, 3, 3)))
    s, _ = model_sources(u, m, vel, dv, OpacitySpec(), spec)
    gdot = np.einsum("...j,...j->...", u.g, s[..., 1:])
    assert_allclose(gdot, 0.0, atol=1e-12)


def test_eulerian_observables():
    m = PrimitiveMoments(1.0, [0.0, 0.0, 0.0])
    vel = Velocity([0.3, 0.0, 0.0])
    u = primitive_to_conserved(m, vel)
    e, p = eulerian_observables(u, m, vel, 2.0)
    assert_allclose(e, 2.06)
    assert_allclose(p, [2.0 * (0.1 + 0.3), 0.0, 0.0])
    e0, p0 = eulerian_observables(u, m, vel, 0.0)
    assert e0 == 0.0
    assert_allclose(p0, 0.0)
    e_rest, p_rest = eulerian_observables(
        ConservedMoments(1.0, [0.5, 0.0, 0.0]),
        PrimitiveMoments(1.0, [0.5, 0.0, 0.0]),
        Velocity(np.zeros(3)),
        3.0,
    )
    assert_allclose(e_rest, 3.0)
    assert_allclose(p_rest, [1.5, 0.0, 0.0])


def test_opacity_validation():
    with pytest.raises(ValueError):
        OpacitySpec(chi=-1.0)
    assert OpacitySpec(chi=1.0, sigma=2.0).kappa == 3.0
