import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from superatom_lab import eitmodel as em

CLOUD = em.CloudGeometry()
CAL = em.EitParams(gamma_gr=2.9, delta_c=-3.74005)


def test_two_level_limit():
    p = em.EitParams(omega_c_eff=0.0, gamma_gr=0.0, delta_p=0.0)
    assert em.eit_susceptibility(p).imag == pytest.approx(1.0)


def test_dark_state_transparency():
    p = em.EitParams(omega_c_eff=5.9, gamma_gr=0.0, delta_c=-3.0, delta_p=3.0)
    assert em.eit_susceptibility(p).imag == pytest.approx(0.0, abs=1e-12)


def test_params_validation():
    with pytest.raises(ValueError):
        em.EitParams(gamma_e=0.0)
    with pytest.raises(ValueError):
        em.EitParams(omega_c_eff=-1.0)
    with pytest.raises(ValueError):
        em.CloudGeometry(a_x=500, x_extent=100)
    with pytest.raises(ValueError):
        em.ImpurityConfig((), r_blockade=0.0)


def test_eit_linewidth_examples():
    assert em.eit_linewidth(6.5, 6.07) == pytest.approx(6.96, abs=0.01)
    assert em.eit_linewidth(3.4, 6.07) == pytest.approx(1.90, abs=0.01)
    assert em.eit_linewidth(0.0, 6.07) == 0.0


def test_blockade_radius_sixth_root_scaling():
    r = em.blockade_radius(-1010, 5.0)
    assert em.blockade_radius(-1010 * 64, 5.0) == pytest.approx(2 * r)
    with pytest.raises(ValueError):
        em.blockade_radius(1.0, 0.0)


@pytest.mark.parametrize("radius,omega_c", [(14.7, 6.5), (14.4, 3.4)])
def test_excitation_blockade_round_trip(radius, omega_c):
    c6 = em.c6_from_blockade_radius(radius, em.eit_linewidth(omega_c, 6.07))
    assert em.excitation_blockade_radius(c6, omega_c, 6.07) == pytest.approx(radius, rel=1e-12)


def test_self_c6_inversion_magnitude():
    c6 = em.c6_from_blockade_radius(14.7, em.eit_linewidth(6.5, 6.07))
    assert c6 == pytest.approx(3.5e4, rel=0.05)


@settings(max_examples=40, deadline=None)
@given(c6=st.floats(1.0, 1e5), g=st.floats(0.1, 20.0), f=st.floats(1.01, 5.0))
def test_blockade_monotone(c6, g, f):
    assert em.blockade_radius(c6 * f, g) > em.blockade_radius(c6, g)
    assert em.blockade_radius(c6, g * f) < em.blockade_radius(c6, g)


def test_atoms_in_sphere_uniform_limit():
    wide = em.CloudGeometry(sigma_r=1e6, n0=0.39)
    assert em.atoms_in_sphere(wide, (0, 0, 0), 5.0) == pytest.approx(0.39 * 4 / 3 * math.pi * 125, rel=1e-3)


def test_atoms_in_sphere_linear_in_density_and_offaxis_consistent():
    a = em.atoms_in_sphere(CLOUD, (0, 0, 0), 6.0)
    b = em.atoms_in_sphere(em.CloudGeometry(n0=0.78), (0, 0, 0), 6.0)
    assert b == pytest.approx(2 * a, rel=1e-12)
    # the off-axis quadrature approaches the on-axis closed form
    near = em.atoms_in_sphere(CLOUD, (0, 1e-6, 0), 6.0)
    assert near == pytest.approx(a, rel=1e-3)
    assert em.atoms_in_sphere(CLOUD, (0, 6, 0), 6.0) < a


@settings(max_examples=25, deadline=None)
@given(r=st.floats(0.5, 15.0), f=st.floats(1.01, 2.0), y=st.floats(0, 10))
def test_atoms_in_sphere_monotone_in_radius(r, f, y):
    assert em.atoms_in_sphere(CLOUD, (0, y, 0), r * f) > em.atoms_in_sphere(CLOUD, (0, y, 0), r)


def test_empty_impurity_set_equals_bare():
    grid = np.linspace(-5, 10, 31)
    bare = em.impurity_spectrum(CLOUD, CAL, None, grid)
    empty = em.impurity_spectrum(CLOUD, CAL, em.ImpurityConfig((), 8.7), grid)
    assert np.array_equal(bare, empty)


def test_single_column_beer_lambert():
    grid = np.array([0.0, 3.65])
    t = em.impurity_spectrum(em.CloudGeometry(a_x=1.0), CAL, None, grid, dx=1.0)
    od = em.SIGMA0_UM2 * CLOUD.column_density(0.0) * em.eit_susceptibility(CAL, grid).imag
    assert np.allclose(t, np.exp(-od))


def test_fully_blocked_column_is_two_level():
    grid = np.array([0.0, 2.0, 3.65])
    imp = em.ImpurityConfig(((0.5, 0.0, 0.0),), r_blockade=200.0)
    t = em.impurity_spectrum(em.CloudGeometry(a_x=1.0), CAL, imp, grid, dx=1.0)
    od = em.SIGMA0_UM2 * CLOUD.column_density(0.0) * em.two_level_susceptibility(CAL, grid).imag
    assert np.allclose(t, np.exp(-od))


@settings(max_examples=20, deadline=None)
@given(xs=st.lists(st.floats(0, 350), min_size=1, max_size=8), r=st.floats(1.0, 12.0),
       extra=st.floats(0, 350))
def test_transmission_bounded_and_monotone_in_impurities(xs, r, extra):
    cloud = em.CloudGeometry(a_x=350.0, x_extent=1000.0)
    peak = [3.65]
    base = em.ImpurityConfig(tuple((x, 0.0, 0.0) for x in xs), r)
    more = em.ImpurityConfig(base.positions + ((extra, 0.0, 0.0),), r)
    t1 = em.impurity_spectrum(cloud, CAL, base, peak, dx=2.0)
    t2 = em.impurity_spectrum(cloud, CAL, more, peak, dx=2.0)
    assert 0.0 <= t2[0] <= t1[0] + 1e-15 <= 1.0 + 1e-15


def test_calibrated_peak_position_and_height():
    cloud = em.CloudGeometry(a_x=350.0, x_extent=1000.0)
    d, t = em.find_eit_peak(cloud, CAL)
    assert d == pytest.approx(3.65, abs=0.1)
    assert t == pytest.approx(0.5, abs=0.1)


def test_calibration_routine_recovers_shipped_knobs():
    cloud = em.CloudGeometry(a_x=350.0, x_extent=1000.0)
    p = em.calibrate_eit(cloud, em.EitParams(), gamma_grid=[2.8, 2.9, 3.0])
    assert p.gamma_gr == pytest.approx(2.9)
    assert p.delta_c == pytest.approx(-3.74005, abs=1e-4)
