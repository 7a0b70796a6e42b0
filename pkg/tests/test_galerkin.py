import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose

from bdsdelab.coefficients import ConfigurationError, check_monotonicity
from bdsdelab.galerkin import (
    GalerkinModel,
    SineBasis,
    assemble_bdspde,
    assemble_p_laplacian,
    assemble_power_drift,
    derive_constants,
    pad,
    project,
    refine_study,
)
from bdsdelab.lattice import build_lattice
from bdsdelab.models import galerkin_model
from bdsdelab.resolvent import fd_jacobian


class TestSineBasis:
    @pytest.mark.parametrize("quadrature", ["trapezoid", "gauss"])
    @pytest.mark.parametrize("n", [1, 4, 8])
    def test_gram_and_stiffness(self, n, quadrature):
        b = SineBasis(n, quadrature=quadrature)
        assert b.gram_error <= 1e-8
        assert_allclose(np.diag(b.stiffness), (np.pi * np.arange(1, n + 1)) ** 2, rtol=1e-8)

    def test_under_resolved_rejected(self):
        with pytest.raises(ConfigurationError):
            SineBasis(8, M=6)

    def test_norm_weights(self):
        norms = SineBasis(2).norms()
        u = np.array([1.0, 1.0])
        assert_allclose(norms.v(u) ** 2, 2 + np.pi**2 + 4 * np.pi**2)
        assert_allclose(norms.dual(u) ** 2, 1 / (1 + np.pi**2) + 1 / (1 + 4 * np.pi**2))


class TestProject:
    def test_first_mode(self):
        c = project(lambda x: np.sin(np.pi * x), SineBasis(3))
        assert_allclose(c, [2**-0.5, 0, 0], atol=1e-12)

    def test_basis_vector(self):
        b = SineBasis(4)
        c = project(lambda x: np.sqrt(2) * np.sin(2 * np.pi * x), b)
        assert_allclose(c, [0, 1, 0, 0], atol=1e-8)

    def test_bump_against_closed_form(self):
        j = np.arange(1, 7)
        exact = np.sqrt(2) * 2 * (1 - (-1.0) ** j) / (j * np.pi) ** 3
        c = project(lambda x: x * (1 - x), SineBasis(6, M=512))
        assert_allclose(c, exact, atol=1e-8)

    def test_pad(self):
        assert_allclose(pad(np.array([[1.0, 2.0]]), 4), [[1, 2, 0, 0]])
        with pytest.raises(ValueError):
            pad(np.ones(3), 2)


class TestBdspde:
    def test_heat_eigenvalues(self):
        m = GalerkinModel(n=5, a=lambda t, x: 0.7 + 0 * x)
        sys = assemble_bdspde(m)
        u = np.eye(5)
        F = sys.drift(0.0, u, np.zeros((5, 5, 1)))
        assert_allclose(F, np.diag(-0.7 * (np.pi * np.arange(1, 6)) ** 2), atol=1e-8 * np.pi**2 * 25)

    def test_sigma_pairing_vanishes_for_one_mode(self):
        m = GalerkinModel(n=1, a=lambda t, x: 1.0 + 0 * x, sigma=lambda t, x: 0.3 + 0 * np.asarray(x)[..., None])
        sys = assemble_bdspde(m)
        F = sys.drift(0.0, np.array([1.0]), np.array([[2.0]]))
        assert_allclose(F, [-np.pi**2], atol=1e-10)

    def test_linear_noise_identity(self):
        m = GalerkinModel(n=3, h=lambda t, x, th, y, z: 0.4 * th, h_uses_z=False)
        sys = assemble_bdspde(m)
        u = np.array([0.5, -1.0, 2.0])
        assert_allclose(sys.diffusion(0.0, u, np.zeros((3, 1)))[:, 0], 0.4 * u, atol=1e-10)

    def test_analytic_jacobian(self, rng):
        sys = assemble_bdspde(galerkin_model(n=3))
        u = rng.standard_normal(3)
        v = rng.standard_normal((3, 1))
        J = sys.F_jac(0.2, u[None], v[None])[0]
        fd = fd_jacobian(lambda y: sys.drift(0.2, y, v), u[None])[0]
        assert_allclose(J, fd, atol=1e-6)

    def test_constants_valid(self):
        consts, varsigma, split = derive_constants(galerkin_model())
        assert 0 < consts.delta < 1
        assert np.all(np.asarray(varsigma(np.linspace(0, 1, 5))) >= 0)


class TestMonotoneDrifts:
    def test_power_r2_is_minus_identity(self, rng):
        sys = assemble_power_drift(2.0, SineBasis(4))
        u = rng.standard_normal((3, 4))
        assert_allclose(sys.drift(0.0, u, np.zeros((3, 4, 1))), -u, atol=1e-10)

    def test_power_r4_one_mode(self):
        sys = assemble_power_drift(4.0, SineBasis(1))
        assert_allclose(sys.drift(0.0, np.array([1.0]), np.zeros((1, 1))), [-1.5], rtol=1e-10)

    def test_p_laplacian_r4_one_mode(self):
        # -int (sqrt2 pi cos)^4 = -4 pi^4 * 3/8
        sys = assemble_p_laplacian(4.0, SineBasis(1))
        assert_allclose(sys.drift(0.0, np.array([1.0]), np.zeros((1, 1))), [-1.5 * np.pi**4], rtol=1e-10)

    @pytest.mark.parametrize("builder", [assemble_power_drift, assemble_p_laplacian])
    def test_monotone(self, builder):
        sys = builder(4.0, SineBasis(3))
        assert not check_monotonicity(sys, trials=2000).violated

    @pytest.mark.parametrize("builder", [assemble_power_drift, assemble_p_laplacian])
    def test_jacobian(self, builder, rng):
        sys = builder(3.0, SineBasis(3))
        u = rng.standard_normal((2, 3))
        fd = fd_jacobian(lambda y: sys.drift(0.0, y, np.zeros((2, 3, 1))), u)
        assert_allclose(sys.F_jac(0.0, u, None), fd, rtol=1e-5, atol=1e-5)

    def test_strong_coupling_rejected(self):
        with pytest.raises(ConfigurationError):
            assemble_power_drift(4.0, SineBasis(2), delta2=1.0)

    @given(st.floats(2.0, 6.0))
    def test_power_norm_positive_homogeneous(self, r):
        sys = assemble_power_drift(r, SineBasis(2))
        u = np.array([0.3, -0.7])
        assert_allclose(sys.norms.v(2.5 * u), 2.5 * sys.norms.v(u), rtol=1e-10)


class TestRefine:
    def test_first_mode_captured_exactly(self):
        m = GalerkinModel(a=lambda t, x: 1.0 + 0 * x, lam=1.96)
        rows = refine_study(m, [1, 2], build_lattice(0.5, 2))
        assert all(r["difference"] <= 1e-20 for r in rows)

    def test_differences_decrease(self):
        m = GalerkinModel(a=lambda t, x: 1.0 + 0 * x, terminal=lambda x: x * (1 - x), lam=1.96)
        rows = refine_study(m, [2, 4, 8], build_lattice(0.1, 2))
        d = [r["difference"] for r in rows]
        assert d[0] > d[1] > d[2]
