import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose

from bdsdelab.coefficients import ConfigurationError
from bdsdelab.resolvent import (
    MonotonicityWarning,
    ResolventConfig,
    ResolventError,
    fd_jacobian,
    resolve,
    resolvent_residual,
    verify_yosida_properties,
    yosida_apply,
)


def cube(y):
    return -np.asarray(y) ** 3


class TestResolve:
    def test_linear_closed_form(self):
        assert_allclose(resolve(lambda y: -y, ResolventConfig(0.5), np.array([3.0])), [2.0], rtol=1e-12)

    def test_cubic_unit_root(self):
        assert_allclose(resolve(cube, ResolventConfig(1.0), np.array([2.0])), [1.0], rtol=1e-12)

    def test_cubic_against_polynomial_root(self):
        # y + y^3 = 5
        roots = np.roots([1.0, 0.0, 1.0, -5.0])
        real = roots[np.abs(roots.imag) < 1e-12].real
        assert_allclose(resolve(cube, ResolventConfig(1.0), np.array([5.0])), real, rtol=1e-12)

    def test_bracketing_agrees_with_newton(self, rng):
        x = rng.uniform(-3, 3, (40, 1))
        a = resolve(cube, ResolventConfig(0.3), x)
        b = resolve(cube, ResolventConfig(0.3, method="scalar_bracketing"), x)
        assert_allclose(a, b, atol=1e-10)

    def test_bracketing_needs_scalar(self):
        with pytest.raises(ConfigurationError):
            resolve(cube, ResolventConfig(0.3, method="scalar_bracketing"), np.zeros((2, 2)))

    def test_batched_vector(self, rng):
        A = rng.standard_normal((3, 3))
        M = -(A @ A.T) - np.eye(3)
        x = rng.standard_normal((7, 3))
        y = resolve(lambda y: y @ M.T, ResolventConfig(0.2), x)
        assert_allclose(y, np.linalg.solve(np.eye(3) - 0.2 * M, x.T).T, atol=1e-12)

    def test_analytic_jacobian_used(self):
        calls = []

        def jac(y):
            calls.append(1)
            return -3 * y[..., :, None] ** 2

        resolve(cube, ResolventConfig(1.0), np.array([[5.0]]), jac)
        assert calls

    def test_non_monotone_warns(self):
        with pytest.warns(MonotonicityWarning):
            try:
                resolve(lambda y: y**3, ResolventConfig(1.0), np.array([[0.9]]))
            except ResolventError:
                pass

    def test_failure_reports_witness(self):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", MonotonicityWarning)
            with pytest.raises(ResolventError) as info:
                resolve(lambda y: y**3 + 0 * y[..., ::-1], ResolventConfig(1.0, max_iter=5), np.array([[1.0, 1.0]]))
        assert info.value.witness["x"] == [1.0, 1.0]

    @pytest.mark.parametrize("kw", [dict(eps=0.0), dict(eps=1.0, tol=0.0), dict(eps=1.0, max_iter=0), dict(eps=1.0, method="x")])
    def test_config_validation(self, kw):
        with pytest.raises(ConfigurationError):
            ResolventConfig(**kw)

    @given(st.floats(-50, 50), st.floats(1e-3, 10.0))
    def test_residual_within_tolerance(self, x, eps):
        cfg = ResolventConfig(eps)
        xa = np.array([[x]])
        y = resolve(cube, cfg, xa)
        assert resolvent_residual(cube, cfg, xa, y)[0] <= cfg.tol * max(1.0, abs(x), eps * abs(y[0, 0]) ** 3)

    @given(st.floats(-10, 10), st.floats(-10, 10), st.floats(1e-3, 5.0))
    def test_nonexpansive(self, x1, x2, eps):
        cfg = ResolventConfig(eps)
        y = resolve(cube, cfg, np.array([[x1], [x2]]))
        assert abs(y[0, 0] - y[1, 0]) <= abs(x1 - x2) + 1e-9


class TestJacobian:
    def test_fd_matches_analytic(self, rng):
        y = rng.standard_normal((5, 2))
        J = fd_jacobian(lambda z: np.stack([z[..., 0] * z[..., 1], np.sin(z[..., 0])], axis=-1), y)
        expected = np.zeros((5, 2, 2))
        expected[:, 0, 0], expected[:, 0, 1] = y[:, 1], y[:, 0]
        expected[:, 1, 0] = np.cos(y[:, 0])
        assert_allclose(J, expected, atol=1e-6)


class TestYosida:
    def test_cubic_value(self):
        # H_1(2) = 1, so F_1(2) = (1 - 2) / 1
        assert_allclose(yosida_apply(cube, ResolventConfig(1.0), np.array([2.0])), [-1.0], rtol=1e-12)

    def test_discrepancy_small(self):
        val = yosida_apply(cube, ResolventConfig(0.1), np.linspace(-2, 2, 9)[:, None], return_discrepancy=True)
        assert val.discrepancy < 1e-9

    def test_properties_cubic(self):
        rep = verify_yosida_properties(cube, ResolventConfig(0.1), 1, trials=300)
        assert rep.passed, rep.to_dict()
        assert rep.limit_decreasing

    def test_report_serialises(self):
        rep = verify_yosida_properties(lambda y: -y, ResolventConfig(0.1), 2, trials=50)
        assert rep.to_dict()["passed"] is True
