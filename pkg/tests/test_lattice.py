import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose

from bdsdelab.lattice import (
    Field,
    LatticeSizeError,
    MissingIntegrandError,
    backward_ito_integral,
    build_lattice,
    condexp,
    contract,
    expectation,
    field_csv,
    forward_ito_integral,
    martingale_coefficient,
    representation_residual,
    table_norm,
)
from conftest import level_table


class TestConstruction:
    def test_time_grid(self):
        lat = build_lattice(2.0, 8)
        assert lat.dt == 0.25
        assert_allclose(lat.grid.times, np.linspace(0, 2, 9))

    @pytest.mark.parametrize("N, dW, dB", [(0, 1, 1), (4, 0, 1), (4, 1, 0)])
    def test_rejects_degenerate(self, N, dW, dB):
        with pytest.raises(ValueError):
            build_lattice(1.0, N, dW, dB)

    def test_cap_is_lazy(self):
        lat = build_lattice(1.0, 64)
        assert lat.constant([1.0]).values.shape == (1, 1, 1)
        with pytest.raises(LatticeSizeError):
            lat.dB_field(0)

    def test_field_shape_checked(self):
        lat = build_lattice(1.0, 3)
        with pytest.raises(ValueError):
            Field(lat, 2, 2, np.zeros((3, 2, 1)))


class TestIncrements:
    def test_increment_moments(self):
        lat = build_lattice(1.0, 4, dW=2, dB=2)
        for step in range(4):
            dw = lat.dW_field(step).values[:, 0]
            assert_allclose(dw.mean(axis=0), 0.0, atol=1e-15)
            assert_allclose(dw.T @ dw / len(dw), lat.dt * np.eye(2), atol=1e-15)
            db = lat.dB_field(step).values[0]
            assert_allclose(db.T @ db / len(db), lat.dt * np.eye(2), atol=1e-15)

    def test_W_is_partial_sum(self):
        lat = build_lattice(1.0, 5)
        W3 = lat.W(3)
        manual = lat.dW_field(0) + lat.dW_field(1) + lat.dW_field(2)
        assert_allclose(level_table(W3, 3), level_table(manual, 3))

    def test_B_increment_window(self):
        lat = build_lattice(1.0, 5)
        X = lat.B_increment(2)
        assert X.is_adapted_to(2)
        assert_allclose(expectation(X**2), 3 * lat.dt)


class TestConditioning:
    def test_tower_property_for_forward_fields(self, rng):
        lat = build_lattice(1.0, 4)
        X = Field(lat, 4, 4, rng.standard_normal((16, 1, 2)))
        a = condexp(condexp(X, 3), 1)
        b = condexp(X, 1)
        assert_allclose(level_table(a, 1), level_table(b, 1), atol=1e-14)

    def test_idempotent(self, rng):
        lat = build_lattice(1.0, 4)
        X = Field(lat, 4, 0, rng.standard_normal((16, 16, 2)))
        once = condexp(X, 2)
        assert_allclose(level_table(condexp(once, 2), 2), level_table(once, 2))

    def test_condexp_preserves_mean(self, rng):
        lat = build_lattice(1.0, 3, dW=2)
        X = Field(lat, 3, 0, rng.standard_normal((64, 8)))
        assert_allclose(expectation(condexp(X, 0)), expectation(X), atol=1e-14)

    def test_measurable_field_untouched(self, rng):
        lat = build_lattice(1.0, 4)
        X = Field(lat, 2, 2, rng.standard_normal((4, 4, 1)))
        assert condexp(X, 2) is not None
        assert_allclose(level_table(condexp(X, 2), 2), level_table(X, 2))


class TestRepresentation:
    @given(st.integers(0, 2**31 - 1), st.integers(1, 3))
    def test_single_driver_exact(self, seed, level):
        lat = build_lattice(1.0, 4)
        rng = np.random.default_rng(seed)
        X = lat.transition(level, rng.standard_normal((2 ** (level + 1), 2 ** (4 - level), 2)))
        rep = martingale_coefficient(X, level)
        assert rep.residual_norm < 1e-12
        R = representation_residual(X, rep, level)
        assert table_norm(R) < 1e-12

    def test_two_drivers_leave_orthogonal_remainder(self, rng):
        lat = build_lattice(1.0, 2, dW=2)
        X = lat.transition(0, rng.standard_normal((4, 4, 1)))
        rep = martingale_coefficient(X, 0)
        R = representation_residual(X, rep, 0)
        # remainder is orthogonal to constants and to both increments
        dw = lat.dW_field(0)
        assert abs(expectation(condexp(R, 0)).item()) < 1e-14
        assert_allclose(expectation(R * dw), 0.0, atol=1e-14)

    def test_W_squared(self):
        lat = build_lattice(1.0, 2)
        X = lat.W(1) ** 2
        rep = martingale_coefficient(X, 0)
        assert_allclose(rep.mean.values.ravel(), lat.dt)
        assert_allclose(rep.integrand.values.ravel(), 0.0, atol=1e-15)


class TestIntegrals:
    def test_backward_integral_of_constant(self):
        lat = build_lattice(1.0, 5)
        I = backward_ito_integral([lat.constant([2.0])] + [2.0] * 4)
        assert_allclose(level_table(I, 0), 2.0 * level_table(lat.B_increment(0), 0)[..., 0])

    def test_backward_integral_missing_step(self):
        lat = build_lattice(1.0, 3)
        with pytest.raises(MissingIntegrandError):
            backward_ito_integral([lat.constant([1.0]), None, 1.0])

    def test_forward_integral_isometry(self):
        lat = build_lattice(1.0, 6)
        I = forward_ito_integral([lat.W(j) for j in range(6)])
        expected = sum(j * lat.dt * lat.dt for j in range(6))
        assert_allclose(expectation(I**2), expected, rtol=1e-12)

    def test_forward_integral_rejects_anticipating(self):
        lat = build_lattice(1.0, 3)
        with pytest.raises(ValueError):
            forward_ito_integral([lat.W(1), lat.W(1), lat.W(2)])

    def test_contract_shapes(self):
        lat = build_lattice(1.0, 3, dB=2)
        h = lat.constant(np.ones((3, 2)))
        out = contract(h, lat.dB_field(1))
        assert out.value_shape == (3,)


class TestCompression:
    def test_squeeze_keeps_prefix_tables_small(self):
        lat = build_lattice(1.0, 40)
        X = lat.W(3)
        Z = Field(lat, 30, 30, np.zeros((1, 1, 1)))
        Y = X + Z
        assert Y.values.shape[:2] == (8, 1)


class TestCsv:
    def test_rows_and_order(self):
        lat = build_lattice(1.0, 2)
        text = field_csv([lat.W(1)], [1])
        rows = text.strip().split("\n")
        assert rows[0] == "level,w_index,b_index,component,value"
        assert len(rows) == 1 + 2 * 2
        assert rows[1].startswith("1,0,0,0,")

    def test_oversized_table_written_compressed(self):
        lat = build_lattice(1.0, 64)
        text = field_csv([lat.constant([1.5])], [10])
        assert text.strip().split("\n")[1] == "10,*,*,0,1.5"
