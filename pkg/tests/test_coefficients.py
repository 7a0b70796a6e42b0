import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose

from bdsdelab.coefficients import (
    BallSampler,
    CoefficientEvaluationError,
    CoefficientSystem,
    ConfigurationError,
    StructuralConstants,
    check_a6,
    check_b2,
    check_coercivity,
    check_growth,
    check_hemicontinuity,
    check_lipschitz,
    check_monotonicity,
    exponential_rescale,
    remark_j_phi_margin,
)
from bdsdelab.lattice import build_lattice
from bdsdelab.models import build_model, cubic_bad, linear
from conftest import level_table


class TestStructuralConstants:
    @pytest.mark.parametrize("kw", [dict(delta=1.0), dict(delta=0.0), dict(alpha=0.0), dict(q=1.0), dict(p=1.5), dict(K=-1.0)])
    def test_rejects(self, kw):
        with pytest.raises(ConfigurationError):
            StructuralConstants(**kw)

    def test_conjugate_exponent(self):
        assert_allclose(StructuralConstants(q=3.0).q_conj, 1.5)

    def test_existence_condition_gaps(self):
        assert StructuralConstants(beta=4.0, p=6.0).existence_condition_gaps() == []
        assert StructuralConstants(beta=4.0, p=4.0).existence_condition_gaps()


class TestSampler:
    def test_prefix_stable(self):
        s = BallSampler(2, radius=1.5)
        a, b = s.draw(50, seed=3), s.draw(200, seed=3)
        for k in a:
            assert_allclose(a[k], b[k][:50])

    def test_inside_ball(self):
        s = BallSampler(3, dW=2, radius=2.0).draw(500, seed=1)
        assert np.all(np.linalg.norm(s["v1"], axis=-1) <= 2.0 + 1e-12)
        assert np.all(np.linalg.norm(s["phi1"].reshape(500, -1), axis=-1) <= 2.0 + 1e-12)
        assert np.all((s["t"] >= 0) & (s["t"] <= 1))

    def test_extremes_included(self):
        s = BallSampler(1, radius=2.0).draw(10, seed=0)
        assert_allclose(s["v1"][:2, 0], [2.0, -2.0])


class TestCheckers:
    def test_linear_dissipative_passes(self):
        sys = linear(a=-1.0).system
        for check in (check_monotonicity, check_coercivity, check_growth, check_lipschitz, check_a6):
            rep = check(sys, trials=2000)
            assert not rep.violated, (rep.assumption, rep.worst_margin)

    def test_violator_flagged_with_witness(self):
        rep = check_monotonicity(cubic_bad().system, trials=2000)
        assert rep.violated and rep.worst_margin >= 1.0
        w = rep.witness
        sys = cubic_bad().system
        dF = sys.drift(w["t"], w["v1"], w["phi1"]) - sys.drift(w["t"], w["v2"], w["phi2"])
        assert 2 * float(dF @ (w["v1"] - w["v2"])) > 0

    def test_report_json_roundtrip(self):
        rep = check_growth(linear(a=-1.0).system, trials=100)
        d = json.loads(rep.to_json())
        assert d["assumption"] == "A4" and d["trials"] == 100

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_raises(self):
        sys = CoefficientSystem(n=1, F=lambda t, u, v: np.log(np.asarray(u) * 0.0))
        with pytest.raises(CoefficientEvaluationError):
            check_monotonicity(sys, trials=20)

    def test_hemicontinuity_flags_jump(self):
        sys = CoefficientSystem(n=1, F=lambda t, u, v: -np.sign(np.asarray(u)) * 10.0)
        assert check_hemicontinuity(sys, trials=50).violated
        assert not check_hemicontinuity(linear(a=-1.0).system, trials=50).violated

    def test_j_phi_margin(self):
        spec = build_model("power_drift", {"n": 2, "delta2": 0.5})
        assert not remark_j_phi_margin(spec.system, trials=500).violated

    @given(st.integers(1, 300), st.integers(0, 300))
    def test_margin_monotone_in_trials(self, k, extra):
        sys = linear(a=-1.0).system
        a = check_coercivity(sys, trials=k, seed=2).worst_margin
        b = check_coercivity(sys, trials=k + extra, seed=2).worst_margin
        assert b >= a

    def test_deterministic_in_seed(self):
        sys = linear(a=-1.0).system
        assert check_coercivity(sys, trials=300, seed=5).to_json() == check_coercivity(sys, trials=300, seed=5).to_json()


class TestB2:
    COEFS = dict(a=lambda t, x: 1.0 + 0 * x, sigma=lambda t, x: 0.1 + 0 * x[:, None])
    PARAMS = dict(rho=4.0, rho_prime=4.0, delta=0.5, lam=1.9, Lam=2.0, kappa=0.0, beta=0.0, alpha=0.0)

    def test_passes(self):
        assert not check_b2(self.COEFS, **self.PARAMS, trials=500).violated

    def test_exponent_identity(self):
        with pytest.raises(ConfigurationError):
            check_b2(self.COEFS, **dict(self.PARAMS, delta=0.4), trials=10)

    def test_gap_must_be_positive(self):
        rep = check_b2(self.COEFS, **dict(self.PARAMS, kappa=2.0), trials=10)
        assert rep.violated


class TestRescale:
    @given(st.floats(0.1, 3.0), st.floats(-2.0, 2.0), st.floats(-2.0, 2.0), st.floats(0.0, 1.0))
    def test_roundtrip(self, K1, u, v, t):
        sys = linear(a=0.7).system
        back = exponential_rescale(exponential_rescale(sys, K1), -K1)
        uu, vv = np.array([u]), np.array([[v]])
        assert_allclose(back.drift(t, uu, vv), sys.drift(t, uu, vv), atol=1e-12)

    def test_roundtrip_terminal_and_diffusion(self):
        lat = build_lattice(1.0, 3)
        sys = build_model("linear_noise").system
        back = exponential_rescale(exponential_rescale(sys, 1.3), -1.3)
        u = np.linspace(-2, 2, 7)[:, None]
        assert_allclose(back.diffusion(0.4, u, np.zeros((7, 1, 1))), sys.diffusion(0.4, u, np.zeros((7, 1, 1))), atol=1e-12)
        assert_allclose(level_table(back.terminal(lat), 3), level_table(sys.terminal(lat), 3), atol=1e-12)

    def test_removes_one_sided_constant(self):
        sys = linear(a=0.5).system
        bar = exponential_rescale(sys)
        assert bar.constants.K1 == 0.0
        # a u - K1/2 u with K1 = 2a leaves zero drift
        assert_allclose(bar.drift(0.3, np.array([1.7]), np.zeros((1, 1))), 0.0, atol=1e-14)

    def test_terminal_scaled(self):
        lat = build_lattice(2.0, 2)
        bar = exponential_rescale(linear(a=0.5).system)
        assert_allclose(level_table(bar.terminal(lat), 2), np.exp(0.5 * 2.0))
