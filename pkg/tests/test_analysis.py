import csv
import io

import numpy as np
import pytest
from numpy.testing import assert_allclose

from bdsdelab.analysis import (
    REPRESENTATION_MODE,
    SATURATED,
    ZERO_OVER_ZERO,
    InsufficientDataError,
    apriori_monitor,
    calibrate_stability_tolerance,
    convergence_csv,
    convergence_study,
    energy_decay_study,
    energy_identity_residual,
    load_stability_fixture,
    stability_gap,
    stability_tolerance,
)
from bdsdelab.coefficients import ConfigurationError
from bdsdelab.lattice import build_lattice
from bdsdelab.models import build_model, linear, martingale, zero
from bdsdelab.solver import SolverConfig, solve


class TestEnergy:
    @pytest.mark.parametrize("name", ["linear", "martingale", "backward_noise", "linear_noise", "cubic", "vcoupled"])
    def test_exact_balance(self, name):
        sol = solve(build_model(name).system, build_lattice(1.0, 6))
        rep = energy_identity_residual(sol)
        assert rep.exact_balance_max <= 1e-9
        assert rep.pathwise_exact <= 1e-9
        assert rep.passed

    def test_zero_system_has_zero_residuals(self):
        rep = energy_identity_residual(solve(zero().system, build_lattice(1.0, 4)))
        assert rep.max_residual == 0.0

    def test_martingale_expectation_form_exact(self):
        # |W_t|^2 balance: E W_i^2 = E W_{i+1}^2 - dt
        rep = energy_identity_residual(solve(martingale().system, build_lattice(1.0, 5)))
        assert rep.max_residual < 1e-14

    def test_representation_mode(self):
        sol = solve(build_model("cubic", dW=2).system, build_lattice(1.0, 3, dW=2))
        rep = energy_identity_residual(sol)
        assert rep.mode == REPRESENTATION_MODE and rep.notice

    def test_mismatch(self):
        sol = solve(zero().system, build_lattice(1.0, 2))
        with pytest.raises(ConfigurationError):
            energy_identity_residual(sol, sys=linear().system)

    def test_decay_on_linear_family(self):
        cfg = SolverConfig(rescale=False)
        study = energy_decay_study(lambda N: (linear(a=1.0, G="W_partial:1.0,4").system, build_lattice(1.0, N)), [8, 16, 32, 64], cfg)
        assert study["fitted_order"] >= 0.8


class TestApriori:
    def test_deterministic_linear(self):
        sol = solve(linear(a=-1.0).system, build_lattice(1.0, 4))
        m = apriori_monitor(sol)
        assert_allclose(m["S_p"], 1.0)
        assert m["M_p2"] == 0.0 and m["ratio"] > 0

    def test_zero_over_zero(self):
        sol = solve(zero(G="constant:0.0").system, build_lattice(1.0, 2))
        assert apriori_monitor(sol)["ratio"] == ZERO_OVER_ZERO


class TestStability:
    def test_tolerance_formula(self):
        assert_allclose(stability_tolerance(build_lattice(1.0, 8), 2.0, 1.18), 1.18 * 0.125 * 2.0)

    def test_cubic_margin(self):
        spec = build_model("cubic")
        G = spec.system.G
        r = stability_gap(spec.system, build_lattice(1.0, 8), None, G, lambda lat: G(lat) * 0.5, C_fit=1.18)
        assert r["margin"] <= 0.0

    def test_fixture_reproduced(self):
        fresh = calibrate_stability_tolerance()
        frozen = load_stability_fixture()
        assert fresh["C_fit"] == frozen["C_fit"] == 1.18
        for N, ratio in fresh["ratios"].items():
            assert_allclose(ratio, frozen["ratios"][str(N)], rtol=1e-10)


class TestConvergence:
    def test_linear_order_one(self):
        cfg = SolverConfig(rescale=False)
        study = convergence_study(lambda N: (linear(a=1.0).system, build_lattice(1.0, N), np.array([np.e])), [8, 16, 32, 64], cfg)
        assert 0.9 <= study["fitted_order"] <= 1.1
        rows = list(csv.reader(io.StringIO(convergence_csv(study))))
        assert rows[0] == ["N", "dt", "error", "order_increment"] and rows[1][3] == ""

    def test_saturated(self):
        study = convergence_study(lambda N: (martingale().system, build_lattice(1.0, N), np.zeros(1)), [2, 4, 8])
        assert study["fitted_order"] == SATURATED

    def test_insufficient(self):
        with pytest.raises(InsufficientDataError):
            convergence_study(lambda N: None, [8, 16])
