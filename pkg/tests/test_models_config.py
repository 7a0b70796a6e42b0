import numpy as np
import pytest
from numpy.testing import assert_allclose

from bdsdelab.coefficients import ConfigurationError
from bdsdelab.config import parse_config
from bdsdelab.lattice import build_lattice
from bdsdelab.models import REGISTRY, SHIPPED, build_model, coefficient, nonlinearity, parse_spec, profile, terminal
from conftest import level_table

BASE = """
model:
  name: linear
  params: {a: 1.0}
lattice:
  T: 1.0
  N: 8
"""


class TestGrammar:
    def test_parse_spec(self):
        assert parse_spec("affine:0.5,2") == ("affine", [0.5, 2.0])
        assert parse_spec(3) == ("constant", [3.0])
        with pytest.raises(ConfigurationError):
            parse_spec("affine:a,b")

    def test_coefficient(self):
        x = np.linspace(0, 1, 5)
        assert_allclose(coefficient("affine:1,2")(0.0, x), 1 + 2 * x)
        assert_allclose(coefficient("affine_t:1,2")(0.5, x), 2.0)
        with pytest.raises(ConfigurationError):
            coefficient("quartic:1")

    def test_nonlinearity(self):
        fn, L, uses_z = nonlinearity("linear_z:0.3")
        assert L == 0.3 and uses_z
        assert nonlinearity("zero")[0] is None

    def test_profile(self):
        assert_allclose(profile("bump")(np.array([0.5])), 0.25)

    def test_terminal_fields(self):
        lat = build_lattice(1.0, 3)
        G = terminal("W_partial:2.0,1", 1)(lat)
        assert_allclose(level_table(G, 1), 2 * level_table(lat.W(1), 1))
        with pytest.raises(ConfigurationError):
            terminal("vector:1,2", 3)


class TestRegistry:
    @pytest.mark.parametrize("name", SHIPPED)
    def test_builds(self, name):
        spec = build_model(name)
        assert spec.system.n >= 1

    def test_violator_not_shipped(self):
        assert "cubic_bad" in REGISTRY and "cubic_bad" not in SHIPPED

    def test_bad_params(self):
        with pytest.raises(ConfigurationError):
            build_model("linear", {"nope": 1})
        with pytest.raises(ConfigurationError):
            build_model("power_drift", dW=2)

    def test_heat_oracle_decay(self):
        spec = build_model("heat", {"a0": 0.5, "n": 2})
        assert_allclose(spec.oracle(build_lattice(1.0, 1)), [2**-0.5 * np.exp(-0.5 * np.pi**2), 0.0], atol=1e-12)


class TestConfig:
    def test_defaults(self):
        cfg = parse_config(BASE)
        assert cfg.model == "linear" and cfg.N == 8 and cfg.resolutions() == [8]
        assert cfg.solver.rescale is None and cfg.seed == 0

    def test_exponent_string_accepted(self):
        cfg = parse_config(BASE + "solver:\n  picard_tol: 1e-9\n  rescale: false\n")
        assert cfg.solver.picard_tol == 1e-9 and cfg.solver.rescale is False

    @pytest.mark.parametrize(
        "text, fragment",
        [
            (BASE.replace("  T: 1.0\n", ""), "lattice.T"),
            (BASE.replace("T: 1.0", "T: -1"), "lattice.T (line 6)"),
            (BASE.replace("name: linear", "name: nope"), "model.name"),
            (BASE + "run:\n  assumptions: [A9]\n", "run.assumptions"),
            (BASE + "extra: 1\n", "extra"),
            (BASE + "solver:\n  method: secant\n", "solver.method"),
            ("model: [\n", "YAML syntax error"),
        ],
    )
    def test_errors_name_the_field(self, text, fragment):
        with pytest.raises(ConfigurationError, match=fragment.replace("(", r"\(").replace(")", r"\)")):
            parse_config(text)

    def test_N_list(self):
        cfg = parse_config(BASE.replace("N: 8", "N_list: [4, 8, 16]"))
        assert cfg.resolutions() == [4, 8, 16]
