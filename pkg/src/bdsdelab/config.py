"""YAML experiment configuration.

Grammar::

    model:
      name: linear            # registry name, see bdsdelab.models.REGISTRY
      params: {a: 1.0, G: "constant:1.0"}
    lattice:
      T: 1.0                  # > 0, required
      N: 64                   # N >= 1, or N_list: [8, 16, 32]
      dW: 1
      dB: 1
    solver:
      picard_tol: 1.0e-10
      picard_max: 200
      resolvent_tol: 1.0e-12
      resolvent_max_iter: 200
      method: newton_with_damping   # or scalar_bracketing
      record_iterates: true
      rescale: auto                 # auto | true | false
    run:
      seed: 0
      out: results
      assumptions: [A2, A3, A4, A5]  # check only; default routes by model
      trials: 10000
      radius: 2.0
      G_prime: "scale:0.5"           # stability only; any terminal spec
      C_fit: 1.18                    # stability only; default: frozen fixture

Every block but ``model`` and ``lattice`` is optional.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import yaml

from .coefficients import ConfigurationError
from .models import REGISTRY
from .solver import SolverConfig

KNOWN_ASSUMPTIONS = ("A1", "A2", "A3", "A4", "A5", "A6", "B2", "remark")
_SOLVER_KEYS = {"picard_tol", "picard_max", "resolvent_tol", "resolvent_max_iter", "method", "record_iterates", "rescale"}
_RUN_KEYS = {"seed", "out", "assumptions", "trials", "radius", "G_prime", "C_fit"}
_LATTICE_KEYS = {"T", "N", "N_list", "dW", "dB"}


@dataclass
class ExperimentConfig:
    model: str
    params: dict
    T: float
    N: int | None
    N_list: list | None
    dW: int = 1
    dB: int = 1
    solver: SolverConfig = field(default_factory=SolverConfig)
    seed: int = 0
    out: str = "results"
    assumptions: list | None = None
    trials: int = 10_000
    radius: float = 2.0
    G_prime: Any = "scale:0.5"
    C_fit: float | None = None

    def resolutions(self) -> list[int]:
        """``N_list`` when given, else ``[N]``."""
        return list(self.N_list) if self.N_list else [self.N]


def _line_index(text: str) -> dict:
    """Map dotted key paths to 1-based source lines."""
    lines = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = f"{path}.{k.value}" if path else str(k.value)
                lines[p] = k.start_mark.line + 1
                walk(v, p)

    if root is not None:
        walk(root, "")
    return lines


class _Reader:
    def __init__(self, lines: dict):
        self.lines = lines

    def fail(self, path: str, msg: str):
        line = self.lines.get(path)
        where = f"{path} (line {line})" if line else path
        raise ConfigurationError(f"{where}: {msg}")

    def block(self, doc: dict, key: str, required: bool) -> dict:
        if key not in doc:
            if required:
                self.fail(key, "required block missing")
            return {}
        val = doc[key]
        if val is None:
            return {}
        if not isinstance(val, dict):
            self.fail(key, "must be a mapping")
        return val

    def unknown(self, blk: dict, path: str, allowed: set):
        extra = sorted(set(blk) - allowed)
        if extra:
            self.fail(f"{path}.{extra[0]}", f"unknown key; allowed: {sorted(allowed)}")

    def number(self, blk, path, key, default=None, *, integer=False, lo=None, lo_open=False, required=False):
        full = f"{path}.{key}"
        if key not in blk or blk[key] is None:
            if required:
                self.fail(full, "required field missing")
            return default
        val = blk[key]
        if isinstance(val, str):
            # YAML 1.1 reads exponents without a decimal point ("1e-10") as strings
            try:
                val = float(val)
            except ValueError:
                pass
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            self.fail(full, f"expected a number, got {val!r}")
        if integer:
            if int(val) != val:
                self.fail(full, f"expected an integer, got {val!r}")
            val = int(val)
        else:
            val = float(val)
        if lo is not None and (val <= lo if lo_open else val < lo):
            self.fail(full, f"must be {'>' if lo_open else '>='} {lo}, got {val!r}")
        return val


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a YAML document; raises :class:`ConfigurationError` with the field path."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark is not None else ""
        raise ConfigurationError(f"YAML syntax error{where}: {getattr(exc, 'problem', exc)}") from exc
    if not isinstance(doc, dict):
        raise ConfigurationError("config must be a mapping with model and lattice blocks")
    r = _Reader(_line_index(text))
    extra = sorted(set(doc) - {"model", "lattice", "solver", "run"})
    if extra:
        r.fail(extra[0], "unknown block; allowed: lattice, model, run, solver")

    model = r.block(doc, "model", True)
    r.unknown(model, "model", {"name", "params"})
    name = model.get("name")
    if not isinstance(name, str):
        r.fail("model.name", "required registry name missing")
    if name not in REGISTRY:
        r.fail("model.name", f"unknown model {name!r}; known: {sorted(REGISTRY)}")
    params = model.get("params") or {}
    if not isinstance(params, dict):
        r.fail("model.params", "must be a mapping")

    lat = r.block(doc, "lattice", True)
    r.unknown(lat, "lattice", _LATTICE_KEYS)
    T = r.number(lat, "lattice", "T", required=True, lo=0.0, lo_open=True)
    N = r.number(lat, "lattice", "N", integer=True, lo=1)
    N_list = lat.get("N_list")
    if N_list is not None:
        if not isinstance(N_list, list) or not N_list:
            r.fail("lattice.N_list", "must be a non-empty list of integers")
        N_list = [r.number({"k": v}, "lattice.N_list", "k", integer=True, lo=1) for v in N_list]
    if N is None and N_list is None:
        r.fail("lattice.N", "one of N or N_list is required")
    dW = r.number(lat, "lattice", "dW", 1, integer=True, lo=1)
    dB = r.number(lat, "lattice", "dB", 1, integer=True, lo=1)

    sv = r.block(doc, "solver", False)
    r.unknown(sv, "solver", _SOLVER_KEYS)
    rescale = sv.get("rescale", "auto")
    if rescale not in ("auto", True, False):
        r.fail("solver.rescale", f"must be auto, true or false, got {rescale!r}")
    method = sv.get("method", "newton_with_damping")
    if method not in ("newton_with_damping", "scalar_bracketing"):
        r.fail("solver.method", f"unknown method {method!r}")
    record = sv.get("record_iterates", True)
    if not isinstance(record, bool):
        r.fail("solver.record_iterates", "must be true or false")
    solver = SolverConfig(
        picard_tol=r.number(sv, "solver", "picard_tol", 1e-10, lo=0.0, lo_open=True),
        picard_max=r.number(sv, "solver", "picard_max", 200, integer=True, lo=1),
        resolvent_tol=r.number(sv, "solver", "resolvent_tol", 1e-12, lo=0.0, lo_open=True),
        resolvent_max_iter=r.number(sv, "solver", "resolvent_max_iter", 200, integer=True, lo=1),
        method=method,
        record_iterates=record,
        rescale=None if rescale == "auto" else rescale,
    )

    run = r.block(doc, "run", False)
    r.unknown(run, "run", _RUN_KEYS)
    assumptions = run.get("assumptions")
    if assumptions is not None:
        if not isinstance(assumptions, list) or any(a not in KNOWN_ASSUMPTIONS for a in assumptions):
            r.fail("run.assumptions", f"must be a list drawn from {list(KNOWN_ASSUMPTIONS)}")
    out = run.get("out", "results")
    if not isinstance(out, str):
        r.fail("run.out", "must be a path string")
    return ExperimentConfig(
        model=name,
        params=dict(params),
        T=T,
        N=N,
        N_list=N_list,
        dW=dW,
        dB=dB,
        solver=solver,
        seed=r.number(run, "run", "seed", 0, integer=True, lo=0),
        out=out,
        assumptions=assumptions,
        trials=r.number(run, "run", "trials", 10_000, integer=True, lo=1),
        radius=r.number(run, "run", "radius", 2.0, lo=0.0, lo_open=True),
        G_prime=run.get("G_prime", "scale:0.5"),
        C_fit=r.number(run, "run", "C_fit", None, lo=0.0),
    )


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path!r}: {exc.strerror}") from exc
    return parse_config(text)
