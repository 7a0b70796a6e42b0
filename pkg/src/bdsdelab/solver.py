"""Backward solver for finite-dimensional BDSDEs on the scenario lattice.

One backward sweep, with the ``v``-argument frozen at ``v_prev``, reads

    X_i = u_{i+1} + J(t_{i+1}, u_{i+1}, v_prev_{i+1}) dB_i
    (m_i, v_i) = martingale split of X_i
    u_i = resolve(F(t_i, ., v_prev_i), eps=dt, x=m_i)

and the outer Picard loop repeats sweeps until the iterates settle.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .coefficients import CoefficientSystem, ConfigurationError, _jsonable, exponential_rescale, rescale_factor
from .lattice import Field, ScenarioLattice, broadcast_pair, condexp, contract, field_csv, martingale_coefficient, table_norm
from .resolvent import ResolventConfig, ResolventError, resolve

INSUFFICIENT_DATA = "insufficient-data"


class SolverError(RuntimeError):
    pass


class PicardNonConvergence(SolverError):
    def __init__(self, message, deltas, solution=None):
        super().__init__(message)
        self.deltas = list(deltas)
        self.solution = solution


class StepSizeError(SolverError):
    pass


@dataclass(frozen=True)
class SolverConfig:
    """Outer and inner tolerances.

    ``rescale=None`` removes a positive ``K1`` by exponential rescaling and
    maps the result back; ``False`` solves the system as given.
    """

    picard_tol: float = 1e-10
    picard_max: int = 200
    resolvent_tol: float = 1e-12
    resolvent_max_iter: int = 200
    method: str = "newton_with_damping"
    record_iterates: bool = True
    rescale: bool | None = None

    def __post_init__(self):
        if not self.picard_tol > 0:
            raise ConfigurationError("picard_tol must be positive")
        if self.picard_max < 1:
            raise ConfigurationError("picard_max must be at least 1")

    def resolvent(self, eps: float, lipschitz=None) -> ResolventConfig:
        return ResolventConfig(eps, self.resolvent_tol, self.resolvent_max_iter, self.method, lipschitz)


@dataclass
class DiscreteSolution:
    """Solution tables ``u[0..N]`` and ``v[0..N-1]``.

    ``f[i]`` and ``h[i]`` are the drift at level ``i`` and the backward
    integrand of step ``i`` used in the final sweep.  When the system was
    rescaled, ``scheme`` holds the solution that was actually marched and
    ``u``, ``v`` are mapped back to the original variables.
    """

    lattice: ScenarioLattice
    system: CoefficientSystem
    u: list
    v: list
    f: list = field(default_factory=list)
    h: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    iterates: list = field(default_factory=list)
    scheme: "DiscreteSolution | None" = None

    @property
    def marched(self) -> "DiscreteSolution":
        return self if self.scheme is None else self.scheme

    def diagnostics_json(self) -> str:
        d = dict(self.diagnostics)
        d.setdefault("fitted_ratio", None)
        return json.dumps(_jsonable(d), sort_keys=True)

    def u_csv(self) -> str:
        return field_csv(self.u, list(range(len(self.u))))

    def v_csv(self) -> str:
        return field_csv(self.v, list(range(len(self.v))))


# ---------------------------------------------------------------------------
# helpers


def _apply(fn, t: float, u: Field, v: Field, out_tail: tuple) -> Field:
    """Evaluate a coefficient on the common window of ``u`` and ``v``."""
    uv, vv, w, b = broadcast_pair(u, v)
    vals = np.asarray(fn(t, uv, vv), dtype=float)
    vals = np.broadcast_to(vals, uv.shape[:2] + out_tail)
    if vals.shape[0] > 1 and np.all(vals == vals[:1]):
        vals = vals[:1]
    if vals.shape[1] > 1 and np.all(vals == vals[:, :1]):
        vals = vals[:, :1]
    return Field(u.lattice, w, b, np.array(vals))


def _is_zero(f: Field) -> bool:
    return not np.any(f.values)


def _zero_v(lat: ScenarioLattice, n: int, level: int) -> Field:
    return Field(lat, level, level, np.zeros((1, 1, n, lat.dW)))


def _v_at(v: Sequence[Field], j: int) -> Field:
    """``v_j``, extended at ``j = N`` by ``E[v_{N-1} | F_T]`` (averaging the last B step)."""
    N = len(v)
    return v[j] if j < N else condexp(v[N - 1], N)


def _drift_field(sys, lat, i, u, v) -> Field:
    return _apply(sys.drift, lat.grid.t(i), u, v, (sys.n,))


def _diffusion_field(sys, lat, i, u, v) -> Field:
    return _apply(sys.diffusion, lat.grid.t(i), u, v, (sys.n, lat.dB))


def _resolve_level(sys, lat, cfg, i, m: Field, vp: Field) -> tuple[Field, float]:
    mv, vv, w, b = broadcast_pair(m, vp)
    shape = mv.shape
    x = mv.reshape((-1, sys.n))
    vflat = vv.reshape((-1,) + vv.shape[2:])
    t = lat.grid.t(i)
    jac = None
    if sys.F_jac is not None:

        def jac(y):
            return sys.F_jac(t, y, vflat)

    rcfg = cfg.resolvent(lat.dt, sys.lipschitz)
    try:
        y = resolve(lambda y: sys.drift(t, y, vflat), rcfg, x, jac)
    except ResolventError as exc:
        wit = dict(exc.witness or {})
        wit["level"] = i
        raise ResolventError(f"level {i}: {exc}", exc.residual, wit) from exc
    res = np.sqrt(np.sum((y - lat.dt * sys.drift(t, y, vflat) - x) ** 2, axis=-1))
    return Field(lat, w, b, y.reshape(shape)), float(res.max()) if res.size else 0.0


# ---------------------------------------------------------------------------
# sweeps


def picard_step(sys: CoefficientSystem, lattice: ScenarioLattice, cfg: SolverConfig, v_prev: Sequence | None = None):
    """One backward sweep with the drift's and diffusion's ``v``-argument frozen at ``v_prev``.

    Returns ``(u, v, f, h, stats)``; ``v_prev=None`` means the zero process.
    """
    lat = lattice
    N = lat.N
    if v_prev is None:
        v_prev = [_zero_v(lat, sys.n, i) for i in range(N)]
    if len(v_prev) != N:
        raise ValueError(f"v_prev needs {N} levels, got {len(v_prev)}")
    u = [None] * (N + 1)
    v = [None] * N
    f = [None] * N
    h = [None] * N
    u[N] = sys.terminal(lat)
    res_max, rep_max = 0.0, 0.0
    for i in range(N - 1, -1, -1):
        X = u[i + 1]
        if sys.has_diffusion:
            hi = _diffusion_field(sys, lat, i + 1, u[i + 1], _v_at(v_prev, i + 1))
            h[i] = hi
            if not _is_zero(hi):
                X = X + contract(hi, lat.dB_field(i))
        else:
            h[i] = lat.constant(np.zeros((sys.n, lat.dB)))
        rep = martingale_coefficient(X, i)
        rep_max = max(rep_max, rep.residual_norm)
        v[i] = rep.integrand
        u[i], r = _resolve_level(sys, lat, cfg, i, rep.mean, v_prev[i])
        res_max = max(res_max, r)
        f[i] = _drift_field(sys, lat, i, u[i], v_prev[i])
    stats = {"resolvent_residual": res_max, "representation_residual": rep_max}
    return u, v, f, h, stats


def _level_change(a: Sequence[Field], b: Sequence[Field] | None) -> float:
    if b is None:
        return max(table_norm(x) for x in a)
    return max(table_norm(x - y) for x, y in zip(a, b))


def _solve_unscaled(sys, lattice, cfg, v_init=None) -> DiscreteSolution:
    lat = lattice
    v_prev = list(v_init) if v_init is not None else None
    u_prev = None
    deltas, du_hist, dv_hist, iterates = [], [], [], []
    stats = {}
    for k in range(1, cfg.picard_max + 1):
        u, v, f, h, stats = picard_step(sys, lat, cfg, v_prev)
        v_ref = v_prev if v_prev is not None else [_zero_v(lat, sys.n, i) for i in range(lat.N)]
        du = _level_change(u[:-1], u_prev)
        dv = _level_change(v, v_ref)
        du_hist.append(du)
        dv_hist.append(dv)
        deltas.append(max(du, dv))
        if cfg.record_iterates:
            iterates.append((u, v))
        u_prev, v_prev = u[:-1], v
        if k > 1 and deltas[-1] < cfg.picard_tol:
            break
    else:
        sol = DiscreteSolution(lat, sys, u, v, f, h, iterates=iterates)
        sol.diagnostics = _diagnostics(deltas, du_hist, dv_hist, stats)
        raise PicardNonConvergence(
            f"Picard loop did not settle within {cfg.picard_max} iterations; last change {deltas[-1]:.3e}",
            deltas,
            sol,
        )
    sol = DiscreteSolution(lat, sys, u, v, f, h, iterates=iterates)
    sol.diagnostics = _diagnostics(deltas, du_hist, dv_hist, stats)
    sol.diagnostics["max_residual"] = max_discrete_residual(sol)
    return sol


def _diagnostics(deltas, du, dv, stats) -> dict:
    d = {
        "picard_iterations": len(deltas),
        "deltas": list(deltas),
        "deltas_u": list(du),
        "deltas_v": list(dv),
    }
    d.update(stats)
    cd = contraction_diagnostics(deltas)
    d["fitted_ratio"] = cd["fitted_ratio"]
    return d


def solve(
    sys: CoefficientSystem,
    lattice: ScenarioLattice,
    cfg: SolverConfig | None = None,
    v_init: Sequence | None = None,
) -> DiscreteSolution:
    """Solve ``-du = F dt + J dB(backward) - v dW``, ``u_N = G`` on the lattice.

    Raises :class:`PicardNonConvergence` when the outer loop does not settle
    and :class:`ResolventError` (with the offending level) when an implicit
    step cannot be solved.
    """
    cfg = cfg or SolverConfig()
    if sys.dW != lattice.dW or sys.dB != lattice.dB:
        raise ConfigurationError(
            f"system drivers (dW={sys.dW}, dB={sys.dB}) differ from lattice (dW={lattice.dW}, dB={lattice.dB})"
        )
    K1 = sys.constants.K1
    if K1 > 0 and cfg.rescale is not False:
        bar = exponential_rescale(sys)
        v0 = None
        if v_init is not None:
            v0 = [v_init[i] * float(rescale_factor(K1, lattice.grid.t(i))) for i in range(lattice.N)]
        inner = _solve_unscaled(bar, lattice, cfg, v0)
        theta = [float(rescale_factor(K1, t)) for t in lattice.grid.times]
        u = [inner.u[i] / theta[i] for i in range(lattice.N + 1)]
        v = [inner.v[i] / theta[i] for i in range(lattice.N)]
        f = [_drift_field(sys, lattice, i, u[i], v[i]) for i in range(lattice.N)]
        h = [
            _diffusion_field(sys, lattice, i + 1, u[i + 1], _v_at(v, i + 1))
            for i in range(lattice.N)
        ]
        diag = dict(inner.diagnostics)
        diag["rescaled_K1"] = K1
        return DiscreteSolution(lattice, sys, u, v, f, h, diag, inner.iterates, scheme=inner)
    return _solve_unscaled(sys, lattice, cfg, v_init)


# ---------------------------------------------------------------------------
# diagnostics


def discrete_residuals(sol: DiscreteSolution) -> list[Field]:
    """``u_i - u_{i+1} - F(t_i,u_i,v_i) dt - J(t_{i+1},u_{i+1},v_{i+1}) dB_i + v_i dW_i`` per step.

    Evaluated on the marched solution with the final ``v`` (``v_N`` as in the sweep).
    Terms whose coefficient vanishes identically are skipped so that no
    increment table is built needlessly.
    """
    s = sol.marched
    sys, lat, N = s.system, s.lattice, s.lattice.N
    out = []
    for i in range(N):
        r = s.u[i] - s.u[i + 1]
        fi = _drift_field(sys, lat, i, s.u[i], s.v[i])
        r = r - fi * lat.dt
        if sys.has_diffusion:
            hi = _diffusion_field(sys, lat, i + 1, s.u[i + 1], _v_at(s.v, i + 1))
            if not _is_zero(hi):
                r = r - contract(hi, lat.dB_field(i))
        if not _is_zero(s.v[i]):
            r = r + contract(s.v[i], lat.dW_field(i))
        out.append(r)
    return out


def max_discrete_residual(sol: DiscreteSolution) -> float:
    """Largest Euclidean entry of :func:`discrete_residuals` over all steps."""
    worst = 0.0
    for r in discrete_residuals(sol):
        vals = r.values
        worst = max(worst, float(np.sqrt((vals**2).sum(axis=-1)).max()))
    return worst


def contraction_diagnostics(source) -> dict:
    """Ratios of successive Picard changes and their fitted geometric rate.

    ``source`` is a :class:`DiscreteSolution` or a sequence of changes.  The
    fitted ratio is ``exp`` of the least-squares slope of ``log delta_k``;
    it is 0 once a change vanishes exactly, and the insufficient-data
    marker when fewer than three changes exist.
    """
    deltas = source.diagnostics["deltas"] if isinstance(source, DiscreteSolution) else list(source)
    ratios = [deltas[k + 1] / deltas[k] if deltas[k] > 0 else 0.0 for k in range(len(deltas) - 1)]
    if any(d == 0 for d in deltas):
        fitted = 0.0
    elif len(deltas) < 3:
        fitted = INSUFFICIENT_DATA
    else:
        k = np.arange(len(deltas), dtype=float)
        slope = np.polyfit(k, np.log(deltas), 1)[0]
        fitted = float(np.exp(slope))
    contracting = None if fitted == INSUFFICIENT_DATA else bool(fitted < 1)
    return {"ratios": ratios, "fitted_ratio": fitted, "contracting": contracting}


# ---------------------------------------------------------------------------
# independent linear oracle


def solve_linear_oracle(a, J0, G, lattice: ScenarioLattice, L=None) -> DiscreteSolution:
    """Backward conditional expectations for ``F(u) = a u`` and ``J(u) = J0 + L u``.

    ``u_i = (I - a dt)^{-1} (E[u_{i+1} | F_i] + (J0 + L E[u_{i+1} | F_i]) dB_i)``;
    no Picard loop and no root solve.  ``L`` has shape ``(n, n, dB)`` (a scalar
    multiplies the identity in every B component).
    """
    lat = lattice
    a = np.atleast_2d(np.asarray(a, dtype=float))
    n = a.shape[0]
    J0 = np.broadcast_to(np.asarray(J0, dtype=float), (n, lat.dB)) if np.ndim(J0) < 2 else np.asarray(J0, dtype=float)
    J0 = J0.reshape(n, lat.dB)
    if L is None:
        L = np.zeros((n, n, lat.dB))
    elif np.ndim(L) == 0:
        L = float(L) * np.repeat(np.eye(n)[:, :, None], lat.dB, axis=2)
    L = np.asarray(L, dtype=float).reshape(n, n, lat.dB)
    A = np.eye(n) - a * lat.dt
    if abs(np.linalg.det(A)) < 1e-14:
        raise StepSizeError(f"I - a dt is singular for dt={lat.dt}")
    Ainv = np.linalg.inv(A)
    G = G if isinstance(G, Field) else lat.constant(np.broadcast_to(np.asarray(G, dtype=float), (n,)))
    u = [None] * (lat.N + 1)
    v = [None] * lat.N
    u[lat.N] = G
    noisy = bool(np.any(J0)) or bool(np.any(L))

    def J_of(x):
        return J0 + np.einsum("jkr,...k->...jr", L, x)

    for i in range(lat.N - 1, -1, -1):
        nxt = u[i + 1]
        cond = condexp(nxt, i)
        rhs = cond + contract(cond.map(J_of), lat.dB_field(i)) if noisy else cond
        u[i] = rhs.map(lambda x: x @ Ainv.T)
        v[i] = martingale_coefficient(nxt, i).integrand
    J = (lambda t, x, z: J_of(np.asarray(x, dtype=float))) if noisy else None
    sys = CoefficientSystem(n=n, F=lambda t, x, z: x @ a.T, J=J, G=G, dW=lat.dW, dB=lat.dB, name="linear-oracle")
    return DiscreteSolution(lat, sys, u, v, diagnostics={"picard_iterations": 0, "oracle": True})


def solution_fingerprint(sol: DiscreteSolution) -> dict:
    """Small summary used by reports: root value and table sizes."""
    return {
        "u0": sol.u[0].values.reshape(-1, sol.system.n).tolist(),
        "levels": sol.lattice.N,
        "stored_entries": [int(np.prod(x.values.shape[:2])) for x in sol.u],
    }


def with_config(cfg: SolverConfig, **changes) -> SolverConfig:
    return dataclasses.replace(cfg, **changes)
