"""Coefficient systems ``(F, J, G, varsigma)`` and sampling-based assumption checks.

The checkers never prove an assumption.  They evaluate the assumption's
left-minus-right expression on sampled arguments and report the worst value
together with the argument that produced it.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import ndtr

from .lattice import Field, ScenarioLattice

VIOLATION_THRESHOLD = 1e-9


class CoefficientEvaluationError(ArithmeticError):
    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class ConfigurationError(ValueError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; one seed fixes every draw."""
    return np.random.Generator(np.random.Philox(int(seed)))


# ---------------------------------------------------------------------------
# constants and norms


@dataclass(frozen=True)
class StructuralConstants:
    K: float = 0.0
    K1: float = 0.0
    delta: float = 0.5
    alpha: float = 1.0
    alpha1: float = 0.0
    beta: float = 0.0
    q: float = 2.0
    p: float = 2.0

    def __post_init__(self):
        if not 0 < self.delta < 1:
            raise ConfigurationError(f"delta must lie in (0, 1), got {self.delta}")
        if not self.alpha > 0:
            raise ConfigurationError(f"alpha must be positive, got {self.alpha}")
        if not self.q > 1:
            raise ConfigurationError(f"q must exceed 1, got {self.q}")
        if self.p < 2:
            raise ConfigurationError(f"p must be at least 2, got {self.p}")
        for name in ("K", "K1", "alpha1", "beta"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")

    @property
    def q_conj(self) -> float:
        return self.q / (self.q - 1.0)

    def existence_condition_gaps(self) -> list[str]:
        """Existence conditions (p >= beta + 2, alpha1 (p - 2) < alpha) that these constants fail."""
        gaps = []
        if self.p < self.beta + 2:
            gaps.append(f"p={self.p} < beta+2={self.beta + 2}")
        if self.p > 2 and not self.alpha1 * (self.p - 2) < self.alpha:
            gaps.append(f"alpha1*(p-2)={self.alpha1 * (self.p - 2)} >= alpha={self.alpha}")
        return gaps


def euclidean(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.asarray(x) ** 2, axis=-1))


def hilbert_schmidt(m: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.asarray(m) ** 2, axis=(-2, -1)))


@dataclass(frozen=True)
class NormProvider:
    """The V, H and V' norms on coordinate vectors, plus embedding constants.

    ``embed`` bounds ``|x|_H <= embed * |x|_V`` and ``embed_dual`` bounds
    ``|x|_* <= embed_dual * |x|_H``.
    """

    h: Callable[[np.ndarray], np.ndarray] = euclidean
    v: Callable[[np.ndarray], np.ndarray] = euclidean
    dual: Callable[[np.ndarray], np.ndarray] = euclidean
    embed: float = 1.0
    embed_dual: float = 1.0


# ---------------------------------------------------------------------------
# systems


def _zero_varsigma(t):
    return np.zeros_like(np.asarray(t, dtype=float))


@dataclass(frozen=True)
class CoefficientSystem:
    """Data of ``-du = F dt + J dB(backward) - v dW``, ``u(T) = G``.

    ``F(t, u, v)`` maps ``u`` of shape ``(..., n)`` and ``v`` of shape
    ``(..., n, dW)`` to ``(..., n)``; ``J`` maps to ``(..., n, dB)`` and may be
    ``None`` for a zero diffusion.  Both must broadcast over leading axes.
    ``G`` is a :class:`Field`, a constant array, or a callable building the
    terminal field on a given lattice.
    """

    n: int
    F: Callable
    J: Callable | None = None
    G: object = 0.0
    dW: int = 1
    dB: int = 1
    varsigma: Callable = _zero_varsigma
    constants: StructuralConstants = field(default_factory=StructuralConstants)
    norms: NormProvider = field(default_factory=NormProvider)
    F_jac: Callable | None = None
    lipschitz: float | None = None
    name: str = "system"

    def drift(self, t, u, v):
        return np.asarray(self.F(t, u, v), dtype=float)

    def diffusion(self, t, u, v):
        if self.J is None:
            shape = np.broadcast_shapes(np.shape(u), np.shape(v)[:-1])
            return np.zeros(shape + (self.dB,))
        return np.asarray(self.J(t, u, v), dtype=float)

    @property
    def has_diffusion(self) -> bool:
        return self.J is not None

    def terminal(self, lattice: ScenarioLattice) -> Field:
        G = self.G
        if callable(G) and not isinstance(G, Field):
            G = G(lattice)
        if isinstance(G, Field):
            if G.lattice is not lattice:
                raise ValueError("terminal field belongs to a different lattice")
            if G.w_steps > lattice.N:
                raise ValueError("terminal field is not F_T-measurable")
            out = G
        else:
            out = lattice.constant(np.broadcast_to(np.asarray(G, dtype=float), (self.n,)))
        if out.value_shape != (self.n,):
            raise ValueError(f"terminal value shape {out.value_shape} != ({self.n},)")
        return out

    def replace(self, **changes) -> "CoefficientSystem":
        return dataclasses.replace(self, **changes)


def exponential_rescale(sys: CoefficientSystem, K1: float | None = None) -> CoefficientSystem:
    """Remove the one-sided Lipschitz constant ``K1`` by the weight ``theta = exp(t K1 / 2)``.

    Returns the system for ``ubar = theta u``, ``vbar = theta v`` with
    ``Fbar = theta F(t, ubar/theta, vbar/theta) - K1/2 ubar`` and
    ``Jbar = theta J(t, ubar/theta, vbar/theta)``.  Calling it again with
    ``-K1`` recovers the original coefficients.
    """
    c = sys.constants
    K1 = c.K1 if K1 is None else float(K1)
    if K1 == 0:
        return sys
    rate = 0.5 * K1

    def theta(t):
        return np.exp(rate * np.asarray(t, dtype=float))

    F, J, G, vs, jac = sys.F, sys.J, sys.G, sys.varsigma, sys.F_jac

    def Fbar(t, u, v):
        th = theta(t)
        return th * np.asarray(F(t, u / th, v / th)) - rate * np.asarray(u)

    Jbar = None
    if J is not None:

        def Jbar(t, u, v):
            th = theta(t)
            return th * np.asarray(J(t, u / th, v / th))

    jbar = None
    if jac is not None:

        def jbar(t, u, v):
            th = theta(t)
            return np.asarray(jac(t, u / th, v / th)) - rate * np.eye(sys.n)

    def Gbar(lattice):
        base = sys.replace(G=G).terminal(lattice)
        return base * float(theta(lattice.T))

    def vsbar(t):
        return theta(t) ** 2 * np.asarray(vs(t))

    # theta ranges over [1, e^{K1 T/2}] (or its reciprocal); the V-norm term
    # scales by theta^{2-q}, the growth bounds by at most theta^2.
    new_K1 = max(c.K1 - K1, 0.0)
    consts = dataclasses.replace(c, K1=new_K1)
    lip = None if sys.lipschitz is None else sys.lipschitz + abs(rate)
    return sys.replace(
        F=Fbar,
        J=Jbar,
        G=Gbar,
        varsigma=vsbar,
        constants=consts,
        F_jac=jbar,
        lipschitz=lip,
        name=f"{sys.name}[rescaled K1={K1:g}]",
    )


def rescale_factor(K1: float, t) -> np.ndarray:
    return np.exp(0.5 * K1 * np.asarray(t, dtype=float))


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class BallSampler:
    """Uniform samples on balls of radius ``radius`` plus axis-aligned extremes.

    All random numbers of a draw come from one ``(trials, D)`` array, so the
    first ``k`` samples do not depend on how many are requested.
    """

    n: int
    dW: int = 1
    dB: int = 1
    radius: float = 2.0
    T: float = 1.0
    extremes: bool = True

    def _extremes(self) -> list[dict]:
        out = []
        z = dict(
            v1=np.zeros(self.n),
            v2=np.zeros(self.n),
            phi1=np.zeros((self.n, self.dW)),
            phi2=np.zeros((self.n, self.dW)),
            x=np.ones(self.n) / math.sqrt(self.n),
        )
        for k in range(self.n):
            for s in (1.0, -1.0):
                d = {key: val.copy() for key, val in z.items()}
                d["v1"][k] = s * self.radius
                d["x"] = np.eye(self.n)[k]
                out.append(d)
        for k in range(self.n):
            for c in range(self.dW):
                for s in (1.0, -1.0):
                    d = {key: val.copy() for key, val in z.items()}
                    d["phi1"][k, c] = s * self.radius
                    d["x"] = np.eye(self.n)[k]
                    out.append(d)
        return out

    def _ball(self, normals: np.ndarray, unif: np.ndarray, shape: tuple) -> np.ndarray:
        d = int(np.prod(shape))
        norm = np.linalg.norm(normals, axis=1, keepdims=True)
        norm[norm == 0] = 1.0
        r = self.radius * unif[:, None] ** (1.0 / d)
        return (normals / norm * r).reshape((-1,) + shape)

    def draw(self, trials: int, seed: int = 0) -> dict[str, np.ndarray]:
        ext = self._extremes() if self.extremes else []
        n_ext = min(len(ext), trials)
        n_rand = trials - n_ext
        n, m = self.n, self.n * self.dW
        widths = [n, n, m, m, n]
        D = sum(widths) + len(widths) + 1
        z = make_rng(seed).standard_normal((n_rand, D))
        u = ndtr(z[:, sum(widths):])
        cols, pos = [], 0
        for k, w in enumerate(widths):
            cols.append((z[:, pos : pos + w], u[:, k]))
            pos += w
        rand = dict(
            v1=self._ball(*cols[0], (n,)),
            v2=self._ball(*cols[1], (n,)),
            phi1=self._ball(*cols[2], (n, self.dW)),
            phi2=self._ball(*cols[3], (n, self.dW)),
            x=self._ball(*cols[4], (n,)),
        )
        t_rand = self.T * u[:, -1]
        out = {}
        for key in rand:
            head = np.array([e[key] for e in ext[:n_ext]]).reshape((n_ext,) + rand[key].shape[1:])
            out[key] = np.concatenate([head, rand[key]], axis=0)
        t_head = np.linspace(0.0, self.T, n_ext) if n_ext else np.zeros(0)
        out["t"] = np.concatenate([t_head, t_rand])
        return out


def default_sampler(sys: CoefficientSystem, radius: float = 2.0, T: float = 1.0) -> BallSampler:
    return BallSampler(sys.n, sys.dW, sys.dB, radius, T)


# ---------------------------------------------------------------------------
# reports


@dataclass
class CheckReport:
    assumption: str
    trials: int
    worst_margin: float
    witness: dict
    seed: int = 0
    details: dict = field(default_factory=dict)
    threshold: float = VIOLATION_THRESHOLD

    @property
    def violated(self) -> bool:
        return self.worst_margin > self.threshold

    def to_dict(self) -> dict:
        return {
            "assumption": self.assumption,
            "trials": int(self.trials),
            "worst_margin": float(self.worst_margin),
            "witness": _jsonable(self.witness),
            "seed": int(self.seed),
            "details": _jsonable(self.details),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def _finalise(assumption, margins: dict[str, np.ndarray], samples, seed, keys) -> CheckReport:
    stacked = np.stack([np.asarray(m, dtype=float) for m in margins.values()], axis=0)
    if not np.all(np.isfinite(stacked)):
        bad = int(np.argwhere(~np.isfinite(stacked))[0, 1])
        raise CoefficientEvaluationError(
            f"{assumption}: non-finite coefficient output", {k: samples[k][bad] for k in keys}
        )
    worst_each = stacked.max(axis=1)
    which = int(np.argmax(worst_each))
    idx = int(np.argmax(stacked[which]))
    witness = {k: samples[k][idx] for k in keys}
    witness["inequality"] = list(margins)[which]
    details = {name: float(w) for name, w in zip(margins, worst_each)}
    return CheckReport(assumption, stacked.shape[1], float(worst_each[which]), witness, seed, details)


def _sq(x):
    return np.sum(np.asarray(x) ** 2, axis=-1)


def _inner(a, b):
    return np.sum(np.asarray(a) * np.asarray(b), axis=-1)


def _draw(sys, sampler, trials, seed):
    sampler = sampler or default_sampler(sys)
    return sampler.draw(trials, seed)


def check_hemicontinuity(sys, sampler=None, trials=200, seed=0, grid=32) -> CheckReport:
    """Continuity spot-check of ``s -> <F(t, v1 + s v2, phi), x>`` on ``[-1, 1]``.

    A continuous map's largest jump between neighbouring grid points shrinks
    when the grid is refined four times; the margin is
    ``maxjump(fine) - 0.75 * maxjump(coarse)``.  This is evidence, not proof.
    """
    s = _draw(sys, sampler, trials, seed)

    def max_jump(m):
        grid_s = np.linspace(-1.0, 1.0, m + 1)
        pts = s["v1"][:, None, :] + grid_s[None, :, None] * s["v2"][:, None, :]
        vals = _inner(sys.drift(s["t"][:, None, None], pts, s["phi1"][:, None]), s["x"][:, None, :])
        return np.abs(np.diff(vals, axis=1)).max(axis=1)

    coarse, fine = max_jump(grid), max_jump(4 * grid)
    return _finalise("A1", {"jump": fine - 0.75 * coarse}, s, seed, ["t", "v1", "v2", "phi1", "x"])


def check_monotonicity(sys, sampler=None, trials=10_000, seed=0) -> CheckReport:
    c = sys.constants
    s = _draw(sys, sampler, trials, seed)
    t, v1, v2, p1, p2 = s["t"], s["v1"], s["v2"], s["phi1"], s["phi2"]
    t = t[:, None]
    dF = sys.drift(t, v1, p1) - sys.drift(t, v2, p2)
    dJ = sys.diffusion(t, v1, p1) - sys.diffusion(t, v2, p2)
    dv = v1 - v2
    expr = (
        2 * _inner(dF, dv)
        + np.sum(dJ**2, axis=(-2, -1))
        - c.K1 * sys.norms.h(dv) ** 2
        - c.delta * np.sum((p1 - p2) ** 2, axis=(-2, -1))
    )
    return _finalise("A2", {"monotonicity": expr}, s, seed, ["t", "v1", "v2", "phi1", "phi2"])


def check_coercivity(sys, sampler=None, trials=10_000, seed=0) -> CheckReport:
    c = sys.constants
    s = _draw(sys, sampler, trials, seed)
    t, v, p = s["t"], s["v1"], s["phi1"]
    F = sys.drift(t[:, None], v, p)
    J = sys.diffusion(t[:, None], v, p)
    expr = (
        2 * _inner(F, v)
        + np.sum(J**2, axis=(-2, -1))
        + c.alpha * sys.norms.v(v) ** c.q
        - c.delta * np.sum(p**2, axis=(-2, -1))
        - c.K * sys.norms.h(v) ** 2
        - np.asarray(sys.varsigma(t), dtype=float)
    )
    return _finalise("A3", {"coercivity": expr}, s, seed, ["t", "v1", "phi1"])


def check_growth(sys, sampler=None, trials=10_000, seed=0) -> CheckReport:
    c = sys.constants
    s = _draw(sys, sampler, trials, seed)
    t, v, p = s["t"], s["v1"], s["phi1"]
    F = sys.drift(t[:, None], v, p)
    J = sys.diffusion(t[:, None], v, p)
    vs = np.asarray(sys.varsigma(t), dtype=float)
    vq = sys.norms.v(v) ** c.q
    h2 = sys.norms.h(v) ** 2
    p2 = np.sum(p**2, axis=(-2, -1))
    f_expr = sys.norms.dual(F) ** c.q_conj - (vs + c.K * (vq + h2 + p2)) * (1 + sys.norms.h(v) ** c.beta)
    j_expr = np.sum(J**2, axis=(-2, -1)) - c.K * (vs + vq + h2 + p2)
    return _finalise("A4", {"growth_F": f_expr, "growth_J": j_expr}, s, seed, ["t", "v1", "phi1"])


def check_lipschitz(sys, sampler=None, trials=10_000, seed=0) -> CheckReport:
    c = sys.constants
    s = _draw(sys, sampler, trials, seed)
    t, v1, v2, p1, p2 = s["t"], s["v1"], s["v2"], s["phi1"], s["phi2"]
    dF = sys.drift(t[:, None], v1, p1) - sys.drift(t[:, None], v1, p2)
    dJ = sys.diffusion(t[:, None], v1, p1) - sys.diffusion(t[:, None], v2, p1)
    f_expr = sys.norms.dual(dF) - c.K * hilbert_schmidt(p1 - p2)
    j_expr = hilbert_schmidt(dJ) - c.K * sys.norms.v(v1 - v2)
    return _finalise("A5", {"lipschitz_F": f_expr, "lipschitz_J": j_expr}, s, seed, ["t", "v1", "v2", "phi1", "phi2"])


def check_a6(sys, sampler=None, trials=10_000, seed=0) -> CheckReport:
    c = sys.constants
    s = _draw(sys, sampler, trials, seed)
    t, v, p, x = s["t"], s["v1"], s["phi1"], s["x"]
    J = sys.diffusion(t[:, None], v, p)
    J0 = sys.diffusion(t[:, None], np.zeros_like(v), np.zeros_like(p))
    jx = np.einsum("...ir,...i->...r", J, x)
    px = np.einsum("...ir,...i->...r", p, x)
    xx = np.sum(x**2, axis=-1)
    vV = sys.norms.v(v)
    expr = (
        np.sum(jx**2, axis=-1)
        - np.sum(px**2, axis=-1)
        - c.K * (np.sum(J0**2, axis=(-2, -1)) + sys.norms.h(v) ** 2) * xx
        - c.alpha1 * np.minimum(vV**c.q, vV**2) * xx
    )
    return _finalise("A6", {"a6": expr}, s, seed, ["t", "v1", "phi1", "x"])


def remark_j_phi_margin(sys, sampler=None, trials=10_000, seed=0) -> CheckReport:
    """``|J(t,v,phi1) - J(t,v,phi2)|^2 - delta |phi1 - phi2|^2`` (a consequence of A2 + A3)."""
    c = sys.constants
    s = _draw(sys, sampler, trials, seed)
    t, v, p1, p2 = s["t"], s["v1"], s["phi1"], s["phi2"]
    dJ = sys.diffusion(t[:, None], v, p1) - sys.diffusion(t[:, None], v, p2)
    expr = np.sum(dJ**2, axis=(-2, -1)) - c.delta * np.sum((p1 - p2) ** 2, axis=(-2, -1))
    return _finalise("J-phi", {"j_phi": expr}, s, seed, ["t", "v1", "phi1", "phi2"])


CHECKERS = {
    "A1": check_hemicontinuity,
    "A2": check_monotonicity,
    "A3": check_coercivity,
    "A4": check_growth,
    "A5": check_lipschitz,
    "A6": check_a6,
}


def check_b2(
    coefs: Mapping[str, Callable],
    *,
    rho: float,
    rho_prime: float,
    delta: float,
    lam: float,
    Lam: float,
    kappa: float,
    beta: float,
    alpha: float,
    trials: int = 10_000,
    seed: int = 0,
    T: float = 1.0,
    xi_radius: float = 1.0,
) -> CheckReport:
    """Ellipticity, boundedness and the scalar gap for the divergence-form PDE on (0, 1).

    ``coefs`` maps ``a, sigma, b, c, varsigma`` to callables of ``(t, x)``;
    ``sigma`` and ``varsigma`` return arrays with a trailing noise axis.
    """
    if abs(1.0 / rho + 1.0 / rho_prime + delta - 1.0) > 1e-12:
        raise ConfigurationError(f"1/rho + 1/rho' + delta = {1.0 / rho + 1.0 / rho_prime + delta!r}, must equal 1")
    if not (rho > 1 and rho_prime > 1):
        raise ConfigurationError("rho and rho' must exceed 1")
    z = make_rng(seed).standard_normal((trials, 3))
    u = ndtr(z)
    t, x, xi = T * u[:, 0], u[:, 1], xi_radius * (2 * u[:, 2] - 1)

    def ev(name, vector=False):
        fn = coefs.get(name)
        if fn is None:
            return np.zeros((trials, 1)) if vector else np.zeros(trials)
        out = np.asarray(fn(t, x), dtype=float)
        out = np.broadcast_to(out, (trials,) + out.shape[1:]) if out.ndim else np.full(trials, float(out))
        if vector and out.ndim == 1:
            out = out[:, None]
        return out

    a, sig, b, c, vs = ev("a"), ev("sigma", True), ev("b"), ev("c"), ev("varsigma", True)
    form = (2 * a - rho * np.sum(sig**2, axis=-1)) * xi**2
    bound = np.abs(a) + np.linalg.norm(sig, axis=-1) + np.abs(b) + np.abs(c) + np.linalg.norm(vs, axis=-1)
    gap = lam - kappa - rho_prime * beta - alpha
    samples = {"t": t, "x": x, "xi": xi}
    margins = {
        "ellipticity_lower": lam * xi**2 - form,
        "ellipticity_upper": form - Lam * xi**2,
        "boundedness": bound - Lam,
        "gap": np.full(trials, -gap),
    }
    rep = _finalise("B2", margins, samples, seed, ["t", "x", "xi"])
    rep.details["gap_value"] = gap
    if gap <= 0 and rep.worst_margin <= rep.threshold:
        # the gap must be strictly positive
        rep.worst_margin = max(rep.worst_margin, 2 * rep.threshold)
    return rep
