"""Resolvent ``H_eps = (I - eps F)^{-1}`` and Yosida approximation of a monotone drift.

All routines are batched: ``x`` has shape ``(..., n)`` and ``F`` must map
arrays of that shape to arrays of the same shape.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .coefficients import BallSampler, ConfigurationError, _jsonable

METHODS = ("newton_with_damping", "scalar_bracketing")
_FD_STEP = np.sqrt(np.finfo(float).eps)


class ResolventError(ArithmeticError):
    """The root solve for ``y - eps F(y) = x`` failed."""

    def __init__(self, message, residual=None, witness=None):
        super().__init__(message)
        self.residual = residual
        self.witness = witness


class MonotonicityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ResolventConfig:
    eps: float
    tol: float = 1e-12
    max_iter: int = 200
    method: str = "newton_with_damping"
    lipschitz: float | None = None

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigurationError(f"eps must be positive, got {self.eps}")
        if not self.tol > 0:
            raise ConfigurationError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ConfigurationError("max_iter must be at least 1")
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown resolvent method {self.method!r}; choose from {METHODS}")


def _norm(x):
    return np.sqrt(np.sum(x * x, axis=-1))


def _scale(x, Fy, eps):
    """Residual scale; the tolerance is relative once the data exceed 1."""
    return np.maximum(1.0, np.maximum(_norm(x), eps * _norm(Fy)))


def fd_jacobian(F: Callable, y: np.ndarray, Fy: np.ndarray | None = None) -> np.ndarray:
    """Forward-difference Jacobian ``dF/dy`` with shape ``(..., n, n)``."""
    Fy = F(y) if Fy is None else Fy
    n = y.shape[-1]
    h = _FD_STEP * (1.0 + _norm(y))[..., None]
    jac = np.empty(y.shape + (n,))
    for k in range(n):
        yk = y.copy()
        yk[..., k] += h[..., 0]
        jac[..., :, k] = (F(yk) - Fy) / h
    return jac


def _warn_if_not_monotone(jac, eps):
    sym = 0.5 * (jac + np.swapaxes(jac, -1, -2))
    top = np.linalg.eigvalsh(eps * sym)[..., -1]
    if np.any(top >= 1.0):
        warnings.warn(
            f"eps * F' has a symmetric eigenvalue {float(top.max()):.3g} >= 1; the drift is not "
            "monotone here and the resolvent may not be unique",
            MonotonicityWarning,
            stacklevel=3,
        )


def _newton(F, cfg, x, y, jac_fn):
    eps = cfg.eps
    Fy = F(y)
    g = y - eps * Fy - x
    gn = _norm(g)
    done = gn <= cfg.tol * _scale(x, Fy, eps)
    warned = False
    n = x.shape[-1]
    eye = np.eye(n)
    for _ in range(cfg.max_iter):
        if np.all(done):
            break
        jac = jac_fn(y, Fy)
        if not warned:
            _warn_if_not_monotone(jac, eps)
            warned = True
        A = eye - eps * jac
        try:
            step = -np.linalg.solve(A, g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            break
        step = np.where(done[..., None], 0.0, step)
        lam = np.ones(gn.shape)
        pending = ~done
        new_y, new_F, new_g, new_gn = y.copy(), Fy.copy(), g.copy(), gn.copy()
        for _half in range(40):
            trial = y + lam[..., None] * step
            Ft = F(trial)
            gt = trial - eps * Ft - x
            gtn = _norm(gt)
            ok = pending & np.isfinite(gtn) & (gtn < gn)
            new_y[ok], new_F[ok], new_g[ok], new_gn[ok] = trial[ok], Ft[ok], gt[ok], gtn[ok]
            pending &= ~ok
            if not np.any(pending):
                break
            lam = np.where(pending, 0.5 * lam, lam)
        stalled = pending & ~done
        y, Fy, g, gn = new_y, new_F, new_g, new_gn
        done = done | (gn <= cfg.tol * _scale(x, Fy, eps))
        if np.all(done | stalled):
            break
    return y, Fy, gn, done


def _bracket_1d(F, cfg, x, mask):
    """Bisection for the increasing scalar map ``y - eps F(y) - x``."""
    eps = cfg.eps

    def g(y):
        return y - eps * F(y) - x

    span = 1.0 + np.abs(x) + eps * np.abs(F(x))
    lo, hi = x - span, x + span
    for _ in range(200):
        bad = (g(lo) > 0) | (g(hi) < 0)
        if not np.any(bad & mask[..., None]):
            break
        span = np.where(bad, 2.0 * span, span)
        lo, hi = np.where(bad, x - span, lo), np.where(bad, x + span, hi)
    else:
        raise ResolventError("could not bracket the scalar resolvent root")
    mid = 0.5 * (lo + hi)
    for _ in range(max(cfg.max_iter, 2100)):
        gm = g(mid)
        if np.all(np.abs(gm[..., 0]) <= cfg.tol * _scale(x, (mid - x - gm) / eps, eps)):
            break
        lo = np.where(gm <= 0, mid, lo)
        hi = np.where(gm > 0, mid, hi)
        new_mid = 0.5 * (lo + hi)
        if np.array_equal(new_mid, mid):
            break
        mid = new_mid
    return mid


def _fixed_point(F, cfg, x, y):
    L = cfg.lipschitz
    eps = cfg.eps
    for _ in range(cfg.max_iter):
        y = (x + eps * (F(y) + L * y)) / (1.0 + eps * L)
    return y


def resolve(F: Callable, cfg: ResolventConfig, x, jac: Callable | None = None) -> np.ndarray:
    """Solve ``y - eps F(y) = x`` for every row of ``x``.

    Damped Newton (finite-difference Jacobian unless ``jac`` is given) with
    step halving; rows that stall fall back to bisection when ``n == 1`` or
    to the preconditioned fixed-point map when a Lipschitz bound is declared.
    The accepted residual is ``tol * max(1, |x|, eps |F(y)|)``.

    Examples
    --------
    >>> cfg = ResolventConfig(eps=0.5)
    >>> float(resolve(lambda y: -y, cfg, np.array([3.0]))[0])
    2.0
    """
    x = np.asarray(x, dtype=float)
    scalar_input = x.ndim == 0
    if scalar_input:
        x = x[None]
    n = x.shape[-1]
    shape = x.shape
    eps = cfg.eps
    F_user, jac_user = F, jac

    def F(y):
        return np.asarray(F_user(y.reshape(shape)), dtype=float).reshape(-1, n)

    if jac_user is not None:

        def jac(y):
            return np.asarray(jac_user(y.reshape(shape)), dtype=float).reshape(-1, n, n)

    x = x.reshape(-1, n)
    if cfg.method == "scalar_bracketing":
        if n != 1:
            raise ConfigurationError("scalar_bracketing needs a one-dimensional state")
        y = _bracket_1d(F, cfg, x, np.ones(x.shape[:-1], bool))
        Fy = F(y)
        done = _norm(y - eps * Fy - x) <= cfg.tol * _scale(x, Fy, eps)
    else:
        jac_fn = (lambda y, Fy: np.asarray(jac(y), dtype=float)) if jac else (lambda y, Fy: fd_jacobian(F, y, Fy))
        y, Fy, gn, done = _newton(F, cfg, x, x.copy(), jac_fn)
    if not np.all(done):
        if n == 1:
            yb = _bracket_1d(F, cfg, x, ~done)
            y = np.where(done[..., None], y, yb)
        elif cfg.lipschitz is not None:
            yf = _fixed_point(F, cfg, x, y)
            y = np.where(done[..., None], y, yf)
        Fy = F(y)
        res = _norm(y - eps * Fy - x)
        done = res <= cfg.tol * _scale(x, Fy, eps)
        if not np.all(done):
            idx = int(np.argmax(np.where(done, -np.inf, res)))
            raise ResolventError(
                f"resolvent did not converge in {cfg.max_iter} iterations; worst residual {float(res.max()):.3e}",
                residual=float(res.max()),
                witness={"index": idx, "x": x[idx].tolist()},
            )
    y = y.reshape(shape)
    return y[0] if scalar_input else y


def resolvent_residual(F: Callable, cfg: ResolventConfig, x, y) -> np.ndarray:
    """``|y - eps F(y) - x|`` per row."""
    return _norm(np.asarray(y) - cfg.eps * F(np.asarray(y)) - np.asarray(x))


class YosidaValue(NamedTuple):
    value: np.ndarray
    discrepancy: float


def yosida_apply(F: Callable, cfg: ResolventConfig, x, jac: Callable | None = None, return_discrepancy=False):
    """Yosida approximation ``F_eps(x) = (H_eps(x) - x) / eps``.

    With ``return_discrepancy`` the maximal gap to ``F(H_eps(x))`` is returned too.
    """
    x = np.asarray(x, dtype=float)
    y = resolve(F, cfg, x, jac)
    val = (y - x) / cfg.eps
    if not return_discrepancy:
        return val
    direct = np.asarray(F(y))
    return YosidaValue(val, float(np.max(np.abs(val - direct))) if val.size else 0.0)


@dataclass
class YosidaReport:
    eps: float
    trials: int
    lipschitz_margin: float
    bound_margin: float
    monotone_margin: float
    limit_eps: tuple
    limit_margins: tuple
    tol: float
    details: dict = field(default_factory=dict)

    @property
    def limit_decreasing(self) -> bool:
        m = self.limit_margins
        return all(m[k + 1] < m[k] for k in range(len(m) - 1))

    @property
    def passed(self) -> bool:
        return (
            self.lipschitz_margin <= 1e-9
            and self.monotone_margin <= 1e-9
            and self.bound_margin <= self.tol
            and self.limit_decreasing
        )

    def to_dict(self) -> dict:
        return _jsonable(
            {
                "eps": self.eps,
                "trials": self.trials,
                "lipschitz_margin": self.lipschitz_margin,
                "bound_margin": self.bound_margin,
                "monotone_margin": self.monotone_margin,
                "limit_eps": list(self.limit_eps),
                "limit_margins": list(self.limit_margins),
                "limit_decreasing": self.limit_decreasing,
                "passed": self.passed,
                "details": self.details,
            }
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def verify_yosida_properties(
    F: Callable,
    cfg: ResolventConfig,
    n: int,
    sampler: BallSampler | None = None,
    trials: int = 1000,
    seed: int = 0,
    limit_eps=(1e-2, 1e-3, 1e-4),
    jac: Callable | None = None,
) -> YosidaReport:
    """Sampled margins of the four Yosida properties.

    (a) ``|F_eps(x) - F_eps(y)| - (2/eps)|x - y|``, (b) ``|F_eps(x)| - |F(x)|``,
    (c) ``<F_eps(x) - F_eps(y), x - y>``, each maximised over sampled pairs,
    and (d) ``max_x |F_eps(x) - F(x)|`` for each ``eps`` in ``limit_eps``.
    """
    sampler = sampler or BallSampler(n)
    s = sampler.draw(trials, seed)
    x, y = s["v1"], s["v2"]
    fx = yosida_apply(F, cfg, x, jac)
    fy = yosida_apply(F, cfg, y, jac)
    dx = x - y
    a = _norm(fx - fy) - (2.0 / cfg.eps) * _norm(dx)
    Fx = np.asarray(F(x))
    b = _norm(fx) - _norm(Fx)
    c = np.sum((fx - fy) * dx, axis=-1)
    limits = []
    for e in limit_eps:
        sub = ResolventConfig(e, cfg.tol, cfg.max_iter, cfg.method, cfg.lipschitz)
        limits.append(float(np.max(_norm(yosida_apply(F, sub, x, jac) - Fx))))
    ia, ib, ic = int(np.argmax(a)), int(np.argmax(b)), int(np.argmax(c))
    details = {
        "witness_a": {"x": x[ia], "y": y[ia]},
        "witness_b": {"x": x[ib]},
        "witness_c": {"x": x[ic], "y": y[ic]},
    }
    return YosidaReport(
        cfg.eps, trials, float(a.max()), float(b.max()), float(c.max()), tuple(limit_eps), tuple(limits), cfg.tol, details
    )
