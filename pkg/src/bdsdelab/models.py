"""Named test systems and the string registries used by experiment configs.

Coefficient functions of the BDSPDE model are written as ``"kind:p1,p2"``
strings, e.g. ``"constant:1.0"`` or ``"affine:0.5,0.2"``; terminal data use
the same grammar (``"W_T:1.0"``, ``"sin_W:1.0,4"``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import expm

from .coefficients import CoefficientSystem, ConfigurationError, StructuralConstants
from .galerkin import GalerkinModel, SineBasis, assemble_bdspde, assemble_p_laplacian, assemble_power_drift, derive_constants, project
from .lattice import Field, ScenarioLattice

# ---------------------------------------------------------------------------
# string grammar


def parse_spec(spec) -> tuple[str, list[float]]:
    """Split ``"kind:1,2.5"`` into ``("kind", [1.0, 2.5])``; a bare number means ``constant``."""
    if isinstance(spec, (int, float)):
        return "constant", [float(spec)]
    if not isinstance(spec, str):
        raise ConfigurationError(f"expected a registry string, got {spec!r}")
    kind, _, rest = spec.partition(":")
    kind = kind.strip()
    try:
        args = [float(x) for x in rest.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"bad parameter list in {spec!r}") from exc
    return kind, args


def _need(kind, args, lo, hi=None):
    hi = lo if hi is None else hi
    if not lo <= len(args) <= hi:
        raise ConfigurationError(f"{kind!r} takes {lo}..{hi} parameters, got {len(args)}")


def coefficient(spec) -> Callable:
    """Space-time coefficient ``(t, x) -> value`` from a registry string.

    ``constant:c``, ``affine:a,b`` (``a + b x``), ``affine_t:a,b`` (``a + b t``),
    ``sine:amp,k`` (``amp sin(k pi x)``), ``cosine:amp,k``, ``zero``.
    """
    kind, args = parse_spec(spec)
    if kind == "zero":
        return lambda t, x: 0.0
    if kind == "constant":
        _need(kind, args, 1)
        c = args[0]
        return lambda t, x: c + 0.0 * np.asarray(x)
    if kind == "affine":
        _need(kind, args, 2)
        a, b = args
        return lambda t, x: a + b * np.asarray(x) + 0.0 * np.asarray(t)
    if kind == "affine_t":
        _need(kind, args, 2)
        a, b = args
        return lambda t, x: a + b * np.asarray(t) + 0.0 * np.asarray(x)
    if kind in ("sine", "cosine"):
        _need(kind, args, 1, 2)
        amp, k = args[0], (args[1] if len(args) > 1 else 1.0)
        fn = np.sin if kind == "sine" else np.cos
        return lambda t, x: amp * fn(k * np.pi * np.asarray(x)) + 0.0 * np.asarray(t)
    raise ConfigurationError(f"unknown coefficient kind {kind!r}")


def nonlinearity(spec) -> tuple[Callable | None, float, bool]:
    """Nonlinear term ``(t, x, theta, y, z)`` from a registry string.

    Returns the function, its Lipschitz constant and whether it reads ``z``.
    ``zero``, ``linear:L`` (``L theta``), ``lipschitz_sin:L`` (``L sin theta``),
    ``tanh:L``, ``linear_y:L`` (``L y``), ``linear_z:L`` (``L z_1``), ``source:c`` (``c``).
    """
    kind, args = parse_spec(spec) if spec is not None else ("zero", [])
    if kind == "zero":
        return None, 0.0, False
    _need(kind, args, 1)
    L = args[0]
    table = {
        "linear": (lambda t, x, th, y, z: L * th, False),
        "lipschitz_sin": (lambda t, x, th, y, z: L * np.sin(th), False),
        "tanh": (lambda t, x, th, y, z: L * np.tanh(th), False),
        "linear_y": (lambda t, x, th, y, z: L * y, False),
        "linear_z": (lambda t, x, th, y, z: L * z[..., 0], True),
    }
    if kind == "source":
        return (lambda t, x, th, y, z: L + 0.0 * th), 0.0, False
    if kind not in table:
        raise ConfigurationError(f"unknown nonlinearity kind {kind!r}")
    fn, uses_z = table[kind]
    return fn, abs(L), uses_z


def profile(spec) -> Callable:
    """Spatial profile ``x -> value`` (``sine:k``, ``bump`` = ``x(1-x)``, ``rough:s``)."""
    kind, args = parse_spec(spec)
    if kind == "sine":
        k = args[0] if args else 1.0
        return lambda x: np.sin(k * np.pi * x)
    if kind == "bump":
        return lambda x: x * (1 - x)
    if kind == "rough":
        s = args[0] if args else 1.0
        return lambda x: sum(j ** (-s) * np.sin(j * np.pi * x) for j in range(1, 65))
    raise ConfigurationError(f"unknown profile kind {kind!r}")


def terminal(spec, n: int) -> object:
    """Terminal datum from a registry string.

    ``constant:c`` (every component), ``vector:c1,...``, ``W_T:s`` (``s W_T``),
    ``W_partial:s,k`` (``s W_{t_k}``), ``sin_W:s,k`` (``sin(s W_{t_k})``),
    ``B_T:s`` (``s B_T``).  ``k`` is capped at ``N``; component ``j`` uses driver
    component ``j mod d``.
    """
    kind, args = parse_spec(spec)
    if kind == "constant":
        _need(kind, args, 1)
        return np.full(n, args[0])
    if kind == "vector":
        _need(kind, args, n)
        return np.asarray(args)
    if kind in ("W_T", "W_partial", "sin_W", "B_T"):
        s = args[0] if args else 1.0
        k = int(args[1]) if len(args) > 1 else None

        def G(lattice: ScenarioLattice, _kind=kind, _s=s, _k=k) -> Field:
            level = lattice.N if _k is None else min(_k, lattice.N)
            if _kind == "B_T":
                src = lattice.B_increment(0)
            else:
                src = lattice.W(level)
            d = src.value_shape[-1]
            idx = np.arange(n) % d
            if _kind == "sin_W":
                return src.map(lambda w: np.sin(_s * w[..., idx]))
            return src.map(lambda w: _s * w[..., idx])

        return G
    raise ConfigurationError(f"unknown terminal kind {kind!r}")


# ---------------------------------------------------------------------------
# model specification


@dataclass(frozen=True)
class ModelSpec:
    """A test system with its optional oracle and checker routing.

    ``oracle(lattice)`` returns the exact root value ``u_0`` as a field (or
    array) when a closed form exists.  ``galerkin`` carries the PDE model for
    the (B2) check; ``a6`` marks systems where (A6) applies.
    """

    system: CoefficientSystem
    oracle: Callable | None = None
    galerkin: GalerkinModel | None = None
    monotone: bool = True
    a6: bool = False
    name: str = "system"


def _scalar_const(**kw) -> StructuralConstants:
    return StructuralConstants(**kw)


def linear(a=1.0, J0=0.0, G="constant:1.0", dW=1, dB=1):
    """``F(u) = a u``, ``J = J0``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    n = a.shape[0]
    J0 = np.broadcast_to(np.asarray(J0, dtype=float), (n, dB)).copy()
    lam = float(np.linalg.eigvalsh(0.5 * (a + a.T)).max())
    opnorm = float(np.linalg.norm(a, 2))
    consts = _scalar_const(K=max(2 * lam + 1.0, opnorm**2, 1.0), K1=max(0.0, 2 * lam), delta=0.5, alpha=1.0)
    jnorm2 = float(np.sum(J0**2))
    J = (lambda t, u, v: np.broadcast_to(J0, np.shape(u) + (dB,))) if np.any(J0) else None
    Gv = terminal(G, n)
    sys = CoefficientSystem(
        n=n, F=lambda t, u, v: u @ a.T, J=J, G=Gv, dW=dW, dB=dB,
        varsigma=lambda t: np.full(np.shape(t), jnorm2), constants=consts,
        F_jac=lambda t, u, v: np.broadcast_to(a, np.shape(u)[:-1] + a.shape),
        name="linear",
    )
    oracle = None
    if not np.any(J0) and not callable(Gv):

        def oracle(lattice, _a=a, _g=np.asarray(Gv)):
            return expm(_a * lattice.T) @ _g

    return ModelSpec(sys, oracle, a6=True, name="linear")


def zero(G="constant:1.0", n=1, dW=1, dB=1):
    """``F = 0``, ``J = 0``: the solution is the martingale ``E[G | F_t]``."""
    n = int(n)
    Gv = terminal(G, n)
    sys = CoefficientSystem(n=n, F=lambda t, u, v: np.zeros(np.shape(u)), G=Gv, dW=dW, dB=dB,
                            constants=_scalar_const(K=1.0), name="zero")
    oracle = (lambda lattice, _g=np.asarray(Gv): _g) if not callable(Gv) else None
    return ModelSpec(sys, oracle, a6=True, name="zero")


def martingale(G="W_T:1.0", n=1, dW=1, dB=1):
    """``F = 0``, ``J = 0``, ``G = W_T``; ``u_0 = 0``."""
    spec = zero(G=G, n=n, dW=dW, dB=dB)
    kind, _ = parse_spec(G)
    oracle = (lambda lattice, _n=int(n): np.zeros(_n)) if kind in ("W_T", "W_partial") else spec.oracle
    return ModelSpec(spec.system.replace(name="martingale"), oracle, a6=True, name="martingale")


def backward_noise(c=0.5, g0=1.0, dW=1, dB=1):
    """``F = 0``, ``J = c`` (first B component): ``u_t = g0 + c (B_T - B_t)``."""
    J0 = np.zeros((1, dB))
    J0[0, 0] = c
    sys = CoefficientSystem(
        n=1, F=lambda t, u, v: np.zeros(np.shape(u)), J=lambda t, u, v: np.broadcast_to(J0, np.shape(u) + (dB,)),
        G=np.array([g0]), dW=dW, dB=dB, varsigma=lambda t: np.full(np.shape(t), c * c),
        constants=_scalar_const(K=1.0), name="backward_noise",
    )

    def oracle(lattice, _c=c, _g=g0):
        return lattice.B_increment(0).map(lambda b: _g + _c * b[..., :1])

    return ModelSpec(sys, oracle, a6=True, name="backward_noise")


def linear_noise(a=1.0, L=0.2, g=1.0, dW=1, dB=1):
    """Scalar ``F(u) = a u``, ``J(u) = L u``; ``u_0 = g exp((a - L^2/2) T + L B_T)`` pathwise."""
    lam = max(0.0, 2 * a + L * L)
    consts = _scalar_const(K=max(2 * a + L * L + 1.0, a * a, abs(L), L * L, 1.0), K1=lam, delta=0.5, alpha=1.0)

    def J(t, u, v):
        out = np.zeros(np.shape(u) + (dB,))
        out[..., 0] = L * np.asarray(u)
        return out

    sys = CoefficientSystem(n=1, F=lambda t, u, v: a * np.asarray(u), J=J, G=np.array([g]), dW=dW, dB=dB,
                            constants=consts, F_jac=lambda t, u, v: np.full(np.shape(u) + (1,), a), name="linear_noise")

    def oracle(lattice, _a=a, _L=L, _g=g):
        T = lattice.T
        return lattice.B_increment(0).map(lambda b: _g * np.exp((_a - 0.5 * _L * _L) * T + _L * b[..., :1]))

    return ModelSpec(sys, oracle, a6=True, name="linear_noise")


def _cubic(sign, G, n, dW, dB, name):
    n = int(n)
    consts = _scalar_const(K=1.0, K1=0.0, delta=0.5, alpha=1.0, beta=4.0, p=6.0) if sign < 0 else _scalar_const(K=1.0)
    sys = CoefficientSystem(
        n=n, F=lambda t, u, v: sign * np.asarray(u) ** 3, G=terminal(G, n), dW=dW, dB=dB, constants=consts,
        F_jac=lambda t, u, v: sign * 3 * np.asarray(u)[..., :, None] ** 2 * np.eye(n), name=name,
    )
    return ModelSpec(sys, monotone=sign < 0, a6=True, name=name)


def cubic(G="sin_W:1.0,4", n=1, dW=1, dB=1):
    """Monotone ``F(u) = -u^3`` componentwise."""
    return _cubic(-1.0, G, n, dW, dB, "cubic")


def cubic_bad(G="sin_W:1.0,4", n=1, dW=1, dB=1):
    """Non-monotone ``F(u) = +u^3``: the constructed violator."""
    return _cubic(1.0, G, n, dW, dB, "cubic_bad")


def vcoupled(gamma=0.5, G="W_partial:1.0,4", dW=1, dB=1):
    """Scalar ``F(u, v) = -u + gamma v_1``."""
    d = 0.5
    K1 = max(0.0, gamma * gamma / d - 2.0)
    consts = _scalar_const(K=max(1.0, gamma * gamma / d, 2.0, 2 * gamma * gamma, abs(gamma)), K1=K1, delta=d, alpha=1.0)
    sys = CoefficientSystem(
        n=1, F=lambda t, u, v: -np.asarray(u) + gamma * np.asarray(v)[..., 0], G=terminal(G, 1), dW=dW, dB=dB,
        constants=consts, F_jac=lambda t, u, v: np.full(np.shape(u) + (1,), -1.0), name="vcoupled",
    )
    return ModelSpec(sys, a6=True, name="vcoupled")


def _drift_common(r, n, delta1, delta2, L1, terminal_profile, terminal_w):
    return dict(
        r=float(r), basis=SineBasis(int(n)), delta1=float(delta1), delta2=float(delta2), L1=float(L1),
        terminal=profile(terminal_profile), terminal_w=float(terminal_w),
    )


def power_drift(r=4.0, n=4, delta1=0.0, delta2=0.0, L1=0.0, terminal="sine:1", terminal_w=0.0, dW=1, dB=1):
    """Galerkin power drift ``-|U|^{r-2} U`` with optional v- and u-coupled noise."""
    _single_driver(dW, dB, "power_drift")
    sys = assemble_power_drift(**_drift_common(r, n, delta1, delta2, L1, terminal, terminal_w))
    return ModelSpec(sys, a6=not delta2, name="power_drift")


def p_laplacian(r=4.0, n=4, delta1=0.0, delta2=0.0, L1=0.0, terminal="sine:1", terminal_w=0.0, dW=1, dB=1):
    """Galerkin p-Laplacian with optional v- and u-coupled noise."""
    _single_driver(dW, dB, "p_laplacian")
    sys = assemble_p_laplacian(**_drift_common(r, n, delta1, delta2, L1, terminal, terminal_w))
    return ModelSpec(sys, a6=not delta2, name="p_laplacian")


def _single_driver(dW, dB, name):
    if dW != 1 or dB != 1:
        raise ConfigurationError(f"{name} is built for dW = dB = 1")


BDSPDE_DEFAULTS = dict(
    a="constant:1.0", sigma="constant:0.1", b="constant:0.1", c="constant:0.1", varsigma="constant:0.1",
    f="zero", g="lipschitz_sin:0.2", h="linear:0.2", n=4, lam=1.96, Lam=2.0, rho=4.0, rho_prime=4.0,
    delta=0.5, kappa=0.0, beta=0.0, alpha=0.0, terminal="sine:1", terminal_w=0.0, M=None,
)


def galerkin_model(dW=1, dB=1, T=1.0, **params) -> GalerkinModel:
    """Build a :class:`GalerkinModel` from registry strings (defaults: the shipped BDSPDE)."""
    p = dict(BDSPDE_DEFAULTS)
    unknown = set(params) - set(p)
    if unknown:
        raise ConfigurationError(f"unknown bdspde parameters {sorted(unknown)}")
    p.update(params)
    f, Lf, zf = nonlinearity(p["f"])
    g, Lg, zg = nonlinearity(p["g"])
    h, Lh, zh = nonlinearity(p["h"])
    return GalerkinModel(
        n=int(p["n"]), a=coefficient(p["a"]), sigma=coefficient(p["sigma"]), b=coefficient(p["b"]),
        c=coefficient(p["c"]), varsigma_coef=coefficient(p["varsigma"]), f=f, g=g, h=h, h_uses_z=zh,
        lam=float(p["lam"]), Lam=float(p["Lam"]), rho=float(p["rho"]), rho_prime=float(p["rho_prime"]),
        delta=float(p["delta"]), kappa=float(p["kappa"]), beta=float(p["beta"]), alpha=float(p["alpha"]),
        L=max(Lf, Lg, Lh), dW=int(dW), dB=int(dB), T=float(T), terminal=profile(p["terminal"]),
        terminal_w=float(p["terminal_w"]), M=p["M"], name="bdspde",
    )


def bdspde(dW=1, dB=1, T=1.0, **params):
    """Spectral Galerkin truncation of the divergence-form BDSPDE on (0, 1)."""
    model = galerkin_model(dW=dW, dB=dB, T=T, **params)
    _, _, split = derive_constants(model)
    return ModelSpec(assemble_bdspde(model), galerkin=model, a6=split["a6_applicable"], name="bdspde")


def heat(a0=1.0, n=4, terminal="sine:1", dW=1, dB=1, T=1.0):
    """Deterministic heat equation ``u_t = a0 u_xx`` projected on ``n`` sine modes."""
    model = galerkin_model(
        dW=dW, dB=dB, T=T, a=f"constant:{a0}", sigma="zero", b="zero", c="zero", varsigma="zero",
        f="zero", g="zero", h="zero", n=n, lam=1.96, Lam=max(2.0, 2 * a0), terminal=terminal,
    )
    sys = assemble_bdspde(model).replace(name="heat")

    def oracle(lattice, _a=a0, _m=model):
        coords = project(_m.terminal, SineBasis(_m.n, _m.M))
        return coords * np.exp(-_a * (np.pi * np.arange(1, _m.n + 1)) ** 2 * lattice.T)

    return ModelSpec(sys, oracle, galerkin=model, a6=True, name="heat")


REGISTRY: dict[str, Callable[..., ModelSpec]] = {
    "zero": zero,
    "linear": linear,
    "martingale": martingale,
    "backward_noise": backward_noise,
    "linear_noise": linear_noise,
    "cubic": cubic,
    "cubic_bad": cubic_bad,
    "vcoupled": vcoupled,
    "power_drift": power_drift,
    "p_laplacian": p_laplacian,
    "bdspde": bdspde,
    "heat": heat,
}

#: Systems that satisfy their declared assumptions (every registry entry but the violator).
SHIPPED = tuple(k for k in REGISTRY if k != "cubic_bad")


def build_model(name: str, params: dict | None = None, dW: int = 1, dB: int = 1, T: float = 1.0) -> ModelSpec:
    """Look up ``name`` in :data:`REGISTRY` and build it with ``params``."""
    if name not in REGISTRY:
        raise ConfigurationError(f"unknown model {name!r}; known: {sorted(REGISTRY)}")
    params = dict(params or {})
    kwargs = dict(dW=int(dW), dB=int(dB))
    if name in ("bdspde", "heat"):
        kwargs["T"] = float(T)
    try:
        return REGISTRY[name](**kwargs, **params)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for model {name!r}: {exc}") from exc
