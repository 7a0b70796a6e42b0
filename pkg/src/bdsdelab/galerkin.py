"""Spectral Galerkin compilation of divergence-form BDSPDEs on (0, 1).

The sine basis ``e_j(x) = sqrt(2) sin(j pi x)`` diagonalises the Dirichlet
Laplacian, so in coordinates

* ``|u|^2   = sum u_j^2``                       (L^2),
* ``|u|_V^2 = sum (1 + (j pi)^2) u_j^2``        (H^1_0),
* ``|u|_*^2 = sum u_j^2 / (1 + (j pi)^2)``      (H^{-1}).

Divergence terms are integrated by parts against the basis, and all spatial
integrals use the basis quadrature.
"""
from __future__ import annotations

import dataclasses
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .coefficients import CoefficientSystem, ConfigurationError, NormProvider, StructuralConstants, euclidean
from .lattice import ScenarioLattice
from .solver import SolverConfig, solve


class SineBasis:
    """First ``n`` Dirichlet sine modes on (0, 1) with a fixed quadrature.

    Parameters
    ----------
    n : int
        Number of modes.
    M : int, optional
        Number of quadrature intervals (trapezoid) or nodes (Gauss);
        defaults to ``max(64, 8 n)``.
    quadrature : {"trapezoid", "gauss"}
    quad_tol : float
        Allowed deviation of the discrete Gram and stiffness matrices.
    """

    def __init__(self, n: int, M: int | None = None, quadrature: str = "trapezoid", quad_tol: float = 1e-8):
        if n < 1:
            raise ConfigurationError("basis size must be at least 1")
        self.n = int(n)
        self.M = int(M) if M is not None else max(64, 8 * self.n)
        self.quadrature = quadrature
        self.quad_tol = quad_tol
        if quadrature == "trapezoid":
            self.nodes = np.linspace(0.0, 1.0, self.M + 1)
            w = np.full(self.M + 1, 1.0 / self.M)
            w[0] = w[-1] = 0.5 / self.M
        elif quadrature == "gauss":
            g, gw = np.polynomial.legendre.leggauss(self.M)
            self.nodes, w = 0.5 * (g + 1.0), 0.5 * gw
        else:
            raise ConfigurationError(f"unknown quadrature {quadrature!r}")
        self.weights = w
        self.freqs = math.pi * np.arange(1, self.n + 1)
        self.E = math.sqrt(2.0) * np.sin(np.outer(self.nodes, self.freqs))
        self.D = math.sqrt(2.0) * self.freqs * np.cos(np.outer(self.nodes, self.freqs))
        self.gram = self.E.T @ (w[:, None] * self.E)
        self.stiffness = self.D.T @ (w[:, None] * self.D)
        if self.gram_error > quad_tol or self.stiffness_error > quad_tol:
            raise ConfigurationError(
                f"quadrature with M={self.M} under-resolves n={self.n}: gram error {self.gram_error:.2e}, "
                f"stiffness error {self.stiffness_error:.2e} (tolerance {quad_tol:g})"
            )

    @property
    def gram_error(self) -> float:
        return float(np.abs(self.gram - np.eye(self.n)).max())

    @property
    def stiffness_error(self) -> float:
        target = np.diag(self.freqs**2)
        return float(np.abs(self.stiffness - target).max() / max(1.0, self.freqs[-1] ** 2))

    @property
    def v_weights(self) -> np.ndarray:
        return 1.0 + self.freqs**2

    def values(self, u: np.ndarray) -> np.ndarray:
        """``U(x_k) = sum_j u_j e_j(x_k)`` on the nodes."""
        return np.asarray(u) @ self.E.T

    def derivatives(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(u) @ self.D.T

    def test(self, integrand: np.ndarray) -> np.ndarray:
        """``int integrand e_j`` for every mode (last axis = nodes)."""
        return (integrand * self.weights) @ self.E

    def test_derivative(self, integrand: np.ndarray) -> np.ndarray:
        """``int integrand e_j'`` for every mode."""
        return (integrand * self.weights) @ self.D

    def integrate(self, values: np.ndarray) -> np.ndarray:
        return values @ self.weights

    def norms(self) -> NormProvider:
        vw, dw = self.v_weights, 1.0 / self.v_weights

        def v_norm(x):
            return np.sqrt(np.sum(vw * np.asarray(x) ** 2, axis=-1))

        def dual_norm(x):
            return np.sqrt(np.sum(dw * np.asarray(x) ** 2, axis=-1))

        return NormProvider(h=euclidean, v=v_norm, dual=dual_norm, embed=1.0, embed_dual=1.0)


def project(fn: Callable[[np.ndarray], np.ndarray], basis: SineBasis) -> np.ndarray:
    """Coordinates ``c_j = int fn e_j`` by quadrature."""
    return basis.test(np.asarray(fn(basis.nodes), dtype=float))


def pad(u: np.ndarray, n: int) -> np.ndarray:
    """Zero-pad coordinates along the last axis to ``n`` modes."""
    u = np.asarray(u)
    if u.shape[-1] > n:
        raise ValueError("cannot pad to fewer modes")
    width = [(0, 0)] * (u.ndim - 1) + [(0, n - u.shape[-1])]
    return np.pad(u, width)


# ---------------------------------------------------------------------------
# quasi-linear model


def _zero(t, x):
    return 0.0


@dataclass(frozen=True)
class GalerkinModel:
    """Coefficients of the divergence-form BDSPDE on (0, 1).

    ``a, b, c`` map ``(t, x)`` to scalars, ``sigma`` and ``varsigma_coef``
    to arrays with a trailing ``dW`` axis.  The nonlinearities map
    ``(t, x, theta, y, z)`` (value, derivative, ``v``-values with a trailing
    ``dW`` axis) to a scalar (``f``, ``g``) or to a ``dB``-vector (``h``; a
    scalar is used for every component); ``None`` means absent.  ``t``
    broadcasts against ``theta``.  ``L, kappa, beta, alpha, delta`` are the declared
    Lipschitz constants of the nonlinearities, ``lam, Lam, rho, rho_prime``
    the ellipticity data.
    """

    n: int = 4
    a: Callable = lambda t, x: 1.0
    sigma: Callable = _zero
    b: Callable = _zero
    c: Callable = _zero
    varsigma_coef: Callable = _zero
    f: Callable | None = None
    g: Callable | None = None
    h: Callable | None = None
    h_uses_z: bool = True
    lam: float = 2.0
    Lam: float = 2.0
    rho: float = 4.0
    rho_prime: float = 4.0
    delta: float = 0.5
    kappa: float = 0.0
    beta: float = 0.0
    alpha: float = 0.0
    L: float = 0.0
    dW: int = 1
    dB: int = 1
    T: float = 1.0
    terminal: Callable = lambda x: np.sin(np.pi * x)
    terminal_w: float = 0.0
    M: int | None = None
    name: str = "bdspde"

    @property
    def basis(self) -> SineBasis:
        return SineBasis(self.n, self.M)

    def with_n(self, n: int) -> "GalerkinModel":
        return dataclasses.replace(self, n=int(n))

    def b2_coefs(self) -> dict:
        return {"a": self.a, "sigma": self.sigma, "b": self.b, "c": self.c, "varsigma": self.varsigma_coef}

    def b2_parameters(self) -> dict:
        return dict(
            rho=self.rho,
            rho_prime=self.rho_prime,
            delta=self.delta,
            lam=self.lam,
            Lam=self.Lam,
            kappa=self.kappa,
            beta=self.beta,
            alpha=self.alpha,
            T=self.T,
        )


def _sup(fn, basis: SineBasis, T: float, vector=False) -> float:
    ts = np.linspace(0.0, T, 17)[:, None]
    vals = np.asarray(fn(ts, basis.nodes[None, :]), dtype=float)
    if vector:
        vals = np.sqrt(np.sum(np.atleast_1d(vals) ** 2, axis=-1)) if vals.ndim >= 3 else np.abs(vals)
    return float(np.max(np.abs(vals)))


def _zero_parts(model: GalerkinModel, basis: SineBasis, t):
    """``|f0|^2, |g0|^2, |h0|^2`` (L^2 norms at zero arguments) at time ``t``."""
    x = basis.nodes
    zero = np.zeros_like(x)
    z0 = np.zeros(x.shape + (model.dW,))
    tt = np.asarray(t, dtype=float)[..., None]
    out = []
    for fn, tail in ((model.f, ()), (model.g, ()), (model.h, (model.dB,))):
        if fn is None:
            out.append(np.zeros(tt.shape[:-1]))
            continue
        vals = np.asarray(fn(tt, x, zero, zero, z0), dtype=float)
        shape = tt.shape[:-1] + x.shape
        if tail:
            sq = np.sum(_h_values(vals, shape, model.dB) ** 2, axis=-1)
        else:
            sq = np.broadcast_to(vals, shape) ** 2
        out.append(basis.integrate(sq))
    return out


def derive_constants(model: GalerkinModel, basis: SineBasis | None = None) -> tuple[StructuralConstants, Callable, dict]:
    """Structural constants of the assembled system from the ellipticity and Lipschitz data.

    Every cross term is split by an explicit Young inequality.  The split
    borrows part of the ellipticity gap ``lam - kappa - rho' beta - alpha`` to
    push the ``|v|^2`` coefficient strictly below 1; the admissible split with
    the smallest ``K1`` is returned together with ``varsigma(t)`` and the split
    parameters.  Coefficient suprema are sampled on the quadrature nodes at 17
    times, which is exact for time-independent coefficients.
    """
    basis = basis or model.basis
    if abs(1.0 / model.rho + 1.0 / model.rho_prime + model.delta - 1.0) > 1e-12:
        raise ConfigurationError("1/rho + 1/rho' + delta must equal 1")
    Sa = _sup(model.a, basis, model.T)
    Ss = _sup(model.sigma, basis, model.T, vector=True)
    Sb = _sup(model.b, basis, model.T)
    Sc = _sup(model.c, basis, model.T)
    Sv = _sup(model.varsigma_coef, basis, model.T, vector=True)
    ts = np.linspace(0.0, model.T, 17)
    f0, g0, h0 = (float(np.max(q)) for q in _zero_parts(model, basis, ts))
    L = model.L
    has_f, has_g, has_h = model.f is not None, model.g is not None, model.h is not None
    eps0 = 0.1 if h0 > 0 else 0.0
    hL = L if has_h else 0.0
    hA = model.alpha if has_h else 0.0
    hD = model.delta if (has_h and model.h_uses_z) else 0.0
    kappa = model.kappa if has_f else 0.0
    beta = model.beta if has_f else 0.0

    best = None
    mults = (1.0, 1.25, 1.5, 2.0, 3.0, 5.0, 10.0)
    fracs = (0.02, 0.05, 0.1, 0.2, 0.3, 0.45)
    for m1, m2, wA, wB, tau in itertools.product(
        mults if Ss > 0 else (1.0,),
        mults if beta > 0 else (1.0,),
        fracs if hL > 0 else (0.0,),
        fracs if hA > 0 else (0.0,),
        (0.25, 0.5, 0.75),
    ):
        wC = 1.0 - wA - wB
        if hD > 0 and wC <= 0:
            continue
        if hD == 0:
            # no z-part: give the remaining weight to the other terms
            if hL > 0 and hA > 0:
                wA, wB = wA / (wA + wB), wB / (wA + wB)
            elif hL > 0:
                wA = 1.0
            elif hA > 0:
                wB = 1.0
        rho1, rho1p = model.rho * m1, model.rho_prime * m2
        cost = (rho1 - model.rho) * Ss**2 + kappa + rho1p * beta + ((1 + eps0) * hA / wB if hA > 0 else 0.0)
        R = model.lam - cost
        if R <= 0:
            continue
        consumers = [k for k, on in (("f", has_f and L > 0), ("b", Sb > 0), ("g", has_g and L > 0), ("eta", f0 > 0)) if on]
        share = tau * R / max(len(consumers), 1)
        eps = {k: share for k in consumers}
        alpha_rem = R - share * len(consumers)
        vcoef = (1.0 / rho1 if Ss > 0 else 0.0) + (1.0 / rho1p if beta > 0 else 0.0)
        vcoef += (1 + eps0) * hD / wC if hD > 0 else 0.0
        slack = 1.0 - vcoef
        if slack <= 0:
            continue
        vcons = [k for k, on in (("g", has_g and L > 0), ("vs", Sv > 0)) if on]
        vshare = 0.5 * slack / max(len(vcons), 1)
        delta_A = vcoef + vshare * len(vcons)
        K1 = 2 * Sc
        K1 += (1 + eps0) * hL**2 / wA if hL > 0 else 0.0
        K1 += L**2 / eps["f"] if "f" in eps else 0.0
        K1 += Sb**2 / eps["b"] if "b" in eps else 0.0
        if "g" in eps:
            K1 += 2 * L + L**2 / eps["g"] + L**2 / vshare
        K1 += Sv**2 / vshare if Sv > 0 else 0.0
        alpha_A = alpha_rem
        cand = (K1, -alpha_A, dict(rho1=rho1, rho1_prime=rho1p, wA=wA, wB=wB, wC=wC, tau=tau, eps=eps, vshare=vshare))
        if best is None or cand[:2] < best[:2]:
            best = cand + (delta_A, alpha_A)
    if best is None:
        raise ConfigurationError("could not certify a |v|^2 coefficient below 1 from the ellipticity gap")
    K1, _, split, delta_A, alpha_A = best
    delta_A = max(delta_A, 1e-6)
    eta = split["eps"].get("eta", 0.0)
    K3 = K1 + (1.0 if g0 > 0 else 0.0) + alpha_A
    KF = 4 * max((Sa + kappa / 2) ** 2 + (Sb + (L if has_g else 0)) ** 2, (L**2 if has_f else 0) + (Sc + (L if has_g else 0)) ** 2, (Ss + math.sqrt(beta)) ** 2 + (Sv + (L if has_g else 0)) ** 2)
    KJ = 4 * max(hL**2, hA, hD, 1.0) if has_h else 0.0
    K5 = max(math.sqrt((Ss + math.sqrt(beta)) ** 2 + (Sv + (L if has_g else 0)) ** 2), math.sqrt(hL**2 + hA))
    K = max(K3, KF, KJ, K5, K1)
    c3 = (1.0, 1.0 / eta if eta > 0 else 0.0, (1 + 1 / eps0) if eps0 > 0 else 0.0)

    def varsigma(t, _m=model, _b=basis):
        f0t, g0t, h0t = _zero_parts(_m, _b, t)
        s3 = c3[0] * g0t + c3[1] * f0t + c3[2] * h0t
        sF = 4 * (f0t + g0t)
        return np.maximum(np.maximum(s3, sF), h0t)

    consts = StructuralConstants(K=K, K1=K1, delta=min(delta_A, 1 - 1e-9), alpha=alpha_A, alpha1=4 * hA, beta=0.0, q=2.0, p=2.0)
    split.update(
        sup_a=Sa, sup_sigma=Ss, sup_b=Sb, sup_c=Sc, sup_varsigma=Sv, f0=f0, g0=g0, h0=h0,
        a6_applicable=bool(has_h and not model.h_uses_z and h0 == 0) or not has_h,
    )
    return consts, varsigma, split


def _terminal_field(model_or_profile, basis: SineBasis, terminal_w: float, n: int, dW: int):
    coords = project(model_or_profile, basis)
    if terminal_w == 0.0:
        return coords

    def G(lattice: ScenarioLattice):
        W = lattice.W(lattice.N)
        scale = W.map(lambda w: 1.0 + terminal_w * w[..., :1])
        return scale * coords

    return G


def assemble_bdspde(model: GalerkinModel, constants: StructuralConstants | None = None) -> CoefficientSystem:
    """Finite-dimensional system ``(F^n, J^n, G^n, varsigma)`` of the weak form.

    ``F^n(t,u,v)_j = int [-(a U' + sigma.V + f) e_j' + (b U' + c U + varsigma_coef.V + g) e_j]``
    and ``J^n(t,u,v)_{j,r} = int h^r e_j``, with ``U = sum u_k e_k`` and
    ``V^r = sum v_{k r} e_k``.
    """
    basis = model.basis
    varsigma = None
    if constants is None:
        constants, varsigma, _ = derive_constants(model, basis)
    x = basis.nodes
    E = basis.E

    def fields(u, v):
        U = basis.values(u)
        Uy = basis.derivatives(u)
        V = np.einsum("...kr,qk->...qr", v, E)
        return U, Uy, V

    def F(t, u, v):
        U, Uy, V = fields(u, v)
        flux = model.a(t, x) * Uy + _dot_noise(model.sigma(t, x), V)
        react = model.b(t, x) * Uy + model.c(t, x) * U + _dot_noise(model.varsigma_coef(t, x), V)
        if model.f is not None:
            flux = flux + model.f(t, x, U, Uy, V)
        if model.g is not None:
            react = react + model.g(t, x, U, Uy, V)
        return basis.test(react) - basis.test_derivative(flux)

    D, w = basis.D, basis.weights

    def nodal_partials(fn, t, U, Uy, V):
        """Central differences of a pointwise nonlinearity in its value and slope arguments."""
        if fn is None:
            return 0.0, 0.0
        hU = 1e-6 * (1.0 + np.abs(U))
        hY = 1e-6 * (1.0 + np.abs(Uy))
        dth = (fn(t, x, U + hU, Uy, V) - fn(t, x, U - hU, Uy, V)) / (2 * hU)
        dy = (fn(t, x, U, Uy + hY, V) - fn(t, x, U, Uy - hY, V)) / (2 * hY)
        return dth, dy

    def F_jac(t, u, v):
        U, Uy, V = fields(u, v)
        f_th, f_y = nodal_partials(model.f, t, U, Uy, V)
        g_th, g_y = nodal_partials(model.g, t, U, Uy, V)
        shape = U.shape
        cu = np.broadcast_to(model.c(t, x) + g_th, shape) * w
        cy = np.broadcast_to(model.b(t, x) + g_y, shape) * w
        fu = np.broadcast_to(0.0 + f_th, shape) * w
        fy = np.broadcast_to(model.a(t, x) + f_y, shape) * w
        react = cu[..., None] * E + cy[..., None] * D
        flux = fu[..., None] * E + fy[..., None] * D
        return E.T @ react - D.T @ flux

    J = None
    if model.h is not None:

        def J(t, u, v):
            U, Uy, V = fields(u, v)
            hv = _h_values(model.h(t, x, U, Uy, V), U.shape, model.dB)
            return np.einsum("...qr,q,qj->...jr", hv, basis.weights, E)

    G = _terminal_field(model.terminal, basis, model.terminal_w, model.n, model.dW)
    return CoefficientSystem(
        n=model.n,
        F=F,
        J=J,
        G=G,
        dW=model.dW,
        dB=model.dB,
        varsigma=varsigma or (lambda t: np.zeros_like(np.asarray(t, dtype=float))),
        constants=constants,
        norms=basis.norms(),
        F_jac=F_jac,
        name=model.name,
    )


def _h_values(hv, shape: tuple, dB: int) -> np.ndarray:
    """Broadcast ``h`` output to ``shape + (dB,)``; a per-node scalar is copied to every component."""
    hv = np.asarray(hv, dtype=float)
    if hv.ndim == len(shape) + 1 and hv.shape[-1] == dB:
        return np.broadcast_to(hv, shape + (dB,))
    return np.broadcast_to(np.broadcast_to(hv, shape)[..., None], shape + (dB,))


def _dot_noise(coef, V):
    """``sum_r coef^r V^r`` with ``coef`` broadcast against ``V``'s trailing noise axis."""
    coef = np.asarray(coef, dtype=float)
    if coef.ndim and coef.shape[-1] != V.shape[-1]:
        coef = coef[..., None]
    return np.sum(coef * V, axis=-1)


# ---------------------------------------------------------------------------
# monotone drift examples


def _power_norm(basis: SineBasis, r: float):
    def v_norm(u):
        return basis.integrate(np.abs(basis.values(u)) ** r) ** (1.0 / r)

    return v_norm


def _dual_riesz(basis: SineBasis, rp: float):
    """``L^{r'}`` norm of the representative ``sum_j F_j e_j`` (surrogate for the dual norm)."""

    def dual(Fc):
        return basis.integrate(np.abs(basis.values(Fc)) ** rp) ** (1.0 / rp)

    return dual


def _noise_terms(n, delta1, delta2, L1):
    def add_v(t, u, v, base):
        return base + delta1 * v[..., 0] if delta1 else base

    J = None
    if delta2 or L1:

        def J(t, u, v):
            out = delta2 * v[..., :1] + L1 * u[..., None]
            return np.broadcast_to(out, np.broadcast_shapes(out.shape, u.shape + (1,)))

    return add_v, J


def _drift_constants(K, delta1, delta2, L1, alpha, q) -> StructuralConstants:
    """Constants for ``F = A(u) + delta1 v``, ``J = delta2 v + L1 u`` with a monotone ``A``.

    ``2 delta1 <dv, du> <= 4 delta1^2 |du|^2 + |dv|^2 / 4`` and
    ``|delta2 dv + L1 du|^2 <= 2 delta2^2 |dv|^2 + 2 L1^2 |du|^2``.
    """
    cross = 0.25 if delta1 else 0.0
    jv = 2 * delta2**2 if L1 else delta2**2
    delta = max(0.5, jv + cross)
    if delta >= 1:
        raise ConfigurationError(f"noise coupling too strong: |v|^2 coefficient {delta:g} >= 1")
    K1 = 4 * delta1**2 + (2 * L1**2 if L1 else 0.0)
    return StructuralConstants(K=max(K, abs(delta1), abs(L1), K1 + 1.0), K1=K1, delta=delta, alpha=alpha, q=q, p=2.0)


def assemble_power_drift(
    r: float,
    basis: SineBasis,
    delta1: float = 0.0,
    delta2: float = 0.0,
    L1: float = 0.0,
    terminal: Callable = lambda x: np.sin(np.pi * x),
    terminal_w: float = 0.0,
    K: float = 4.0,
) -> CoefficientSystem:
    """``F(u) = P_n(-U |U|^{r-2}) + delta1 v`` with ``J = delta2 v + L1 u``.

    The V-norm is ``(int |U|^r)^{1/r}`` and the dual norm the ``L^{r'}`` norm
    of the Riesz representative.
    """
    if r < 2:
        raise ConfigurationError("power drift needs r >= 2")
    add_v, J = _noise_terms(basis.n, delta1, delta2, L1)
    E, w = basis.E, basis.weights

    def F(t, u, v):
        U = basis.values(u)
        return add_v(t, u, v, basis.test(-U * np.abs(U) ** (r - 2)))

    def jac(t, u, v):
        U = basis.values(u)
        d = -(r - 1) * np.abs(U) ** (r - 2) * w
        return np.einsum("qj,...q,qk->...jk", E, d, E)

    rp = r / (r - 1)
    norms = NormProvider(h=euclidean, v=_power_norm(basis, r), dual=_dual_riesz(basis, rp), embed=1.0, embed_dual=1.0)
    consts = _drift_constants(K, delta1, delta2, L1, alpha=1.0, q=float(r))
    return CoefficientSystem(
        n=basis.n,
        F=F,
        J=J,
        G=_terminal_field(terminal, basis, terminal_w, basis.n, 1),
        constants=consts,
        norms=norms,
        F_jac=jac if not delta1 else None,
        name=f"power_drift(r={r:g})",
    )


def assemble_p_laplacian(
    r: float,
    basis: SineBasis,
    delta1: float = 0.0,
    delta2: float = 0.0,
    L1: float = 0.0,
    terminal: Callable = lambda x: np.sin(np.pi * x),
    terminal_w: float = 0.0,
    K: float | None = None,
) -> CoefficientSystem:
    """Weak p-Laplacian ``F(u)_j = -int |U'|^{r-2} U' e_j'`` plus the optional noise terms.

    The V-norm is ``(int |U|^r + |U'|^r)^{1/r}``; the dual norm uses the
    diagonal ``H^{-1}`` weights as an equivalent-norm surrogate.
    """
    if r < 2:
        raise ConfigurationError("p-Laplacian needs r >= 2")
    add_v, J = _noise_terms(basis.n, delta1, delta2, L1)
    D, w = basis.D, basis.weights

    def F(t, u, v):
        Uy = basis.derivatives(u)
        return add_v(t, u, v, -basis.test_derivative(np.abs(Uy) ** (r - 2) * Uy))

    def jac(t, u, v):
        Uy = basis.derivatives(u)
        d = -(r - 1) * np.abs(Uy) ** (r - 2) * w
        return np.einsum("qj,...q,qk->...jk", D, d, D)

    def v_norm(u):
        return basis.integrate(np.abs(basis.values(u)) ** r + np.abs(basis.derivatives(u)) ** r) ** (1.0 / r)

    base = basis.norms()
    norms = NormProvider(h=euclidean, v=v_norm, dual=base.dual, embed=1.0, embed_dual=1.0)
    if K is None:
        K = 4.0 * float(basis.freqs[-1]) ** 2
    consts = _drift_constants(K, delta1, delta2, L1, alpha=0.5, q=float(r))
    return CoefficientSystem(
        n=basis.n,
        F=F,
        J=J,
        G=_terminal_field(terminal, basis, terminal_w, basis.n, 1),
        constants=consts,
        norms=norms,
        F_jac=jac if not delta1 else None,
        name=f"p_laplacian(r={r:g})",
    )


# ---------------------------------------------------------------------------
# refinement


def refine_study(
    model: GalerkinModel | Callable[[int], CoefficientSystem],
    n_list: Sequence[int],
    lattice: ScenarioLattice,
    cfg: SolverConfig | None = None,
) -> list[dict]:
    """``E|u^n_0 - u^{2n}_0|^2`` for each ``n`` (coordinates zero-padded).

    ``model`` is a :class:`GalerkinModel` (re-assembled for every size) or a
    factory ``n -> CoefficientSystem``.
    """
    build = (lambda n: assemble_bdspde(model.with_n(n))) if isinstance(model, GalerkinModel) else model
    sizes = sorted(set(int(n) for n in n_list) | {2 * int(n) for n in n_list})
    roots = {}
    for n in sizes:
        sol = solve(build(n), lattice, cfg)
        roots[n] = sol.u[0]
    rows = []
    for n in n_list:
        coarse, fine = roots[n], roots[2 * n]
        diff = fine.map(lambda v: v) - coarse.map(lambda v: pad(v, 2 * n))
        sq = diff.values**2
        rows.append({"n": int(n), "n_fine": 2 * int(n), "difference": float(np.mean(np.sum(sq, axis=-1)))})
    return rows
