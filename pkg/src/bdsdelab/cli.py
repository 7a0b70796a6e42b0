"""Command-line runner: ``bdsdelab <command> --config PATH [--out DIR] [--seed S] [--threads K]``.

Exit codes: 0 success, 1 assertion or assumption violation, 2 configuration
error, 3 solver non-convergence.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .analysis import (
    InsufficientDataError,
    apriori_monitor,
    convergence_csv,
    convergence_study,
    energy_decay_study,
    energy_identity_residual,
    load_stability_fixture,
    stability_gap,
)
from .coefficients import CHECKERS, BallSampler, CoefficientEvaluationError, ConfigurationError, _jsonable, check_b2, remark_j_phi_margin
from .config import ExperimentConfig, load_config
from .lattice import LatticeSizeError, build_lattice
from .models import ModelSpec, build_model, parse_spec, terminal
from .resolvent import ResolventError
from .solver import PicardNonConvergence, contraction_diagnostics, solve

EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3


def _dump_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(_jsonable(obj), sort_keys=True, indent=2, ensure_ascii=False))
        fh.write("\n")


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _model(cfg: ExperimentConfig) -> ModelSpec:
    return build_model(cfg.model, cfg.params, dW=cfg.dW, dB=cfg.dB, T=cfg.T)


def _single_N(cfg: ExperimentConfig) -> int:
    if cfg.N is None:
        raise ConfigurationError("lattice.N: this command needs a single resolution N")
    return cfg.N


def _say(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# commands


def cmd_check(cfg: ExperimentConfig, out: str) -> int:
    spec = _model(cfg)
    names = cfg.assumptions
    if names is None:
        names = ["A1", "A2", "A3", "A4", "A5"] + (["A6"] if spec.a6 else []) + (["B2"] if spec.galerkin else [])
    sys_ = spec.system
    sampler = BallSampler(sys_.n, sys_.dW, sys_.dB, radius=cfg.radius, T=cfg.T)
    worst = EXIT_OK
    for name in names:
        if name == "B2":
            if spec.galerkin is None:
                raise ConfigurationError("run.assumptions: B2 applies to the bdspde and heat models only")
            g = spec.galerkin
            rep = check_b2(g.b2_coefs(), **g.b2_parameters(), trials=cfg.trials, seed=cfg.seed)
        elif name == "remark":
            rep = remark_j_phi_margin(sys_, sampler, trials=cfg.trials, seed=cfg.seed)
        else:
            trials = min(cfg.trials, 200) if name == "A1" else cfg.trials
            rep = CHECKERS[name](sys_, sampler, trials=trials, seed=cfg.seed)
        _write_text(os.path.join(out, f"check_{name}.json"), rep.to_json() + "\n")
        status = "VIOLATED" if rep.violated else "ok"
        _say(f"{name}: worst_margin={rep.worst_margin:.6g} {status}")
        if rep.violated:
            worst = EXIT_VIOLATION
            _say(f"  witness: {json.dumps(_jsonable(rep.witness), sort_keys=True)}")
    return worst


def _solver_failure(out: str, exc: Exception) -> int:
    info = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, PicardNonConvergence):
        info["deltas"] = list(exc.deltas)
        info.update(contraction_diagnostics(exc.deltas))
    if isinstance(exc, ResolventError):
        info["residual"] = exc.residual
        info["witness"] = exc.witness
    _dump_json(os.path.join(out, "diagnostics.json"), info)
    _say(f"solver failure: {exc}")
    return EXIT_SOLVER


def cmd_solve(cfg: ExperimentConfig, out: str) -> int:
    spec = _model(cfg)
    lat = build_lattice(cfg.T, _single_N(cfg), cfg.dW, cfg.dB)
    sol = solve(spec.system, lat, cfg.solver)
    _write_text(os.path.join(out, "u.csv"), sol.u_csv())
    _write_text(os.path.join(out, "v.csv"), sol.v_csv())
    diag = dict(sol.diagnostics)
    diag.setdefault("fitted_ratio", None)
    diag["u0_mean"] = np.asarray(sol.u[0].values.mean(axis=(0, 1))).tolist()
    _dump_json(os.path.join(out, "diagnostics.json"), diag)
    _say(f"solved N={lat.N}: {diag['picard_iterations']} Picard iterations, E[u_0] = {diag['u0_mean']}")
    return EXIT_OK


def _study_factory(cfg: ExperimentConfig):
    spec0 = _model(cfg)
    if spec0.oracle is None:
        raise ConfigurationError(f"model.name: {cfg.model!r} has no closed-form oracle for a convergence study")

    def factory(N):
        spec = _model(cfg)
        return spec.system, build_lattice(cfg.T, N, cfg.dW, cfg.dB), spec.oracle

    return factory


def cmd_converge(cfg: ExperimentConfig, out: str) -> int:
    Ns = cfg.resolutions()
    try:
        study = convergence_study(_study_factory(cfg), Ns, cfg.solver)
    except InsufficientDataError as exc:
        _say(f"insufficient data: {exc}")
        _dump_json(os.path.join(out, "convergence.json"), {"fitted_order": "insufficient-data", "N_list": Ns})
        return EXIT_VIOLATION
    _write_text(os.path.join(out, "convergence.csv"), convergence_csv(study))
    _dump_json(os.path.join(out, "convergence.json"), {"errors": {str(k): v for k, v in study["errors"].items()},
                                                        "fitted_order": study["fitted_order"]})
    _say(f"fitted order: {study['fitted_order']}")
    return EXIT_OK


def cmd_energy(cfg: ExperimentConfig, out: str) -> int:
    spec = _model(cfg)
    Ns = cfg.resolutions()
    lat = build_lattice(cfg.T, Ns[-1], cfg.dW, cfg.dB)
    sol = solve(spec.system, lat, cfg.solver)
    rep = energy_identity_residual(sol)
    if len(Ns) > 1:
        study = energy_decay_study(lambda N: (_model(cfg).system, build_lattice(cfg.T, N, cfg.dW, cfg.dB)), Ns, cfg.solver)
        rep.decay = study["rows"]
    payload = rep.to_dict()
    payload["apriori"] = apriori_monitor(sol)
    _dump_json(os.path.join(out, "energy.json"), payload)
    if rep.notice:
        _say(f"notice: {rep.notice}")
    _say(f"energy: max expectation residual {rep.max_residual:.3e}, exact balance {rep.exact_balance_max:.3e}, "
         f"mode {rep.mode}")
    return EXIT_OK if rep.passed else EXIT_VIOLATION


def _g_prime(cfg: ExperimentConfig, spec: ModelSpec):
    kind, args = parse_spec(cfg.G_prime)
    G = spec.system.G
    if kind == "scale":
        c = args[0] if args else 0.5
        if callable(G):
            return lambda lattice, _G=G, _c=c: _G(lattice) * _c
        return np.asarray(G, dtype=float) * c
    return terminal(cfg.G_prime, spec.system.n)


def cmd_stability(cfg: ExperimentConfig, out: str) -> int:
    spec = _model(cfg)
    C_fit = cfg.C_fit if cfg.C_fit is not None else load_stability_fixture()["C_fit"]
    Gp = _g_prime(cfg, spec)
    results = []
    for N in cfg.resolutions():
        lat = build_lattice(cfg.T, N, cfg.dW, cfg.dB)
        r = stability_gap(spec.system, lat, cfg.solver, spec.system.G, Gp, C_fit=C_fit)
        results.append(r)
        _say(f"N={N}: margin {r['margin']:.3e} (rhs {r['rhs']:.3e}, tol {r['tol']:.3e})")
    _dump_json(os.path.join(out, "stability.json"), {"C_fit": C_fit, "runs": results})
    return EXIT_OK if all(r["margin"] <= 0 for r in results) else EXIT_VIOLATION


def cmd_picard_diag(cfg: ExperimentConfig, out: str) -> int:
    spec = _model(cfg)
    lat = build_lattice(cfg.T, _single_N(cfg), cfg.dW, cfg.dB)
    try:
        sol = solve(spec.system, lat, cfg.solver)
    except PicardNonConvergence as exc:
        cd = contraction_diagnostics(exc.deltas)
        _dump_json(os.path.join(out, "picard.json"), dict(cd, deltas=list(exc.deltas), converged=False))
        _say(f"Picard loop did not converge: fitted ratio {cd['fitted_ratio']}")
        return EXIT_SOLVER
    cd = contraction_diagnostics(sol)
    _dump_json(os.path.join(out, "picard.json"), dict(cd, deltas=sol.diagnostics["deltas"], converged=True))
    _say(f"Picard: {len(sol.diagnostics['deltas'])} iterations, fitted ratio {cd['fitted_ratio']}")
    return EXIT_OK


COMMANDS = {
    "check": cmd_check,
    "solve": cmd_solve,
    "converge": cmd_converge,
    "energy": cmd_energy,
    "stability": cmd_stability,
    "picard-diag": cmd_picard_diag,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bdsdelab", description="Lattice solver and checks for backward doubly stochastic systems.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="YAML experiment config")
    p.add_argument("--out", default=None, help="output directory (default: run.out of the config)")
    p.add_argument("--seed", type=int, default=None, help="overrides run.seed")
    p.add_argument("--threads", type=int, default=0, help="BLAS thread cap (0 = library default)")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0 or args.seed >= 2**64:
                raise ConfigurationError("--seed must be an unsigned 64-bit integer")
            cfg.seed = args.seed
        if args.threads < 0:
            raise ConfigurationError("--threads must be >= 0")
        out = args.out or cfg.out
        os.makedirs(out, exist_ok=True)
        limits = threadpool_limits(limits=args.threads) if args.threads > 0 else contextlib.nullcontext()
        with limits:
            return COMMANDS[args.command](cfg, out)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PicardNonConvergence, ResolventError) as exc:
        return _solver_failure(out, exc)
    except CoefficientEvaluationError as exc:
        print(f"coefficient evaluation failed: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    except LatticeSizeError as exc:
        print(f"lattice too large: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
