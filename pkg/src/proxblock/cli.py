"""Batch front end: ``proxblock <command> [--config PATH] [--set key=value]``.

Commands
--------
gen-scene   draw a synthetic scene and write D, A_true, S_true
unmix       factorize a data matrix with block-SDMM
solve-admm  minimize 1/2||x - v||^2 + g(L x) with linearized ADMM
solve-sdmm  same with several constraints and linearized SDMM
check       recompute residuals of a finished run from its saved state

Exit codes: 0 feasible (or check passed), 1 check failed, 2 max_iter
reached, 3 divergence, 4 input error.
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import operators as ops
from . import prox
from .io import MatrixFormatError, atomic_write_text, load_matrix, parse_config, save_matrix
from .nmf import UnmixingConfig, unmix, unmixing_constraints
from .scene import PRNG, SceneSpec, gen_scene
from .solvers import (ConstraintSpec, SolverError, StopCriteria, admm_solve,
                      compute_residuals, export_trace_csv, sdmm_solve)

logger = logging.getLogger("proxblock")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_MAX_ITER, EXIT_DIVERGED, EXIT_INPUT = 0, 1, 2, 3, 4
COMMANDS = ("solve-admm", "solve-sdmm", "unmix", "gen-scene", "check")


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s):
    s = str(s).strip()
    return [int(t) for t in s.split(",") if t.strip()] if s else []


def _floats(s):
    s = str(s).strip()
    return [float(t) for t in s.split(";") if t.strip()] if s else []


def _seed(s):
    v = int(s)
    if not 0 <= v < 2 ** 64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    return v


# key -> (parser, default); None default means "unset"
KEYS = {
    "out": (str, "."),
    "data": (str, None),
    "run": (str, None),
    "format": (str, "bin"),
    "seed": (_seed, 0),
    "eps_abs": (float, 0.0),
    "eps_rel": (float, 0.01),
    "max_iter": (int, 1000),
    "x_rel": (float, 1e-4),
    # unmixing
    "K": (int, None),
    "lambda_tv": (float, 0.0),
    "background": (_bool, False),
    "beta": (float, None),
    "reference_pixels": (_ints, None),
    "height": (int, None),
    "width": (int, None),
    "step_slack": (float, 0.9),
    # scene
    "B": (int, 16),
    "H": (int, 16),
    "W": (int, 16),
    "K_true": (int, 3),
    "noise_sigma": (float, 0.0),
    "amplitude": (float, 1.0),
    "background_level": (float, 0.0),
    "cell": (int, 4),
    # admm / sdmm
    "v": (str, None),
    "operators": (str, "identity"),
    "constraints": (str, "nonneg"),
    "mu": (float, 1.0),
    "rho": (_floats, None),
}


@dataclass
class RunConfig:
    command: str
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        v = self.values.get(key)
        return default if v is None else v

    @classmethod
    def from_sources(cls, command, config_text=None, overrides=()):
        if command not in COMMANDS:
            raise ValueError(f"unknown command {command!r}")
        raw = parse_config(config_text) if config_text else {}
        for item in overrides:
            if "=" not in item:
                raise ValueError(f"--set expects key=value, got {item!r}")
            k, v = item.split("=", 1)
            raw[k.strip()] = v.strip()
        unknown = sorted(set(raw) - set(KEYS))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        values = {}
        for key, (parse, default) in KEYS.items():
            if key in raw:
                try:
                    values[key] = parse(raw[key])
                except ValueError as exc:
                    raise ValueError(f"bad value for {key}: {exc}") from None
            else:
                values[key] = default
        return cls(command, values)

    def criteria(self):
        return StopCriteria(eps_abs=self["eps_abs"], eps_rel=self["eps_rel"],
                            max_iter=self["max_iter"], x_rel=self["x_rel"])

    def unmixing(self):
        shape = None
        if self["height"] is not None or self["width"] is not None:
            if self["height"] is None or self["width"] is None:
                raise ValueError("set both height and width")
            shape = (self["height"], self["width"])
        K = self["K"]
        if K is None:
            raise ValueError("unmix needs K")
        return UnmixingConfig(K=K, lambda_tv=self["lambda_tv"],
                              background=self["background"], beta=self["beta"],
                              reference_pixels=self["reference_pixels"],
                              image_shape=shape, seed=self["seed"],
                              step_slack=self["step_slack"])


def _manifest_path(out):
    return os.path.join(out, "manifest.json")


def _write_manifest(out, manifest):
    atomic_write_text(_manifest_path(out),
                      json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _base_manifest(config):
    return {"command": config.command, "config": config.values,
            "seed": config["seed"], "prng": PRNG,
            "numpy_version": np.__version__}


def _save_state(out, state, fmt):
    sdir = os.path.join(out, "state")
    os.makedirs(sdir, exist_ok=True)
    for j, x in enumerate(state.x):
        save_matrix(os.path.join(sdir, f"x_{j}.{fmt}"), x, fmt)
        for i in range(len(state.z[j])):
            save_matrix(os.path.join(sdir, f"z_{j}_{i}.{fmt}"), state.z[j][i], fmt)
            save_matrix(os.path.join(sdir, f"u_{j}_{i}.{fmt}"), state.u[j][i], fmt)
            zp = state.z_prev[j][i] if state.z_prev else state.z[j][i]
            save_matrix(os.path.join(sdir, f"zprev_{j}_{i}.{fmt}"), zp, fmt)


def _solver_summary(state):
    code = EXIT_OK if state.status == "feasible" else EXIT_MAX_ITER
    return {"status": state.status, "iterations": state.iter,
            "feasible": bool(state.feasible),
            "converged": bool(state.converged),
            "rho": [[float(r) for r in rs] for rs in state.rho],
            "mu": state.trace[-1].mu if state.trace else [],
            "beta": state.beta,
            "exit_code": code}, code


def run_gen_scene(config):
    c = config
    spec = SceneSpec(B=c["B"], H=c["H"], W=c["W"], K_true=c["K_true"],
                     noise_sigma=c["noise_sigma"], seed=c["seed"],
                     background=c["background_level"], cell=c["cell"],
                     amplitude=c["amplitude"])
    D, A, S = gen_scene(spec)
    out, fmt = c["out"], c["format"]
    os.makedirs(out, exist_ok=True)
    for name, M in (("D", D), ("A_true", A), ("S_true", S)):
        save_matrix(os.path.join(out, f"{name}.{fmt}"), M, fmt)
    manifest = _base_manifest(config)
    manifest["scene"] = {"B": spec.B, "H": spec.H, "W": spec.W,
                         "K_true": spec.K_true, "noise_sigma": spec.noise_sigma,
                         "background": spec.background, "cell": spec.cell,
                         "amplitude": spec.amplitude}
    _write_manifest(out, manifest)
    print(f"wrote scene {D.shape[0]}x{D.shape[1]} to {out}")
    return EXIT_OK


def run_unmix(config):
    """Factorize ``data`` and write A, S, trace.csv, state/ and manifest.json."""
    if config["data"] is None:
        raise ValueError("unmix needs data=PATH")
    D = load_matrix(config["data"])
    B, L = D.shape
    ucfg = config.unmixing()
    out, fmt = config["out"], config["format"]
    os.makedirs(out, exist_ok=True)
    manifest = _base_manifest(config)
    manifest["data_shape"] = [B, L]
    manifest["mu_policy"] = (f"h = {ucfg.step_slack} / (2 ||other factor||_s^2)"
                             ", fallback 1/(2 ||D||_s^2)")
    used_refs = (ucfg.reference_pixels is not None
                 and len(ucfg.reference_pixels) == ucfg.K - int(ucfg.background))
    manifest["init"] = "reference_pixels" if used_refs else "random(seed)"
    try:
        A, S, state = unmix(D, ucfg, config.criteria())
    except SolverError as exc:
        manifest.update(status="diverged", error=str(exc),
                        exit_code=EXIT_DIVERGED)
        _write_manifest(out, manifest)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_matrix(os.path.join(out, f"A.{fmt}"), A, fmt)
    save_matrix(os.path.join(out, f"S.{fmt}"), S, fmt)
    export_trace_csv(state, os.path.join(out, "trace.csv"))
    _save_state(out, state, fmt)
    summary, code = _solver_summary(state)
    manifest.update(summary)
    manifest["relative_error"] = float(np.linalg.norm(A @ S - D)
                                       / np.linalg.norm(D))
    _write_manifest(out, manifest)
    print(f"unmix: {state.status} after {state.iter} iterations, "
          f"relative error {manifest['relative_error']:.3e}")
    return code


def _parse_constraint(token):
    name, _, arg = token.strip().partition(":")
    if name == "nonneg":
        return prox.nonneg()
    if name == "l1":
        return prox.soft_threshold(float(arg or 1.0))
    if name == "ones":
        return prox.project_ones()
    if name == "zero":
        return prox.zero_penalty()
    raise ValueError(f"unknown constraint {token!r}")


def _quadratic_constraints(config, n):
    gs = [_parse_constraint(t) for t in config["constraints"].split(";")
          if t.strip()]
    op_tokens = [t.strip() for t in config["operators"].split(";") if t.strip()]
    if len(op_tokens) == 1 and len(gs) != 1:
        op_tokens = op_tokens * len(gs)
    if len(op_tokens) != len(gs):
        raise ValueError("need one operator per constraint")
    rhos = config["rho"] or [None] * len(gs)
    if len(rhos) != len(gs):
        raise ValueError("need one rho per constraint")
    cons = []
    for tok, g, rho in zip(op_tokens, gs, rhos):
        L = ops.identity(n) if tok == "identity" else ops.dense(load_matrix(tok))
        if L.in_dim != n:
            raise ValueError(f"operator {tok} has in_dim {L.in_dim}, x has {n}")
        cons.append(ConstraintSpec(L, g, rho))
    return cons


def run_quadratic(config):
    """``solve-admm`` / ``solve-sdmm`` on ``1/2 ||x - v||^2 + sum g_i(L_i x)``."""
    if config["v"] is None:
        raise ValueError(f"{config.command} needs v=PATH")
    v = load_matrix(config["v"]).ravel()
    cons = _quadratic_constraints(config, v.size)
    mu = config["mu"]

    def f_prox(w, step):
        return (w + step * v) / (1 + step)

    out, fmt = config["out"], config["format"]
    os.makedirs(out, exist_ok=True)
    manifest = _base_manifest(config)
    try:
        if config.command == "solve-admm":
            if len(cons) != 1:
                raise ValueError("solve-admm takes exactly one constraint")
            x, state = admm_solve(np.zeros_like(v), f_prox, mu, cons[0],
                                  config.criteria())
        else:
            x, state = sdmm_solve(np.zeros_like(v), f_prox, mu, cons,
                                  config.criteria(), beta=config["beta"])
    except SolverError as exc:
        manifest.update(status="diverged", error=str(exc),
                        exit_code=EXIT_DIVERGED)
        _write_manifest(out, manifest)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    save_matrix(os.path.join(out, f"x.{fmt}"), x, fmt)
    export_trace_csv(state, os.path.join(out, "trace.csv"))
    _save_state(out, state, fmt)
    summary, code = _solver_summary(state)
    manifest.update(summary)
    _write_manifest(out, manifest)
    print(f"{config.command}: {state.status} after {state.iter} iterations")
    return code


def _rebuild_constraints(manifest):
    cfg = RunConfig(manifest["command"], manifest["config"])
    if cfg.command == "unmix":
        B, L = manifest["data_shape"]
        cons_A, cons_S = unmixing_constraints(B, L, cfg.unmixing())
        return [cons_A, cons_S], cfg
    if cfg.command in ("solve-admm", "solve-sdmm"):
        v = load_matrix(cfg["v"]).ravel()
        return [_quadratic_constraints(cfg, v.size)], cfg
    raise ValueError(f"cannot audit a {cfg.command!r} run")


def check_run(run_dir):
    """Audit a finished run; returns ``(all_passed, report_lines, verdict)``.

    Every constraint is re-evaluated from the saved ``x``, ``z``, ``u`` and
    previous ``z``: both residual bounds must hold and, for projections, the
    saved ``z`` must lie in the constraint set.
    """
    with open(_manifest_path(run_dir), encoding="utf-8") as fh:
        manifest = json.load(fh)
    if "rho" not in manifest:
        raise ValueError(f"{run_dir}: run did not finish, nothing to check")
    constraints, cfg = _rebuild_constraints(manifest)
    fmt = cfg["format"]
    sdir = os.path.join(run_dir, "state")
    eps_abs, eps_rel = cfg["eps_abs"], cfg["eps_rel"]
    lines, ok_all = [], True
    for j, cons in enumerate(constraints):
        x = load_matrix(os.path.join(sdir, f"x_{j}.{fmt}")).ravel()
        if len(manifest["rho"][j]) != len(cons):
            raise ValueError(f"block {j}: manifest lists "
                             f"{len(manifest['rho'][j])} constraints, "
                             f"config implies {len(cons)}")
        for i, c in enumerate(cons):
            z, u, zp = (load_matrix(os.path.join(sdir, f"{p}_{j}_{i}.{fmt}")).ravel()
                        for p in ("z", "u", "zprev"))
            if z.size != c.L.out_dim or x.size != c.L.in_dim:
                raise ValueError(f"block {j} constraint {i}: state shapes do "
                                 "not match the operator")
            rho = manifest["rho"][j][i]
            res = compute_residuals(c.L, x, z, zp, u, rho, eps_abs, eps_rel)
            in_set = True
            if getattr(c.g, "indicator", False):
                in_set = bool(np.allclose(c.g(z, rho), z, rtol=0,
                                          atol=1e-9 * (1 + np.abs(z).max())))
            ok = res.primal_ok and res.dual_ok and in_set
            ok_all &= ok
            lines.append(
                f"block {j} constraint {i} ({c.descriptor}): "
                f"{'pass' if ok else 'FAIL'} r={res.r_norm:.3e}"
                f"/{res.eps_pri:.3e} s={res.s_norm:.3e}/{res.eps_dual:.3e}"
                f"{'' if in_set else ' z outside set'}")
    return ok_all, lines, manifest.get("feasible")


def run_check(config):
    run_dir = config["run"] or config["out"]
    ok, lines, verdict = check_run(run_dir)
    for line in lines:
        print(line)
    if not lines:
        print("no constraints: vacuous pass")
    agree = verdict is None or bool(verdict) == ok
    print(f"check: {'pass' if ok else 'FAIL'}; solver verdict "
          f"{'agrees' if agree else 'DISAGREES'}")
    return EXIT_OK if ok else EXIT_CHECK_FAILED


def build_parser():
    parser = argparse.ArgumentParser(
        prog="proxblock", description=__doc__.split("\n")[0],
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", metavar="PATH",
                        help="plain-text file of key=value lines")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        text = None
        if args.config:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        config = RunConfig.from_sources(args.command, text, args.overrides)
        if args.command == "gen-scene":
            return run_gen_scene(config)
        if args.command == "unmix":
            return run_unmix(config)
        if args.command == "check":
            return run_check(config)
        return run_quadratic(config)
    except (OSError, ValueError, IndexError, MatrixFormatError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
