"""Command-line interface.

Exit codes: 0 success, 1 monitor or check violations, 2 configuration
errors, 3 solver failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .closed_loop import InitialInfeasibleError, ScenarioError, preflight, run
from .io import OUT_DIR_ENV, ConfigError, default_out_dir, load_scenario, summarize, write_artifacts
from .ocp import build_ocp, check_nlp_derivatives, solve, verify_class_k_bounds, verify_lipschitz
from .se3_kinematics import jacobian_fd_error

EXIT_OK, EXIT_VIOLATION, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3

logger = logging.getLogger("coopmpc.cli")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError("", message)


def _with_duration(sc, duration):
    if duration is None:
        return sc
    try:
        return replace(sc, duration=duration)
    except ScenarioError as exc:
        raise ConfigError("--duration", str(exc)) from None


def _progress(every: int):
    def cb(i, n, res):
        if every and ((i + 1) % every == 0 or i + 1 == n):
            logger.info("step %d/%d  J*=%.6g  status=%s", i + 1, n, res.J, res.status)
    return cb


def violation_messages(summary: dict) -> list[str]:
    """Reasons for a nonzero simulate exit code, from a run summary.

    Value-function and decrement checks only count when the terminal
    ingredients were validated, since the guarantees they test rely on them.
    """
    out = []
    c = summary["constraints"]
    if c["sample_violations"] or c.get("sub_step_violations"):
        out.append(f"state constraints violated ({c['sample_violations']} samples, "
                   f"{c.get('sub_step_violations', 0)} sub-steps)")
    if summary["solver"]["fallbacks"]:
        out.append(f"{summary['solver']['fallbacks']} solver fallbacks")
    if not summary["convergence"]["bounded"]:
        out.append("trajectory not bounded")
    term = summary["terminal"]
    if term and term["validated"]:
        v = summary["value_function"]
        if v["monotone_violations"] or v["decrement_violations"]:
            out.append("value function did not decrease as required")
        sc = summary["shifted_candidates"]
        if sc["checked"] != sc["admissible"]:
            out.append(f"{sc['checked'] - sc['admissible']} shifted candidates not admissible")
    return out


def cmd_simulate(args) -> int:
    sc = _with_duration(load_scenario(args.scenario), args.duration)
    for w in preflight(sc):
        logger.warning("preflight: %s", w)
    try:
        log = run(sc, progress=_progress(args.progress_every), check_candidates=not args.no_candidates)
    except InitialInfeasibleError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    out = args.out if args.out is not None else default_out_dir()
    art = write_artifacts(log, out, sc, seed=args.seed, with_plots=not args.no_plots)
    summary = summarize(log, args.seed, scenario=sc)
    fe = summary["final_error"]
    print(f"{sc.name}: {len(log)} samples, final position error {fe['position']:.3e} m, "
          f"orientation error {fe['orientation']:.3e} rad")
    print(f"artifacts: {art.out_dir}")
    reasons = violation_messages(summary)
    for r in reasons:
        print(f"violation: {r}")
    return EXIT_VIOLATION if reasons else EXIT_OK


def cmd_solve_once(args) -> int:
    sc = load_scenario(args.scenario)
    cfg, model = sc.config, sc.model()
    x = sc.x0
    if args.at_time:
        steps = args.at_time / cfg.h
        if args.at_time < 0 or abs(steps - round(steps)) > 1e-9:
            raise ConfigError("--at-time", f"must be a nonnegative multiple of h = {cfg.h:g}")
        try:
            log = run(replace(sc, duration=args.at_time), check_candidates=False)
        except InitialInfeasibleError as exc:
            print(f"solver failure: {exc}", file=sys.stderr)
            return EXIT_SOLVER
        x = log.final_state
    bad = [n for n, v in zip(model.names, model.residuals(x[None])[0]) if v < -1e-6]
    if bad:
        print(f"state at t = {args.at_time:g} violates {', '.join(bad)}", file=sys.stderr)
        return EXIT_SOLVER
    res = solve(build_ocp(x - sc.x_des, cfg, model=model, x_des=sc.x_des))
    np.set_printoptions(precision=6, suppress=True, linewidth=120)
    print(f"t = {args.at_time:g}  status {res.status}  J* = {res.J:.9g}  iterations {res.iterations}")
    print(f"KKT residual {res.kkt_residual:.3e}  defect {res.defect:.3e}  min residual {res.residual_min:.4g}")
    print(f"u(t) = {res.u[0]}")
    return EXIT_SOLVER if res.status == "infeasible" else EXIT_OK


def _random_joints(agent, rng, eps=0.05):
    q = np.empty(agent.n)
    q[: agent.n_base] = rng.uniform(-5.0, 5.0, agent.n_base)
    lims = agent.joint_limits or [(-np.pi / 2, np.pi / 2)] * agent.n_alpha
    for j, (lo, hi) in enumerate(lims):
        q[agent.n_base + j] = rng.uniform(lo + eps, hi - eps)
    return q


def cmd_check_gradients(args) -> int:
    sc = load_scenario(args.scenario)
    rng = np.random.default_rng(args.seed)
    ok = True
    for a in sc.system.agents:
        err = max(jacobian_fd_error(a, _random_joints(a, rng)) for _ in range(args.samples))
        passed = err <= args.tol
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  agent Jacobian [{a.name}]  {args.samples} points  "
              f"max rel. error {err:.3e}")
    prob = build_ocp(sc.x0 - sc.x_des, sc.config, sc.workspace, sc.system, sc.x_des, sc.model())
    for r in check_nlp_derivatives(prob, samples=args.samples, seed=args.seed, tol=args.tol):
        ok &= r.passed
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}  {r.samples} points  max rel. error {r.max_rel_error:.3e}")
    return EXIT_OK if ok else EXIT_VIOLATION


def cmd_verify_lemmas(args) -> int:
    sc = load_scenario(args.scenario)
    reps = [verify_class_k_bounds(sc.config, args.samples, args.seed),
            verify_lipschitz(sc.config, args.samples, args.seed)]
    for r in reps:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name}  {r.samples} samples  "
              f"max violation {r.max_violation:.3e}")
    return EXIT_OK if all(r.passed for r in reps) else EXIT_VIOLATION


def cmd_audit_workspace(args) -> int:
    sc = load_scenario(args.scenario)
    warnings = preflight(sc)
    for w in warnings:
        print(f"warning: {w}")
    bad = sc.check_initial_state()
    if not warnings:
        print(f"{sc.name}: no workspace issues found")
    return EXIT_VIOLATION if bad else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="coopmpc", description="Cooperative object transport by receding-horizon control.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more log output (repeatable)")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def scenario_cmd(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("scenario", help="bundled scenario name (scenario1, scenario2) or path to a YAML file")
        s.add_argument("--seed", type=int, default=0, help="random seed (recorded; runs are deterministic)")
        return s

    s = scenario_cmd("simulate", "run the closed loop and write artifacts")
    s.add_argument("--out", help=f"output directory (default ${OUT_DIR_ENV} or ./coopmpc-out)")
    s.add_argument("--duration", type=float, help="override the scenario duration [s]")
    s.add_argument("--no-plots", action="store_true", help="skip the SVG plots")
    s.add_argument("--no-candidates", action="store_true", help="skip the shifted-candidate admissibility checks")
    s.add_argument("--progress-every", type=int, default=50, metavar="N", help="log every N samples (0: never)")
    s.set_defaults(func=cmd_simulate)

    s = scenario_cmd("solve-once", "solve one optimal control problem")
    s.add_argument("--at-time", type=float, default=0.0, metavar="T",
                   help="simulate the closed loop up to T first")
    s.set_defaults(func=cmd_solve_once)

    s = scenario_cmd("check-gradients", "compare analytic derivatives with finite differences")
    s.add_argument("--samples", type=int, default=100)
    s.add_argument("--tol", type=float, default=1e-5)
    s.set_defaults(func=cmd_check_gradients)

    s = scenario_cmd("verify-lemmas", "sample the stage-cost bounds and the terminal-cost Lipschitz bound")
    s.add_argument("--samples", type=int, default=10_000)
    s.set_defaults(func=cmd_verify_lemmas)

    s = scenario_cmd("audit-workspace", "check obstacle gaps and start/goal states")
    s.set_defaults(func=cmd_audit_workspace)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
