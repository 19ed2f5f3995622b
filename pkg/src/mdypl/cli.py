"""Command-line interface: ``mdypl <subcommand> [options]``.

Subcommands: ``solve-se``, ``fit``, ``sloe``, ``infer``, ``simulate`` and
``contours``. Results go to ``--output`` (CSV, stdout when omitted); every run
with an output file also appends a metadata record to ``<output>.meta.jsonl``
holding the effective configuration, which ``--config`` accepts back.

Exit codes: 0 success, 2 bad configuration, 3 solver non-convergence,
4 fit failure, 5 I/O error. Failures print ``mdypl: error[<reason>]: ...`` on
standard error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import simulation as sim
from .estimator import FitDivergence, FitError, FitOptions, fit_mdypl, read_dataset, sloe
from .inference import Constants, NestingError, infer, oracle_constants
from .state_evolution import (
    SEInput,
    SolverError,
    SolverOptions,
    solve_from_upsilon,
    solve_intercept,
    solve_plain,
    solve_ridge,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_FIT = 4
EXIT_IO = 5


class ConfigError(ValueError):
    pass


class SolverFailure(RuntimeError):
    pass


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _solver_options(args) -> SolverOptions:
    return SolverOptions(tol=args.tol, quad_order=args.quad_order,
                         intercept_level=args.intercept_level,
                         intercept_predictor=args.intercept_predictor)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_solve_se(args):
    if (args.gamma is None) == (args.upsilon is None):
        raise ConfigError("give exactly one of --gamma and --upsilon")
    try:
        inp = SEInput(args.kappa, gamma=args.gamma, upsilon=args.upsilon, alpha=args.alpha,
                      theta0=args.theta0, iota=args.iota, lam=args.lam)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    opts = _solver_options(args)
    if args.lam is not None:
        sol = solve_ridge(inp, opts)
    elif args.theta0 is not None:
        sol = solve_intercept(inp, "iota", opts)
    elif args.iota is not None:
        sol = solve_intercept(inp, "theta0", opts)
    elif args.upsilon is not None:
        sol = solve_from_upsilon(inp, opts)
    else:
        sol = solve_plain(inp, opts)
    theta0 = args.theta0 if args.iota is None else sol.iota_or_theta0
    iota = args.iota if args.theta0 is None else sol.iota_or_theta0
    row = dict(kappa=args.kappa,
               gamma_or_upsilon=args.gamma if args.gamma is not None else args.upsilon,
               alpha=args.alpha, **{"lambda": args.lam}, theta0=theta0, mu=sol.mu, b=sol.b,
               sigma=sol.sigma, iota=iota, residual_norm=sol.residual_norm,
               jac_cond=sol.jacobian_condition, converged=sol.converged, gamma=sol.gamma)
    if not sol.converged:
        _emit([row], args)
        raise SolverFailure(f"state evolution did not converge (residual {sol.residual_norm:.3e})")
    return [row]


def _load(args):
    try:
        return read_dataset(args.data, intercept=args.intercept)
    except OSError:
        raise
    except ValueError as exc:
        raise ConfigError(f"invalid dataset {args.data}: {exc}") from exc


def _fit_options(args) -> FitOptions:
    return FitOptions(tol=args.fit_tol, maxiter=args.fit_maxiter, coef_cap=args.coef_cap)


def cmd_fit(args):
    data = _load(args)
    fit = fit_mdypl(data, args.alpha, _fit_options(args))
    rows = []
    if fit.theta_hat is not None:
        rows.append(dict(quantity="intercept", index="", value=fit.theta_hat))
    rows += [dict(quantity="coef", index=j, value=v) for j, v in enumerate(fit.beta_hat)]
    rows += [dict(quantity="eta", index=i, value=v) for i, v in enumerate(fit.eta_hat)]
    rows += [dict(quantity="hat", index=i, value=v) for i, v in enumerate(fit.hat_diag)]
    rows.append(dict(quantity="upsilon_hat", index="", value=sloe(fit, data)))
    rows.append(dict(quantity="loglik_pseudo", index="", value=fit.loglik_pseudo))
    rows.append(dict(quantity="iterations", index="", value=fit.iterations))
    return rows


def cmd_sloe(args):
    data = _load(args)
    fit = fit_mdypl(data, args.alpha, _fit_options(args))
    v = sloe(fit, data, squared=args.squared, variant=args.variant)
    return [dict(n=data.n, p=data.p, alpha=args.alpha, variant=args.variant,
                 squared=args.squared, upsilon_hat=v)]


def _parse_constants(text: str, data, alpha, args):
    if text == "estimate":
        return None
    kind, _, body = text.partition(":")
    if kind != "oracle" or not body:
        raise ConfigError("--constants must be 'estimate' or 'oracle:key=value,...'")
    try:
        kv = {k.strip(): float(v) for k, v in (t.split("=") for t in body.split(","))}
    except ValueError as exc:
        raise ConfigError(f"cannot parse constants {text!r}") from exc
    if {"mu", "b", "sigma"} <= kv.keys():
        return Constants(kv["mu"], kv["b"], kv["sigma"], kv.get("kappa", data.p / data.n),
                         gamma=kv.get("gamma"), source="oracle")
    if "gamma" in kv:
        kappa = kv.get("kappa", data.p / data.n)
        return oracle_constants(kappa, kv["gamma"], alpha, kv.get("theta0"),
                                _solver_options(args))
    raise ConfigError("oracle constants need mu, b, sigma or gamma (and optionally kappa, theta0)")


def cmd_infer(args):
    data = _load(args)
    constants = _parse_constants(args.constants, data, args.alpha, args)
    null_sets = [_ints(s) for s in (args.null_set or [])]
    beta_null = np.loadtxt(args.beta_null, ndmin=1) if args.beta_null else None
    rep = infer(data, args.alpha, constants, null_sets, beta_null, _fit_options(args),
                _solver_options(args))
    c = rep.constants
    common = dict(constants=c.source, mu=c.mu, b=c.b, sigma=c.sigma, kappa=c.kappa,
                  gamma_hat=c.gamma, upsilon_hat=c.upsilon, iota=c.iota, theta0=c.theta0)
    rows = [dict(row="coef", index=j, beta_hat=rep.fit.beta_hat[j],
                 rescaled=rep.rescaled_beta[j], z=rep.z[j], p_value=rep.p_values[j], **common)
            for j in range(data.p)]
    for t in rep.plr:
        rows.append(dict(row="plr", index=" ".join(map(str, t.index_set)), df=t.df,
                         lambda_raw=t.lambda_raw, lambda_rescaled=t.lambda_rescaled,
                         p_value=t.p_value, **common))
    return rows


PRESETS = {
    "desk": {"table1": 500, "qq-plr": 300, "table2": 500, "zstat": 300, "sloe": 100},
    "full": {"table1": 5000, "qq-plr": 1000, "table2": 5000, "zstat": 5000, "sloe": 100},
}


def cmd_simulate(args):
    reps = args.replicates or PRESETS[args.preset].get(args.experiment, 100)
    common = dict(replicates=reps, threads=args.threads)
    if args.seed is not None:
        common["seed"] = args.seed
    solver = _solver_options(args)
    if args.experiment == "table1":
        scen = args.scenarios.split(",") if args.scenarios else ["a", "b", "c"]
        return sim.run_table1(scen, n=args.n or 1000, solver=solver, **common)
    if args.experiment == "qq-plr":
        return sim.run_qq_plr(n=args.n or 2000, kappas=_floats(args.kappas or "0.1,0.5"),
                              alphas=_floats(args.alphas or f"{1 / 1.5},{1 / 2}"),
                              ks=_ints(args.ks or "5,50"), solver=solver, **common)
    if args.experiment == "table2":
        return sim.run_table2(kappas=_floats(args.kappas or "0.2,0.4,0.6,0.8"),
                              theta0s=_floats(args.theta0s or "0.5,1,1.5,2,2.5"),
                              n=args.n or 2000, solver=solver, **common)
    if args.experiment == "zstat":
        ns = _ints(args.ns) if args.ns else [400, 2000]
        return sim.run_zstat(ns=ns, kappas=_floats(args.kappas or "0.2,0.5"), solver=solver,
                             **common)
    if args.experiment == "sloe":
        return sim.run_sloe(n=args.n or 4000, **common)
    if args.experiment == "scenario":
        if not args.scenario_file:
            raise ConfigError("--experiment scenario needs --scenario-file")
        return _run_scenarios(args, solver)
    raise ConfigError(f"unknown experiment {args.experiment}")


def _run_scenarios(args, solver):
    from .inference import aggregate_metrics

    rows = []
    for spec in sim.load_scenarios(args.scenario_file):
        if args.replicates:
            spec = spec.with_(replicates=args.replicates)
        if args.seed is not None:
            spec = spec.with_(seed=args.seed)
        beta0, levels = sim.gen_signal(spec, return_levels=True)
        alpha = spec.alpha_value
        if spec.intercept:
            c = oracle_constants(spec.kappa_realised, spec.gamma, alpha, spec.theta0, solver)
        else:
            c = oracle_constants(spec.kappa_realised, spec.gamma, alpha, options=solver)

        def work(r, spec=spec, beta0=beta0, c=c, alpha=alpha):
            fit = fit_mdypl(sim.gen_dataset(spec, r, beta0), alpha, FitOptions(hat=False))
            m = aggregate_metrics(fit.beta_hat, beta0, c.mu, c.sigma, spec.kappa_realised,
                                  spec.gamma)
            return dict(bias=m.bias, amse=m.amse, variance=m.variance,
                        theta_hat=fit.theta_hat)

        for res in sim.run_replicates(work, spec.replicates, args.threads):
            rows.append(dict(scenario=spec.name, replicate=res.replicate, status=res.status,
                             reason=res.reason, mu_star=c.mu, sigma_star=c.sigma,
                             amse_theory=c.sigma ** 2 + (1 - c.mu) ** 2 * spec.gamma ** 2
                             / spec.kappa_realised, **res.values))
    return rows


def cmd_contours(args):
    if args.preset == "desk" and not (args.kappas or args.gammas):
        kappas = np.linspace(0.1, 0.8, 8)
        gammas = np.linspace(1.0, 15.0, 8)
    else:
        kappas = _floats(args.kappas or "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
        gammas = _floats(args.gammas or "1,2.5,5,7.5,10,12.5,15")
    families = args.families.split(",") if args.families else sim.CONTOUR_FAMILIES
    try:
        return sim.run_contours(kappas, gammas, families, _solver_options(args),
                                threads=args.threads)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


COMMANDS = {
    "solve-se": cmd_solve_se,
    "fit": cmd_fit,
    "sloe": cmd_sloe,
    "infer": cmd_infer,
    "simulate": cmd_simulate,
    "contours": cmd_contours,
}


# --------------------------------------------------------------------------
# parser and dispatch
# --------------------------------------------------------------------------


def _add_solver(p):
    g = p.add_argument_group("state-evolution solver")
    g.add_argument("--tol", type=float, default=1e-9)
    g.add_argument("--quad-order", type=int, default=50)
    g.add_argument("--intercept-level", choices=("plain", "printed"), default="plain",
                   help="level in the intercept system: (1+alpha)/2 or 1/(1+alpha)")
    g.add_argument("--intercept-predictor", choices=("true", "printed"), default="true",
                   help="Z1 = gamma Z + theta0 or mu gamma Z + theta0")


def _add_fit(p, data=True):
    if data:
        p.add_argument("--data", required=True, help="CSV with column y, or .npz with y and X")
        p.add_argument("--intercept", action="store_true")
    p.add_argument("--alpha", type=float, default=1.0)
    g = p.add_argument_group("fitting")
    g.add_argument("--fit-tol", type=float, default=1e-8)
    g.add_argument("--fit-maxiter", type=int, default=100)
    g.add_argument("--coef-cap", type=float, default=1e4)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdypl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {_version()}")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.subcommands = {}

    def add(name, help):
        p = sub.add_parser(name, help=help)
        parser.subcommands[name] = p
        p.add_argument("--config", help="JSON config or metadata (.meta.jsonl) to replay")
        p.add_argument("--output", "-o", help="output CSV (stdout if omitted)")
        return p

    p = add("solve-se", "solve a state-evolution system")
    p.add_argument("--kappa", type=float, required=True)
    p.add_argument("--gamma", type=float)
    p.add_argument("--upsilon", type=float)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--theta0", type=float, help="true intercept; solves for iota")
    p.add_argument("--iota", type=float, help="limiting intercept estimate; solves for theta0")
    p.add_argument("--lambda", dest="lam", type=float, help="ridge penalty (ridge system)")
    _add_solver(p)

    p = add("fit", "fit MDYPL and report coefficients, eta, hat values and upsilon_hat")
    _add_fit(p)

    p = add("sloe", "SLOE estimate of the corrupted signal strength")
    _add_fit(p)
    p.add_argument("--squared", action="store_true", help="report the variance itself")
    p.add_argument("--variant", choices=("loo", "printed"), default="loo")

    p = add("infer", "adjusted Z-statistics and rescaled PLR tests")
    _add_fit(p)
    p.add_argument("--constants", default="estimate",
                   help="'estimate' or 'oracle:mu=..,b=..,sigma=..' or 'oracle:gamma=..[,kappa=..]'")
    p.add_argument("--null-set", action="append",
                   help="comma-separated 0-based covariate indices; repeatable")
    p.add_argument("--beta-null", help="file with null values of beta (default zeros)")
    _add_solver(p)

    p = add("simulate", "run a simulation experiment")
    p.add_argument("--experiment", required=True,
                   choices=("table1", "qq-plr", "table2", "zstat", "sloe", "scenario"))
    p.add_argument("--preset", choices=tuple(PRESETS), default="desk")
    p.add_argument("--replicates", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--n", type=int)
    p.add_argument("--ns")
    p.add_argument("--kappas")
    p.add_argument("--alphas")
    p.add_argument("--ks")
    p.add_argument("--theta0s")
    p.add_argument("--scenarios", help="table1 scenario letters, e.g. a,c")
    p.add_argument("--scenario-file")
    _add_solver(p)

    p = add("contours", "state-evolution quantities over a (kappa, gamma) grid")
    p.add_argument("--kappas")
    p.add_argument("--gammas")
    p.add_argument("--families", help=",".join(sim.CONTOUR_FAMILIES))
    p.add_argument("--preset", choices=("desk", "full"), default="desk")
    p.add_argument("--threads", type=int, default=None)
    _add_solver(p)
    return parser


def _version():
    from . import __version__
    return __version__


def _load_config(path: str) -> dict:
    with open(path) as fh:
        text = fh.read()
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines:
        raise ConfigError(f"config {path} is empty")
    try:
        if path.endswith(".jsonl"):
            rec = json.loads(lines[-1])
        else:
            rec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    cfg = rec.get("config", rec)
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def _prescan(argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    return command, known.config


def parse_args(argv):
    parser = build_parser()
    command, config = _prescan(argv)
    if config and command:
        cfg = _load_config(config)
        if cfg.get("command", command) != command:
            raise ConfigError(f"config is for {cfg['command']!r}, not {command!r}")
        # flags on the command line win over the file, which wins over defaults
        sub = parser.subcommands[command]
        dests = {a.dest for a in sub._actions}
        unknown = set(cfg) - dests - {"command"}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        sub.set_defaults(**{k: v for k, v in cfg.items() if k != "command"})
        for a in sub._actions:
            if a.dest in cfg:
                a.required = False
    return parser.parse_args(argv)


def _emit(rows, args):
    if args.output:
        sim.write_csv(rows, args.output)
    else:
        sim.write_csv(rows, sys.stdout)


def _fail(reason: str, msg: str, code: int) -> int:
    print(f"mdypl: error[{reason}]: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        return _fail("bad_config", str(exc), EXIT_CONFIG)
    except SystemExit as exc:
        # argparse exits 0 for --help/--version and 2 on usage errors
        return EXIT_OK if not exc.code else EXIT_CONFIG
    except OSError as exc:
        return _fail("io_error", str(exc), EXIT_IO)
    config = {k: v for k, v in vars(args).items() if k not in ("config", "output")}
    t0 = time.time()
    try:
        rows = COMMANDS[args.command](args)
        _emit(rows, args)
    except ConfigError as exc:
        return _fail("bad_config", str(exc), EXIT_CONFIG)
    except SolverFailure as exc:
        return _fail("solver_nonconvergence", str(exc), EXIT_SOLVER)
    except SolverError as exc:
        return _fail("solver_nonconvergence", str(exc), EXIT_SOLVER)
    except FitDivergence as exc:
        return _fail("fit_divergence", str(exc), EXIT_FIT)
    except (FitError, NestingError) as exc:
        return _fail("fit_failure", str(exc), EXIT_FIT)
    except OSError as exc:
        return _fail("io_error", str(exc), EXIT_IO)
    if args.output:
        try:
            sim.write_metadata(args.output + ".meta.jsonl", config, time.time() - t0)
        except OSError as exc:
            return _fail("io_error", str(exc), EXIT_IO)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
