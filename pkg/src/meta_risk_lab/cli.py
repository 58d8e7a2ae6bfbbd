"""Command-line front door: run, validate, oracle, sweep.

Exit codes are stable contracts:
  0  success
  1  oracle failure
  2  configuration/plan validation failure (message names the invariant)
  3  runtime divergence of a simulation
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._parallel import JOBS_ENV_VAR
from .maml_sgd import ConfigError, DivergedRunError, derive_rng, draw_task_batch, inner_adapt, meta_gradient
from .meta_model import c_rate, estimate_meta_covariance_mc, meta_covariance
from .risk import bayes_error, excess_risk_closed, excess_risk_mc, test_loss_mc
from .spectra import ParameterDomainError
from .experiments import (
    SCHEMA_VERSION,
    ExperimentPlan,
    resolve_base_config,
    resolve_config,
    run_plan,
)

EXIT_OK = 0
EXIT_ORACLE = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _apply_overrides(plan_dict: dict, overrides) -> dict:
    """key=value pairs; dotted keys reach into nested objects, JSON values."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value (got {item!r})")
        key, _, value = item.partition("=")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = plan_dict
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = parsed
    return plan_dict


def _load_plan_with_overrides(path, overrides, seed=None) -> ExperimentPlan:
    with open(path) as fh:
        raw = json.load(fh)
    if "resolved_plan" in raw:
        raw = raw["resolved_plan"]
    _apply_overrides(raw, overrides)
    if seed is not None:
        raw["seed"] = seed
    return ExperimentPlan.from_dict(raw)


def _write_error_manifest(out_dir, exc, plan=None) -> None:
    """Best-effort record of a failed run so the output directory is self-describing."""
    try:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        payload = {"error": str(exc), "error_type": type(exc).__name__}
        if plan is not None:
            payload["resolved_plan"] = plan.to_dict()
        with open(out / "manifest.json", "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
    except OSError:
        pass


def cmd_run(args) -> int:
    plan = None
    try:
        plan = _load_plan_with_overrides(args.plan, args.override, args.seed)
        if args.reps is not None:
            plan = ExperimentPlan.from_dict(dict(plan.to_dict(), replications=args.reps))
        manifest = run_plan(plan, args.out, jobs=args.jobs, allow_unstable=args.allow_unstable)
    except (ConfigError, ParameterDomainError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: invalid plan/config: {exc}", file=sys.stderr)
        _write_error_manifest(args.out, exc, plan)
        return EXIT_CONFIG
    except DivergedRunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        _write_error_manifest(args.out, exc, plan)
        return EXIT_DIVERGED
    print(f"wrote {args.out}/manifest.json ({manifest['kind']}, {manifest['wall_clock_s']}s)")
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        plan = _load_plan_with_overrides(args.plan, args.override, args.seed)
        config = resolve_base_config(plan)
        checks = []
        lam1 = config.data_spectrum.lambda_1
        checks.append(("|beta_tr| < 1/lambda_1", abs(config.beta_tr) < 1.0 / lam1))
        checks.append(("|beta_te| < 1/lambda_1", abs(config.beta_te) < 1.0 / lam1))
        threshold = config.stability_threshold()
        checks.append(("alpha < 1/(c(beta_tr, Sigma) tr(Sigma))", config.alpha < threshold))
        mu_min = float(meta_covariance(config.data_spectrum, config.n1, config.beta_tr).mu.min())
        checks.append(("mu_i(H_train) > 0", mu_min > 0))
        report = {
            "plan_kind": plan.kind,
            "resolved_config": config.to_dict(),
            "derived": {
                "trace_sigma": config.data_spectrum.trace,
                "trace_sigma_sq": config.data_spectrum.trace_sq,
                "lambda_1": lam1,
                "c_beta_tr": c_rate(config.data_spectrum, config.beta_tr),
                "alpha": config.alpha,
                "stability_threshold": threshold,
                "mu_min_train": mu_min,
                "fingerprint": config.fingerprint(),
            },
            "checks": {name: bool(ok) for name, ok in checks},
        }
        print(json.dumps(report, indent=2, sort_keys=True))
        # Hard invariants already raised; the step-size check is advisory
        # here (run enforces it for bound-evaluating kinds).
    except (ConfigError, ParameterDomainError, FileNotFoundError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def _oracle_meta_covariance(config, seed) -> dict:
    est = estimate_meta_covariance_mc(
        config.data_spectrum, config.n1, config.beta_tr, reps=20000, rng_seed=seed
    )
    closed = meta_covariance(config.data_spectrum, config.n1, config.beta_tr)
    if config.beta_tr == 0.0:
        worst = float(np.max(np.abs(est.mu - closed.mu)))
        return {"name": "meta_covariance_mc", "passed": worst == 0.0, "worst_z": 0.0, "exact_diff": worst}
    z = np.abs(est.mu - closed.mu) / np.maximum(est.stderr, 1e-300)
    frac = float(np.mean(z <= 3.0))
    return {"name": "meta_covariance_mc", "passed": frac >= 0.95, "worst_z": float(z.max()), "frac_within_3se": frac}


def _oracle_gradient(config, seed) -> dict:
    rng = derive_rng(seed, 11)
    worst = 0.0
    for _ in range(20):
        task = draw_task_batch(config, rng)
        omega = rng.standard_normal(config.d)
        grad = meta_gradient(omega, config.beta_tr, task)

        def loss(w):
            a = inner_adapt(w, config.beta_tr, task.x_in, task.y_in)
            r = task.x_out @ a - task.y_out
            return 0.5 * float(r @ r) / task.x_out.shape[0]

        h = 1e-5
        fd = np.zeros(config.d)
        for i in range(config.d):
            e = np.zeros(config.d)
            e[i] = h
            fd[i] = (loss(omega + e) - loss(omega - e)) / (2 * h)
        rel = float(np.max(np.abs(grad - fd)) / max(np.max(np.abs(grad)), 1e-12))
        worst = max(worst, rel)
    return {"name": "gradient_fd", "passed": worst < 1e-5, "max_rel_err": worst}


def _oracle_risk(config, seed) -> dict:
    rng = derive_rng(seed, 12)
    omega = config.theta_star + 0.5 * rng.standard_normal(config.d)
    closed = excess_risk_closed(
        omega, config.theta_star, config.data_spectrum, config.m, config.beta_te
    )
    est, se = excess_risk_mc(omega, config, 20000, rng)
    z = abs(est - closed) / max(se, 1e-300)
    bayes_closed = bayes_error(
        config.task_spectrum, config.data_spectrum, config.m, config.beta_te, config.noise_sigma
    )
    loss_star, se_star = test_loss_mc(config.theta_star, config, 20000, rng)
    z_bayes = abs(loss_star - bayes_closed) / max(se_star, 1e-300)
    return {
        "name": "risk_mc",
        "passed": bool(z <= 3.0 and z_bayes <= 3.0),
        "excess_z": float(z),
        "bayes_z": float(z_bayes),
    }


def cmd_oracle(args) -> int:
    try:
        if args.plan:
            plan = _load_plan_with_overrides(args.plan, args.override, args.seed)
            config = resolve_config(plan.config, plan.seed)
            seed = plan.seed
        else:
            seed = args.seed if args.seed is not None else 0
            config = resolve_config(
                {
                    "d": 8,
                    "T": 50,
                    "n1": 20,
                    "n2": 8,
                    "m": 20,
                    "beta_tr": 0.2,
                    "beta_te": 0.1,
                    "noise_sigma": 0.5,
                    "data_spectrum": {"kind": "poly", "q": 2},
                    "task_spectrum": {"kind": "isotropic", "eta_sq": 0.05},
                    "theta_star": {"kind": "unit_random"},
                },
                seed,
            )
        if config.d > 12:
            print("note: finite-difference oracle is O(d^2); prefer small d", file=sys.stderr)
    except (ConfigError, ParameterDomainError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    results = [
        _oracle_meta_covariance(config, seed),
        _oracle_gradient(config, seed),
        _oracle_risk(config, seed),
    ]
    ok = True
    for res in results:
        status = "PASS" if res["passed"] else "FAIL"
        detail = {k: v for k, v in res.items() if k not in ("name", "passed")}
        print(f"[{status}] {res['name']}: {json.dumps(detail, sort_keys=True)}")
        ok &= res["passed"]
    return EXIT_OK if ok else EXIT_ORACLE


def cmd_sweep(args) -> int:
    """Shorthand for an lr_tradeoff plan over a normalized beta_tr grid."""
    lo, hi, num = args.grid
    plan_dict = {
        "schema": SCHEMA_VERSION,
        "kind": "lr_tradeoff",
        "seed": args.seed if args.seed is not None else 0,
        "replications": args.reps if args.reps is not None else 20,
        "config": {
            "d": args.d,
            "T": args.T,
            "n1": args.n1,
            "n2": args.n2,
            "m": args.m,
            "alpha": {"fraction": args.alpha_fraction, "at_beta_tr": 0.0},
            "beta_te": args.beta_te,
            "noise_sigma": args.sigma,
            "data_spectrum": json.loads(args.spectrum),
            "task_spectrum": json.loads(args.task),
            "theta_star": {"kind": "spectral"},
            "omega0": {"kind": "zeros"},
        },
        "sweep": {
            "beta_tr_grid": list(np.linspace(lo, hi, int(num))),
            "normalized": True,
        },
    }
    _apply_overrides(plan_dict, args.override)
    try:
        plan = ExperimentPlan.from_dict(plan_dict)
        run_plan(plan, args.out, jobs=args.jobs, allow_unstable=args.allow_unstable)
    except (ConfigError, ParameterDomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedRunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"wrote {args.out}/manifest.json")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meta-risk-lab",
        description="Excess-risk laboratory for one-step meta-learned linear regression.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the plan seed")
    common.add_argument(
        "--jobs",
        type=int,
        default=None,
        help=f"worker processes (default: ${JOBS_ENV_VAR} or 1)",
    )
    common.add_argument(
        "--override",
        action="append",
        metavar="KEY=VALUE",
        help="override a plan field before validation (dotted keys, JSON values)",
    )
    common.add_argument(
        "--allow-unstable",
        action="store_true",
        help="run simulations even when the bound step-size condition fails",
    )
    common.add_argument("--reps", type=int, default=None, help="override replication count")

    p_run = sub.add_parser("run", parents=[common], help="execute an experiment plan")
    p_run.add_argument("plan", help="plan JSON (or a manifest.json to re-run)")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.set_defaults(func=cmd_run)

    p_val = sub.add_parser("validate", parents=[common], help="resolve and check a plan without running")
    p_val.add_argument("plan")
    p_val.set_defaults(func=cmd_validate)

    p_orc = sub.add_parser("oracle", parents=[common], help="run the Monte-Carlo/finite-difference oracle suite")
    p_orc.add_argument("plan", nargs="?", default=None)
    p_orc.set_defaults(func=cmd_oracle)

    p_sw = sub.add_parser("sweep", parents=[common], help="beta_tr tradeoff sweep shorthand")
    p_sw.add_argument("--out", required=True)
    p_sw.add_argument("--d", type=int, default=200)
    p_sw.add_argument("--T", type=int, default=100)
    p_sw.add_argument("--n1", type=int, default=3)
    p_sw.add_argument("--n2", type=int, default=5)
    p_sw.add_argument("--m", type=int, default=40)
    p_sw.add_argument("--sigma", type=float, default=0.05)
    p_sw.add_argument("--beta-te", type=float, default=0.2)
    p_sw.add_argument("--alpha-fraction", type=float, default=0.3)
    p_sw.add_argument(
        "--spectrum",
        default='{"kind": "log_decay", "p": 2}',
        help="data spectrum JSON",
    )
    p_sw.add_argument(
        "--task",
        default='{"kind": "isotropic", "eta_sq_total": 0.64}',
        help="task spectrum JSON",
    )
    p_sw.add_argument(
        "--grid",
        nargs=3,
        type=float,
        metavar=("LO", "HI", "NUM"),
        default=[-0.9, 0.9, 15],
        help="normalized beta_tr grid (units of 1/lambda_1)",
    )
    p_sw.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
