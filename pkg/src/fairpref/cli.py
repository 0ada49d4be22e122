"""Command-line interface.

Subcommands mirror the pipeline stages: ``world gen``, ``data sample``,
``fit``, ``policy solve``, ``complexity eval`` and ``sweep run``.  Exit
code 0 is returned only when every convergence flag involved is true.
"""

import argparse
import json
import os
import sys

import numpy as np

from .tabular_world import WorldConfig, build_world, world_from_json, world_to_json
from .preference_data import compute_covariances, dataset_from_csv, dataset_to_csv, sample_dataset, weighted_inv_norm
from .reward_estimation import (
    ConfidenceSpec, FitOpts, eta_sr, fit_maxmin, fit_sharedrep,
    params_from_json, params_to_json,
)
from .policy_engine import (
    MaxMinOpts, expected_features, policy_to_csv, selection_to_json,
    solve_maxmin_policy, worst_group_by_reward,
)
from .complexity_toolkit import (
    ComplexityInputs, gap_profile, n_maxmin, n_sr, psi_u,
)
from .policy_engine import gibbs_policy
from .tabular_world import reward_table
from .experiment_harness import default_scenario, emit, scenario_from_dict, sweep


def _common(parser):
    parser.add_argument("--config", help="JSON config path")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", required=True)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--tol", type=float, default=None)


def _load_world(path):
    with open(path) as fh:
        return world_from_json(fh.read())


def _load_dataset(path, world):
    with open(path) as fh:
        return dataset_from_csv(fh.read(), world)


def cmd_world_gen(args) -> int:
    if not args.config:
        raise SystemExit("world gen requires --config with the world fields")
    with open(args.config) as fh:
        doc = json.load(fh)
    if args.seed is not None:
        doc["rng_seed"] = args.seed
    doc["group_proportions"] = tuple(doc.get("group_proportions", ()))
    world = build_world(WorldConfig(**doc))
    with open(args.out, "w") as fh:
        fh.write(world_to_json(world))
    return 0


def cmd_data_sample(args) -> int:
    world = _load_world(args.world)
    props = None
    if args.proportions:
        props = [float(p) for p in args.proportions.split(",")]
    dataset = sample_dataset(
        world, args.n, proportions=props,
        prompt_sampling=args.prompt_sampling,
        response_pair_sampling=args.pair_sampling,
        seed=args.seed if args.seed is not None else 0,
    )
    with open(args.out, "w") as fh:
        fh.write(dataset_to_csv(dataset))
    return 0


def cmd_fit(args) -> int:
    world = _load_world(args.world)
    dataset = _load_dataset(args.data, world)
    opts = FitOpts(
        tol=args.tol if args.tol is not None else 1e-7,
        max_iters=args.max_iters, restarts=args.restarts, lr0=args.lr0,
        seed=args.seed if args.seed is not None else 0,
    )
    if args.method == "sharedrep":
        k = args.k if args.k is not None else world.config.shared_dim
        params, report = fit_sharedrep(dataset, k=k, b_max=world.config.b_max, opts=opts)
        text = params_to_json(sr=params, report=report)
    else:
        params, report = fit_maxmin(dataset, b_max=world.config.b_max, opts=opts)
        text = params_to_json(mm=params, report=report)
    with open(args.out, "w") as fh:
        fh.write(text)
    print(f"final_loss={report.final_loss:.6g} iterations={report.iterations} "
          f"grad_norm={report.grad_norm:.3g} converged={report.converged}")
    return 0 if report.converged else 1


def cmd_policy_solve(args) -> int:
    world = _load_world(args.world)
    dataset = _load_dataset(args.data, world)
    stats = compute_covariances(dataset, args.lam)
    cfg = world.config
    if args.method == "gold":
        theta = world.truth.theta_star
    else:
        if not args.params:
            raise SystemExit("--params is required unless --method gold")
        sr, mm = params_from_json(open(args.params).read())
        theta = sr.theta if args.method == "sharedrep" else mm.theta
    tables = np.stack([reward_table(theta[:, u], world.phi) for u in range(cfg.num_groups)])
    eta = 0.0
    if args.pessimism == "sr":
        spec = ConfidenceSpec.create(cfg.feature_dim, args.delta, args.lam, cfg.b_max, cfg.l_max)
        eta = eta_sr(spec, dataset.n)
    opts = MaxMinOpts(gap_tol=args.gap_tol, rounds=args.rounds)
    sol = solve_maxmin_policy(
        tables, world.truth.ref_policy, world.rho, args.beta, eta, stats,
        opts=opts, phi=world.phi,
    )
    with open(args.out, "w") as fh:
        fh.write(policy_to_csv(sol.policy))
    if args.selection_out:
        sel = worst_group_by_reward(sol.policy, tables, world.rho)
        with open(args.selection_out, "w") as fh:
            fh.write(selection_to_json(sel))
    print(f"duality_gap={sol.gap:.3g} converged={sol.converged}")
    return 0 if sol.converged else 1


def cmd_complexity_eval(args) -> int:
    world = _load_world(args.world)
    dataset = _load_dataset(args.data, world)
    stats = compute_covariances(dataset, args.lam)
    cfg = world.config
    spec = ConfidenceSpec.create(cfg.feature_dim, args.delta, args.lam, cfg.b_max, cfg.l_max)
    tables = np.stack([
        reward_table(world.truth.theta_star[:, u], world.phi) for u in range(cfg.num_groups)
    ])
    gibbs = [gibbs_policy(t, world.truth.ref_policy, args.beta) for t in tables]
    gap = gap_profile(gibbs, world.rho)
    psis = np.array([psi_u(world, stats, spec, args.beta, u) for u in range(cfg.num_groups)])
    inputs = ComplexityInputs.from_gap(
        cfg.num_responses, args.beta, spec, psis, gap,
        regime_override=args.regime_override,
    )
    gold = solve_maxmin_policy(tables, world.truth.ref_policy, world.rho, args.beta, 0.0, stats)
    pistar_norm = weighted_inv_norm(
        expected_features(gold.policy, world.phi, world.rho), stats.sigma, stats.lam,
    )
    n_mm = n_maxmin(inputs, gap, multiplier=args.constant_multiplier)
    n_total = n_sr(inputs, gap, pistar_norm, args.epsilon, multiplier=args.constant_multiplier)
    os.makedirs(args.out, exist_ok=True)
    doc = {
        "delta_u": gap.delta_u.tolist(),
        "delta_min": gap.delta_min,
        "u_star": gap.u_star,
        "regime": inputs.regime,
        "psi_u": psis.tolist(),
        "pistar_feature_norm": pistar_norm,
        "epsilon": args.epsilon,
        "constant_multiplier": args.constant_multiplier,
        "n_maxmin": n_mm,
        "n_sr": n_total,
    }
    with open(os.path.join(args.out, "complexity.json"), "w") as fh:
        json.dump(doc, fh, indent=2)
    print(f"delta_min={gap.delta_min:.6g} regime={inputs.regime} "
          f"n_maxmin={n_mm:.6g} n_sr={n_total:.6g}")
    return 0 if gold.converged else 1


def cmd_sweep_run(args) -> int:
    if args.config:
        with open(args.config) as fh:
            scenario = scenario_from_dict(json.load(fh))
    else:
        scenario = default_scenario(seed=args.seed if args.seed is not None else 0)
    if args.tol is not None:
        from dataclasses import replace

        scenario = replace(scenario, fit_tol=args.tol)
    results = sweep(scenario, jobs=args.jobs)
    emit(results, args.out, scenario, figures=not args.no_figures)
    bad = sum(1 for r in results if not r.converged)
    print(f"trials={len(results)} non_converged={bad} out={args.out}")
    return 0 if bad == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairpref")
    top = parser.add_subparsers(dest="command", required=True)

    world = top.add_parser("world", help="world construction").add_subparsers(
        dest="subcommand", required=True)
    gen = world.add_parser("gen", help="generate a world from a config JSON")
    _common(gen)
    gen.set_defaults(func=cmd_world_gen)

    data = top.add_parser("data", help="preference datasets").add_subparsers(
        dest="subcommand", required=True)
    samp = data.add_parser("sample", help="sample a preference dataset")
    _common(samp)
    samp.add_argument("--world", required=True)
    samp.add_argument("--n", type=int, required=True)
    samp.add_argument("--proportions", default=None, help="comma-separated group shares")
    samp.add_argument("--prompt-sampling", default="from_rho", choices=["from_rho", "uniform"])
    samp.add_argument("--pair-sampling", default="uniform_without_replacement",
                      choices=["uniform_without_replacement", "from_ref_policy"])
    samp.set_defaults(func=cmd_data_sample)

    fit = top.add_parser("fit", help="fit reward estimators")
    _common(fit)
    fit.add_argument("--world", required=True)
    fit.add_argument("--data", required=True)
    fit.add_argument("--method", required=True, choices=["sharedrep", "maxmin"])
    fit.add_argument("--k", type=int, default=None)
    fit.add_argument("--max-iters", type=int, default=20000)
    fit.add_argument("--restarts", type=int, default=5)
    fit.add_argument("--lr0", type=float, default=1.0)
    fit.set_defaults(func=cmd_fit)

    policy = top.add_parser("policy", help="policy construction").add_subparsers(
        dest="subcommand", required=True)
    solve = policy.add_parser("solve", help="solve the max-min policy")
    _common(solve)
    solve.add_argument("--world", required=True)
    solve.add_argument("--data", required=True)
    solve.add_argument("--params", default=None)
    solve.add_argument("--method", required=True, choices=["sharedrep", "maxmin", "gold"])
    solve.add_argument("--beta", type=float, default=1.0)
    solve.add_argument("--lam", type=float, default=0.01)
    solve.add_argument("--delta", type=float, default=0.1)
    solve.add_argument("--pessimism", default="none", choices=["none", "sr"])
    solve.add_argument("--gap-tol", type=float, default=None)
    solve.add_argument("--rounds", type=int, default=5000)
    solve.add_argument("--selection-out", default=None)
    solve.set_defaults(func=cmd_policy_solve)

    comp = top.add_parser("complexity", help="sample-complexity evaluation").add_subparsers(
        dest="subcommand", required=True)
    ceval = comp.add_parser("eval", help="evaluate gap profile and sample costs")
    _common(ceval)
    ceval.add_argument("--world", required=True)
    ceval.add_argument("--data", required=True)
    ceval.add_argument("--beta", type=float, default=1.0)
    ceval.add_argument("--lam", type=float, default=0.01)
    ceval.add_argument("--delta", type=float, default=0.1)
    ceval.add_argument("--epsilon", type=float, default=0.1)
    ceval.add_argument("--constant-multiplier", type=float, default=1.0)
    ceval.add_argument("--regime-override", default=None, choices=["large_gap", "small_gap"])
    ceval.set_defaults(func=cmd_complexity_eval)

    sw = top.add_parser("sweep", help="experiment sweeps").add_subparsers(
        dest="subcommand", required=True)
    run = sw.add_parser("run", help="run a full sweep and emit reports")
    _common(run)
    run.add_argument("--no-figures", action="store_true")
    run.set_defaults(func=cmd_sweep_run)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
