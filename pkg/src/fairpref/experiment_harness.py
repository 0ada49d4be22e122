"""Seeded end-to-end experiments over (dataset size, minority share) grids.

A trial builds a world, samples preferences, fits the pooled and the
per-group estimators, solves the max-min policies for the fitted rewards
and for the true rewards (the gold skyline), and records per-group
suboptimality, values, parameter errors and confidence widths.  Sweeps
run the full grid x seed product and persist delimited results plus
plotting curves; reruns with the same config reproduce results.csv byte
for byte.
"""

from dataclasses import dataclass, replace, asdict
from multiprocessing import Pool
import csv
import io
import json
import math
import os
import time

import numpy as np

from . import __version__
from .rng import mix, stream
from .tabular_world import World, WorldConfig, build_world, reward_gap_xi, reward_table
from .preference_data import compute_covariances, sample_dataset, weighted_norm
from .reward_estimation import (
    ConfidenceSpec, FitOpts, eta_mm, eta_sr, fit_maxmin, fit_sharedrep,
)
from .policy_engine import (
    MaxMinOpts, gibbs_policy, kl_value, solve_maxmin_policy, suboptimality,
    unregularized_value, worst_group_by_entropy, worst_group_by_reward,
)
from .complexity_toolkit import kl_gibbs_bound_check

METHODS = ("sharedrep", "maxmin", "gold")
RESULT_COLUMNS = (
    "seed", "n", "minority_prop", "minority_group", "method", "group",
    "subopt", "unregularized_value", "kl_value", "param_error", "eta",
    "measured_kl", "kl_bound", "agreement", "converged",
)


@dataclass(frozen=True)
class ScenarioConfig:
    world: WorldConfig
    n_grid: tuple
    minority_grid: tuple
    beta: float = 1.0
    lambda_rule: object = "one_over_n"   # "one_over_n" or a fixed float
    delta: float = 0.1
    seeds: tuple = (0,)
    methods: tuple = METHODS
    fit_tol: float = 1e-6
    fit_max_iters: int = 4000
    fit_restarts: int = 2
    gap_tol: float = None
    # "none": plain max-min on fitted rewards for every method (the RL step
    # of the source pipelines carries no pessimism).  "sr": subtract the
    # pooled-width uncertainty penalty from the sharedrep policy objective.
    pessimism: str = "none"

    def __post_init__(self):
        if not self.n_grid or not self.minority_grid:
            raise ValueError("n_grid and minority_grid must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if not self.methods:
            raise ValueError("methods must be nonempty")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods: {sorted(bad)}")
        if isinstance(self.lambda_rule, str):
            if self.lambda_rule != "one_over_n":
                raise ValueError("lambda_rule must be 'one_over_n' or a number")
        elif float(self.lambda_rule) <= 0:
            raise ValueError("fixed lambda must be positive")

    def resolve_lambda(self, n: int) -> float:
        if self.lambda_rule == "one_over_n":
            return 1.0 / n
        return float(self.lambda_rule)


@dataclass(frozen=True)
class MethodGroupMetrics:
    subopt: float
    unregularized_value: float
    kl_value: float
    param_error: float
    eta: float
    measured_kl: float = None
    kl_bound: float = None


@dataclass(frozen=True)
class TrialResult:
    seed: int
    n: int
    minority_prop: float
    minority_group: int
    metrics: dict                      # (method, group) -> MethodGroupMetrics
    group_selection_agreement: object  # True/False, or None when uncertified
    converged: bool
    wall_time: float


def minority_proportions(num_groups: int, minority_prop: float,
                         minority_group: int = -1) -> np.ndarray:
    """Equal majority shares with one group holding the minority share."""
    if num_groups == 1:
        return np.ones(1)
    props = np.full(num_groups, (1.0 - minority_prop) / (num_groups - 1))
    props[minority_group] = minority_prop
    return props / props.sum()


def worst_case_group(world: World, beta: float) -> int:
    """The group the max-min adversary targets under the true rewards.

    Identified through the conditional-entropy rule on the true Gibbs
    distributions; data-independent, so the statistical minority can be
    made to coincide with the reward minority.
    """
    tables = _fitted_tables(world.truth.theta_star, world)
    gibbs = [gibbs_policy(t, world.truth.ref_policy, beta) for t in tables]
    return worst_group_by_entropy(gibbs, world.rho).chosen


def estimate_xi_inf(world: World, samples: int, seed: int = 0) -> float:
    """Sampled upper bound on the reward-gap infimum over the model class.

    Draws (B, w) with columns uniform in the b_max ball and w uniform on
    the simplex; the running minimum over a fixed stream is nonincreasing
    in the number of samples.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = stream(seed, "xi")
    d, k = world.config.feature_dim, world.config.shared_dim
    b_max = world.config.b_max
    best = math.inf
    for _ in range(samples):
        g = rng.standard_normal((d, k))
        radii = b_max * rng.random(k) ** (1.0 / d)
        b = g / np.linalg.norm(g, axis=0) * radii
        if k > 1:
            u = np.sort(rng.random(k - 1))
            w = np.diff(np.concatenate([[0.0], u, [1.0]]))
        else:
            w = np.ones(1)
        best = min(best, reward_gap_xi(world.phi, b, w))
    return float(best)


def _fitted_tables(theta: np.ndarray, world: World) -> np.ndarray:
    return np.stack([reward_table(theta[:, u], world.phi) for u in range(theta.shape[1])])


def run_trial(scenario: ScenarioConfig, seed: int, n: int, minority_prop: float) -> TrialResult:
    """One fully deterministic experiment cell; see the module docstring."""
    t0 = time.perf_counter()
    cfg = scenario.world
    world = build_world(replace(cfg, rng_seed=mix(cfg.rng_seed, "trial-world", seed)))
    # the statistical minority is the reward-worst group of this world
    minority_group = worst_case_group(world, scenario.beta) if cfg.num_groups > 1 else 0
    props = minority_proportions(cfg.num_groups, minority_prop, minority_group)
    data_seed = mix(cfg.rng_seed, "trial-data", seed, n, repr(float(minority_prop)))
    dataset = sample_dataset(world, n, proportions=props, seed=data_seed)
    lam = scenario.resolve_lambda(n)
    stats = compute_covariances(dataset, lam)
    spec = ConfidenceSpec.create(cfg.feature_dim, scenario.delta, lam, cfg.b_max, cfg.l_max)
    fit_opts = FitOpts(
        tol=scenario.fit_tol, max_iters=scenario.fit_max_iters,
        restarts=scenario.fit_restarts, seed=mix(cfg.rng_seed, "optimizer", seed, n),
    )
    mm_opts = MaxMinOpts(gap_tol=scenario.gap_tol if scenario.gap_tol is not None else 1e-3 * scenario.beta)
    ref, rho = world.truth.ref_policy, world.rho
    true_tables = _fitted_tables(world.truth.theta_star, world)

    estimates = {}
    converged = True
    if "sharedrep" in scenario.methods:
        try:
            params, report = fit_sharedrep(dataset, k=cfg.shared_dim, b_max=cfg.b_max, opts=fit_opts)
        except ValueError as exc:
            raise RuntimeError(f"sharedrep fit failed at seed={seed} n={n} prop={minority_prop}") from exc
        estimates["sharedrep"] = params.theta
        converged &= report.converged
    if "maxmin" in scenario.methods:
        try:
            params, report = fit_maxmin(dataset, b_max=cfg.b_max, opts=fit_opts)
        except ValueError as exc:
            raise RuntimeError(f"maxmin fit failed at seed={seed} n={n} prop={minority_prop}") from exc
        estimates["maxmin"] = params.theta
        converged &= report.converged

    metrics = {}
    agreement = None
    for method in scenario.methods:
        if method == "gold":
            theta, tables, eta = world.truth.theta_star, true_tables, 0.0
        else:
            theta = estimates[method]
            tables = _fitted_tables(theta, world)
            eta = 0.0
            if method == "sharedrep" and scenario.pessimism == "sr":
                eta = eta_sr(spec, n)
        sol = solve_maxmin_policy(
            tables, ref, rho, scenario.beta, eta, stats, opts=mm_opts, phi=world.phi,
        )
        converged &= sol.converged
        for u in range(cfg.num_groups):
            width = 0.0
            if method == "sharedrep":
                width = eta_sr(spec, n)
            elif method == "maxmin":
                width = eta_mm(spec, max(int(dataset.n_per_group[u]), 1))
            measured_kl = kl_bound = None
            if method == "sharedrep":
                measured_kl, kl_bound = kl_gibbs_bound_check(
                    world, theta[:, u], stats, spec, scenario.beta, u, n=n,
                )
            metrics[(method, u)] = MethodGroupMetrics(
                subopt=suboptimality(sol.policy, u, world),
                unregularized_value=unregularized_value(sol.policy, true_tables[u], rho),
                kl_value=kl_value(sol.policy, true_tables[u], ref, rho, scenario.beta),
                param_error=weighted_norm(theta[:, u] - world.truth.theta_star[:, u], stats.sigma, lam),
                eta=width,
                measured_kl=measured_kl,
                kl_bound=kl_bound,
            )
        if method == "sharedrep" and cfg.num_groups > 1:
            agreement = _worst_group_agreement(tables, ref, rho, scenario.beta, stats)

    return TrialResult(
        seed=seed, n=n, minority_prop=minority_prop, minority_group=minority_group,
        metrics=metrics, group_selection_agreement=agreement, converged=converged,
        wall_time=time.perf_counter() - t0,
    )


def _worst_group_agreement(tables, ref, rho, beta, stats):
    """Reward-vs-entropy worst-group agreement on the plain max-min policy.

    Defined only when the gap certificate reaches 1e-6 and neither
    selection is tied; score margins below the certificate scale are exact
    ties at the optimum (mixed adversary), so those also return None.
    """
    sol = solve_maxmin_policy(tables, ref, rho, beta, 0.0, stats, opts=MaxMinOpts(gap_tol=1e-6))
    if not sol.converged:
        return None
    by_reward = worst_group_by_reward(sol.policy, tables, rho)
    gibbs = [gibbs_policy(t, ref, beta) for t in tables]
    by_entropy = worst_group_by_entropy(gibbs, rho)
    if by_reward.tie or by_entropy.tie:
        return None
    floor = max(1e-8, 50.0 * sol.gap)
    r_sorted = np.sort(by_reward.scores)
    e_sorted = np.sort(by_entropy.scores)
    if r_sorted[1] - r_sorted[0] < floor or e_sorted[1] - e_sorted[0] < 1e-8:
        return None
    return bool(by_reward.chosen == by_entropy.chosen)


def _run_trial_star(args):
    return run_trial(*args)


def sweep(scenario: ScenarioConfig, jobs: int = 1):
    """Run every grid x seed trial; returns results sorted deterministically."""
    if not scenario.methods:
        raise ValueError("methods must be nonempty")
    cells = [
        (scenario, seed, n, prop)
        for n in scenario.n_grid
        for prop in scenario.minority_grid
        for seed in scenario.seeds
    ]
    if jobs > 1:
        with Pool(jobs) as pool:
            results = pool.map(_run_trial_star, cells)
    else:
        results = [run_trial(*cell) for cell in cells]
    results.sort(key=lambda r: (r.n, r.minority_prop, r.seed))
    return results


def _fmt_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def results_to_csv(results, scenario: ScenarioConfig) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for r in results:
        for method in scenario.methods:
            for u in range(scenario.world.num_groups):
                m = r.metrics[(method, u)]
                writer.writerow([
                    r.seed, r.n, _fmt_cell(float(r.minority_prop)),
                    r.minority_group, method, u,
                    _fmt_cell(m.subopt), _fmt_cell(m.unregularized_value),
                    _fmt_cell(m.kl_value), _fmt_cell(m.param_error), _fmt_cell(m.eta),
                    _fmt_cell(m.measured_kl), _fmt_cell(m.kl_bound),
                    _fmt_cell(r.group_selection_agreement), _fmt_cell(r.converged),
                ])
    return buf.getvalue()


def _median(values):
    vals = [v for v in values if v is not None]
    return float(np.median(vals)) if vals else None


def _curve_minority(results, scenario):
    rows = [["proportion", "method", "median_minority_subopt",
             "median_minority_value", "median_gap_to_gold"]]
    for prop in scenario.minority_grid:
        cell = [r for r in results if r.minority_prop == prop]
        gold = {r.seed: r.metrics[("gold", r.minority_group)].subopt for r in cell} \
            if "gold" in scenario.methods else {}
        for method in scenario.methods:
            subs = [r.metrics[(method, r.minority_group)].subopt for r in cell]
            vals = [r.metrics[(method, r.minority_group)].unregularized_value for r in cell]
            gaps = [r.metrics[(method, r.minority_group)].subopt - gold[r.seed]
                    for r in cell] if gold else []
            rows.append([
                _fmt_cell(float(prop)), method, _fmt_cell(_median(subs)),
                _fmt_cell(_median(vals)), _fmt_cell(_median(gaps) if gaps else None),
            ])
    return rows


def _curve_error(results, scenario):
    rows = [["n", "method", "group", "median_param_error", "median_eta"]]
    for n in scenario.n_grid:
        cell = [r for r in results if r.n == n]
        for method in scenario.methods:
            if method == "gold":
                continue
            for u in range(scenario.world.num_groups):
                errs = [r.metrics[(method, u)].param_error for r in cell]
                etas = [r.metrics[(method, u)].eta for r in cell]
                rows.append([n, method, u, _fmt_cell(_median(errs)), _fmt_cell(_median(etas))])
    return rows


def _curve_kl(results, scenario):
    rows = [["n", "group", "median_measured_kl", "median_bound_leading_term"]]
    if "sharedrep" not in scenario.methods:
        return rows
    for n in scenario.n_grid:
        cell = [r for r in results if r.n == n]
        for u in range(scenario.world.num_groups):
            kls = [r.metrics[("sharedrep", u)].measured_kl for r in cell]
            bounds = [r.metrics[("sharedrep", u)].kl_bound for r in cell]
            rows.append([n, u, _fmt_cell(_median(kls)), _fmt_cell(_median(bounds))])
    return rows


def _curve_nmaxmin(scenario):
    """Unit-psi formula curve of the identification cost across both regimes."""
    from .complexity_toolkit import ComplexityInputs, GapProfile, n_maxmin

    y = scenario.world.num_responses
    c = math.log(y) + 2.0
    spec = ConfidenceSpec.create(
        scenario.world.feature_dim, scenario.delta, 0.0,
        scenario.world.b_max, scenario.world.l_max,
    )
    rows = [["delta_min", "regime", "n_maxmin_unit_psi"]]
    for delta in np.geomspace(1e-3 * c, 10.0 * c, 60):
        gap = GapProfile(delta_u=np.array([0.0, delta]), delta_min=float(delta), u_star=0)
        inputs = ComplexityInputs.from_gap(y, scenario.beta, spec, np.ones(2), gap)
        rows.append([_fmt_cell(float(delta)), inputs.regime,
                     _fmt_cell(n_maxmin(inputs, gap))])
    return rows


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerows(rows)
    return len(rows) - 1


def scenario_to_dict(scenario: ScenarioConfig) -> dict:
    doc = asdict(scenario)
    doc["world"] = asdict(scenario.world)
    return doc


def scenario_from_dict(doc: dict) -> ScenarioConfig:
    world = WorldConfig(**{k: (tuple(v) if k == "group_proportions" else v)
                           for k, v in doc["world"].items()})
    rest = {k: v for k, v in doc.items() if k != "world"}
    for key in ("n_grid", "minority_grid", "seeds", "methods"):
        if key in rest and rest[key] is not None:
            rest[key] = tuple(rest[key])
    return ScenarioConfig(world=world, **rest)


def emit(results, out_dir: str, scenario: ScenarioConfig, figures: bool = True) -> dict:
    """Write results.csv, timing data, plotting curves, figures and meta.json.

    On I/O failure the manifest is written with incomplete=True before the
    error propagates.
    """
    os.makedirs(os.path.join(out_dir, "curves"), exist_ok=True)
    manifest = {}
    try:
        res_path = os.path.join(out_dir, "results.csv")
        with open(res_path, "w", newline="") as fh:
            fh.write(results_to_csv(results, scenario))
        manifest["results.csv"] = sum(
            len(scenario.methods) * scenario.world.num_groups for _ in results
        )
        timing_rows = [["seed", "n", "minority_prop", "wall_time"]] + [
            [r.seed, r.n, _fmt_cell(float(r.minority_prop)), _fmt_cell(r.wall_time)]
            for r in results
        ]
        manifest["timings.csv"] = _write_rows(os.path.join(out_dir, "timings.csv"), timing_rows)
        manifest["curves/minority_vs_proportion.csv"] = _write_rows(
            os.path.join(out_dir, "curves", "minority_vs_proportion.csv"),
            _curve_minority(results, scenario))
        manifest["curves/error_vs_n.csv"] = _write_rows(
            os.path.join(out_dir, "curves", "error_vs_n.csv"), _curve_error(results, scenario))
        manifest["curves/kl_vs_n.csv"] = _write_rows(
            os.path.join(out_dir, "curves", "kl_vs_n.csv"), _curve_kl(results, scenario))
        manifest["curves/nmaxmin_vs_delta.csv"] = _write_rows(
            os.path.join(out_dir, "curves", "nmaxmin_vs_delta.csv"), _curve_nmaxmin(scenario))
        if figures:
            from .report_figures import render_all

            for name in render_all(out_dir):
                manifest[name] = 1
    except OSError:
        _write_meta(out_dir, scenario, manifest, incomplete=True)
        raise
    _write_meta(out_dir, scenario, manifest, incomplete=False)
    return manifest


def _write_meta(out_dir, scenario, manifest, incomplete):
    meta = {
        "config": scenario_to_dict(scenario),
        "code_version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "files": manifest,
        "incomplete": incomplete,
    }
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        json.dump(meta, fh, indent=2)


def default_scenario(seed: int = 0) -> ScenarioConfig:
    """Desk-scale default: d=16, K=3, U=2, |X|=8, |Y|=6, beta=1, delta=0.1."""
    world = WorldConfig(
        num_prompts=8, num_responses=6, feature_dim=16, shared_dim=3,
        num_groups=2, l_max=1.0, b_max=1.0, rng_seed=seed,
    )
    return ScenarioConfig(
        world=world,
        n_grid=(512, 1024),
        minority_grid=(0.05, 0.2),
        beta=1.0,
        lambda_rule="one_over_n",
        delta=0.1,
        seeds=(0, 1, 2),
    )


def minority_share_scenario(seed: int = 0, seeds=tuple(range(50))) -> ScenarioConfig:
    """Minority-share sweep at N=4096, d=16, K=3.

    Seven majority groups overdetermine the shared column space (U > K), a
    b_max of 2 keeps preference labels informative, beta=0.25 makes the
    max-min policy sharp enough that reward-model quality shows up in
    per-group suboptimality, and 32 prompts average out per-prompt argmax
    luck.  The minority share is assigned to each world's reward-worst
    group, the regime the max-min objective is meant to protect.
    """
    world = WorldConfig(
        num_prompts=32, num_responses=8, feature_dim=16, shared_dim=3,
        num_groups=8, l_max=1.0, b_max=2.0, rng_seed=seed,
    )
    return ScenarioConfig(
        world=world,
        n_grid=(4096,),
        minority_grid=(0.01, 0.05, 0.1, 0.2),
        beta=0.3,
        lambda_rule="one_over_n",
        delta=0.1,
        seeds=seeds,
        fit_max_iters=2000,
    )
