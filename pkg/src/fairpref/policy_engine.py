"""Policies downstream of reward estimates.

Gibbs distributions, KL-regularised and raw values, pessimistic values
over confidence ellipsoids (closed form), per-prompt pessimistic best
responses, the max-min policy solver with a certified duality gap, worst
group identification by average reward or by Gibbs entropy, and
suboptimality accounting against per-group optimal deterministic policies.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .preference_data import CovarianceStats, inv_metric_solver
from .tabular_world import World, reward_table

TIE_TOL = 1e-9


@dataclass(frozen=True)
class PolicyTable:
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", probs)
        if probs.ndim != 2:
            raise ValueError("policy table must be 2-D (prompts x responses)")
        if np.any(probs < 0):
            raise ValueError("policy entries must be nonnegative")
        if np.max(np.abs(probs.sum(axis=1) - 1.0)) > 1e-10:
            raise ValueError("policy rows must sum to 1 within 1e-10")


@dataclass(frozen=True)
class PessimisticValueResult:
    value: float
    minimizing_direction: np.ndarray


@dataclass(frozen=True)
class GroupSelection:
    chosen: int
    scores: np.ndarray
    tie: bool


def _rho_vec(rho) -> np.ndarray:
    return np.asarray(getattr(rho, "rho", rho), dtype=float)


def _policy_mat(policy) -> np.ndarray:
    return np.asarray(getattr(policy, "probs", policy), dtype=float)


def gibbs_policy(rewards: np.ndarray, ref, beta: float) -> PolicyTable:
    """nu(y|x) proportional to ref(y|x) * exp(r(x,y) / beta)."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    ref = _policy_mat(ref)
    if np.any(ref <= 0):
        raise ValueError("reference policy rows must be strictly positive")
    return PolicyTable(_gibbs_rows(np.asarray(rewards, dtype=float), ref, beta))


def _gibbs_rows(rewards, ref, beta):
    z = rewards / beta
    z = z - z.max(axis=1, keepdims=True)
    weights = ref * np.exp(z)
    return weights / weights.sum(axis=1, keepdims=True)


def conditional_entropy(policy, rho) -> float:
    """E_{x~rho} of the Shannon entropy of policy(.|x), natural log."""
    p = _policy_mat(policy)
    plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return float(-(_rho_vec(rho) @ plogp.sum(axis=1)))


def unregularized_value(policy, rewards: np.ndarray, rho) -> float:
    p = _policy_mat(policy)
    return float(_rho_vec(rho) @ (p * rewards).sum(axis=1))


def kl_value(policy, rewards: np.ndarray, ref, rho, beta: float) -> float:
    """E[r] - beta * KL(policy || ref); -inf when the KL is infinite."""
    p = _policy_mat(policy)
    ref = _policy_mat(ref)
    if np.any((p > 0) & (ref == 0)):
        return float("-inf")
    ratio = np.where(p > 0, p / np.where(ref > 0, ref, 1.0), 1.0)
    inner = (p * (rewards - beta * np.log(ratio))).sum(axis=1)
    return float(_rho_vec(rho) @ inner)


def expected_features(policy, phi, rho) -> np.ndarray:
    """m(policy) = E_{x~rho, y~policy}[phi(x, y)]."""
    p = _policy_mat(policy)
    return np.einsum("x,xy,xyd->d", _rho_vec(rho), p, phi.table)


def pessimistic_value(policy, theta_hat, stats: CovarianceStats, eta: float, phi, rho) -> PessimisticValueResult:
    """Minimum of <E[phi], theta> over the eta-ellipsoid around theta_hat.

    Closed form: plug-in value minus eta * ||E phi||_{(Sigma+lam I)^{-1}};
    the minimiser sits on the ellipsoid boundary along -(Sigma+lam I)^{-1} m.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    m = expected_features(policy, phi, rho)
    solve = inv_metric_solver(stats.sigma, stats.lam)
    am = solve(m)
    norm_inv = float(np.sqrt(max(m @ am, 0.0)))
    plug_in = float(m @ theta_hat)
    if norm_inv < 1e-15:
        return PessimisticValueResult(value=plug_in, minimizing_direction=theta_hat)
    direction = theta_hat - eta * am / norm_inv
    return PessimisticValueResult(value=plug_in - eta * norm_inv, minimizing_direction=direction)


def feature_inv_norms(phi, stats: CovarianceStats) -> np.ndarray:
    """||phi(x, y)||_{(Sigma + lam I)^{-1}} for every pair, shape (|X|, |Y|)."""
    nx, ny, d = phi.table.shape
    flat = phi.table.reshape(-1, d)
    solve = inv_metric_solver(stats.sigma, stats.lam)
    quad = np.einsum("id,id->i", flat, solve(flat.T).T)
    return np.sqrt(np.maximum(quad, 0.0)).reshape(nx, ny)


def pessimistic_best_response(theta_hat, stats: CovarianceStats, eta: float, phi) -> PolicyTable:
    """Per-prompt argmax of <phi, theta_hat> - eta * ||phi||_{(Sigma+lam I)^{-1}}.

    Deterministic rows; ties go to the smallest response index.
    """
    scores = reward_table(np.asarray(theta_hat, dtype=float), phi) - eta * feature_inv_norms(phi, stats)
    choice = scores.argmax(axis=1)
    probs = np.zeros(scores.shape)
    probs[np.arange(scores.shape[0]), choice] = 1.0
    return PolicyTable(probs)


def _selection(scores: np.ndarray, pick_max: bool) -> GroupSelection:
    scores = np.asarray(scores, dtype=float)
    chosen = int(scores.argmax() if pick_max else scores.argmin())
    if len(scores) > 1:
        rest = np.delete(scores, chosen)
        margin = (scores[chosen] - rest.max()) if pick_max else (rest.min() - scores[chosen])
        tie = bool(margin <= TIE_TOL)
    else:
        tie = False
    return GroupSelection(chosen=chosen, scores=scores, tie=tie)


def worst_group_by_reward(policy, reward_tables, rho) -> GroupSelection:
    """argmin over groups of E_{x~rho, y~policy}[r_u]."""
    p = _policy_mat(policy)
    rho_v = _rho_vec(rho)
    scores = np.einsum("x,uxy,xy->u", rho_v, np.asarray(reward_tables, dtype=float), p)
    return _selection(scores, pick_max=False)


def worst_group_by_entropy(gibbs_tables, rho) -> GroupSelection:
    """argmax over groups of the conditional Gibbs entropy."""
    scores = np.array([conditional_entropy(g, rho) for g in gibbs_tables])
    return _selection(scores, pick_max=True)


def suboptimality(policy, group: int, world: World) -> float:
    """J_u(per-prompt argmax of the true reward) minus J_u(policy)."""
    r = reward_table(world.truth.theta_star[:, group], world.phi)
    rho_v = world.rho.rho
    j_star = float(rho_v @ r.max(axis=1))
    return j_star - unregularized_value(policy, r, rho_v)


def performance_gap_bound(world: World, stats: CovarianceStats, eta_sr_val: float, mm_policy,
                 xi_hat: float = None, xi_samples: int = 10000, xi_seed: int = 0) -> float:
    """rho_min * xi_hat - 2 eta_sr * E_x ||E_{y~mm_policy}[phi]||_{(Sigma+lam I)^{-1}}.

    xi_hat defaults to the sampled reward-gap infimum estimate; note it is
    an upper bound on the true infimum, so the returned bound is reported,
    not asserted.
    """
    if xi_hat is None:
        from .experiment_harness import estimate_xi_inf

        xi_hat = estimate_xi_inf(world, xi_samples, seed=xi_seed)
    p = _policy_mat(mm_policy)
    solve = inv_metric_solver(stats.sigma, stats.lam)
    means = np.einsum("xy,xyd->xd", p, world.phi.table)
    kappa = np.sqrt(np.maximum(np.einsum("xd,xd->x", means, solve(means.T).T), 0.0))
    return float(world.rho.rho_min * xi_hat - 2.0 * eta_sr_val * (world.rho.rho @ kappa))


# ---------------------------------------------------------------------------
# Max-min policy solver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaxMinOpts:
    rounds: int = 5000
    gap_tol: float = None      # defaults to 1e-3 * beta
    check_every: int = 100
    inner_iters: int = 2000
    polish_iters: int = 120


@dataclass(frozen=True)
class MaxMinSolution:
    policy: PolicyTable
    gap: float
    converged: bool
    group_values: np.ndarray
    q: np.ndarray

    def __iter__(self):
        return iter((self.policy, self.gap))


class _MaxMinProblem:
    """max over pi of min over u of E[r_u] - eta_u * Gamma_u(pi) - beta KL(pi||ref).

    Gamma_u(pi) = ||E_{rho, pi}[phi]||_{(Sigma_u + lam I)^{-1}}; with a scalar
    eta the pooled Sigma is used for every group, so the penalty is applied
    once, group-independently, inside the min.
    """

    def __init__(self, rewards, ref, rho, beta, eta, stats, phi, eps_smooth=0.0):
        self.r = np.asarray(rewards, dtype=float)
        self.num_groups, self.nx, self.ny = self.r.shape
        self.ref = _policy_mat(ref)
        self.log_ref = np.log(self.ref)
        self.rho = _rho_vec(rho)
        self.beta = float(beta)
        if np.ndim(eta) == 0:
            self.eta = np.full(self.num_groups, float(eta))
            per_group_metric = False
        else:
            self.eta = np.asarray(eta, dtype=float)
            per_group_metric = True
        if len(self.eta) != self.num_groups:
            raise ValueError("eta must be scalar or one width per group")
        self.pessimistic = bool(np.any(self.eta > 0))
        # Huber-style smoothing of the norm penalty: sqrt(n^2 + eps^2) - eps
        # lies in [norm - eps, norm], so the smoothed objective upper-bounds
        # the true one and certificates built on it remain valid, with a
        # floor of order max(eta) * eps.
        self.eps = float(eps_smooth) if self.pessimistic else 0.0
        self.phi = phi
        self.solvers = None
        if self.pessimistic:
            if phi is None:
                raise ValueError("phi is required when eta > 0")
            if per_group_metric:
                self.solvers = [inv_metric_solver(s, stats.lam) for s in stats.sigma_per_group]
            else:
                pooled = inv_metric_solver(stats.sigma, stats.lam)
                self.solvers = [pooled] * self.num_groups

    def mean_features(self, pi):
        return np.einsum("x,xy,xyd->d", self.rho, pi, self.phi.table)

    def gammas(self, pi, smoothed=True):
        """Per-group penalty terms ||m(pi)||, optionally smoothed at zero."""
        if not self.pessimistic:
            return np.zeros(self.num_groups)
        m = self.mean_features(pi)
        out = np.empty(self.num_groups)
        for u in range(self.num_groups):
            sq = max(m @ self.solvers[u](m), 0.0)
            if smoothed:
                out[u] = np.sqrt(sq + self.eps**2) - self.eps
            else:
                out[u] = np.sqrt(sq)
        return out

    def group_values(self, pi, smoothed=True):
        """L_u(pi) for every group (smoothed penalty by default)."""
        er = np.einsum("x,uxy,xy->u", self.rho, self.r, pi)
        kl = float(self.rho @ (pi * (np.log(np.maximum(pi, 1e-300)) - self.log_ref)).sum(axis=1))
        return er - self.eta * self.gammas(pi, smoothed=smoothed) - self.beta * kl

    def weighted_value_and_grad(self, pi, q):
        """Smoothed L(pi, q) = sum_u q_u L_u(pi) and its per-row gradient.

        The returned grad excludes the rho(x) factor; certificates reweight
        by rho explicitly.
        """
        values = self.group_values(pi)
        grad = np.einsum("u,uxy->xy", q, self.r)
        grad -= self.beta * (np.log(np.maximum(pi, 1e-300)) - self.log_ref + 1.0)
        if self.pessimistic:
            m = self.mean_features(pi)
            v = np.zeros(self.phi.table.shape[2])
            for u in range(self.num_groups):
                if q[u] * self.eta[u] == 0:
                    continue
                am = self.solvers[u](m)
                denom = np.sqrt(max(m @ am, 0.0) + self.eps**2)
                if denom > 1e-300:
                    v += q[u] * self.eta[u] * am / denom
            grad -= self.phi.table @ v
        return float(q @ values), grad, values

    def fw_slack(self, pi, grad):
        """max over policies of <rho grad, pi' - pi>; zero at the inner optimum."""
        per_row = grad.max(axis=1) - (grad * pi).sum(axis=1)
        return float(self.rho @ per_row)

    def certificate(self, pi, q):
        """Upper bound on the duality gap at (pi, q); valid for any feasible pair."""
        value, grad, _ = self.weighted_value_and_grad(pi, q)
        upper = value + max(self.fw_slack(pi, grad), 0.0)
        values = self.group_values(pi, smoothed=False)
        primal = float(values.min())
        return max(upper - primal, 0.0), values

    def gibbs_best_response(self, q):
        mixed = np.einsum("u,uxy->xy", q, self.r)
        return _gibbs_rows(mixed, self.ref, self.beta)

    def inner_maximize(self, q, pi0, tol, max_iters):
        """Entropic mirror ascent on L(., q) from pi0 until the FW slack <= tol."""
        pi = pi0.copy()
        value, grad, _ = self.weighted_value_and_grad(pi, q)
        step = 1.0 / max(self.beta, 1e-12)
        slack = np.inf
        for _ in range(max_iters):
            slack = self.fw_slack(pi, grad)
            if slack <= tol:
                break
            accepted = False
            trial = step
            for _ in range(40):
                logs = np.log(np.maximum(pi, 1e-300)) + trial * grad
                logs -= logs.max(axis=1, keepdims=True)
                cand = np.exp(logs)
                cand /= cand.sum(axis=1, keepdims=True)
                cand_value, cand_grad, _ = self.weighted_value_and_grad(cand, q)
                if cand_value >= value - 1e-14:
                    pi, value, grad = cand, cand_value, cand_grad
                    accepted = True
                    break
                trial *= 0.5
            if not accepted:
                break
            step = min(trial * 2.0, 1e6)
        return pi, slack


def solve_maxmin_policy(reward_tables, ref, rho, beta: float, eta, stats: CovarianceStats,
                        opts: MaxMinOpts = MaxMinOpts(), phi=None) -> MaxMinSolution:
    """Solve max over pi of min over groups of the (pessimistic) KL value.

    The engine couples entropic mirror ascent on the policy with a Hedge
    adversary over groups and certifies the averaged iterates; because the
    no-regret pair alone cannot certify tight gaps in reasonable time, the
    solver first runs a dual pass (minimise the concave-conjugate value
    over the group simplex, with closed-form Gibbs best responses when
    eta = 0) and falls back to the no-regret loop only while the
    certificate stays above gap_tol.  The reported gap is always a valid
    upper bound on the duality gap of the returned policy.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    gap_tol = opts.gap_tol if opts.gap_tol is not None else 1e-3 * beta
    eta_max = float(np.max(eta)) if np.ndim(eta) else float(eta)
    eps_smooth = gap_tol / (5.0 * eta_max) if eta_max > 0 else 0.0
    prob = _MaxMinProblem(reward_tables, ref, rho, beta, eta, stats, phi,
                          eps_smooth=eps_smooth)
    nu = prob.num_groups

    best = {"pi": None, "gap": np.inf, "values": None, "q": None}

    def consider(pi, q):
        gap, values = prob.certificate(pi, q)
        if gap < best["gap"]:
            best.update(pi=pi, gap=gap, values=values, q=q)
        return gap

    def response(q, pi0=None, tol=gap_tol / 10):
        if not prob.pessimistic:
            return prob.gibbs_best_response(q)
        start = pi0 if pi0 is not None else prob.gibbs_best_response(q)
        pi, _ = prob.inner_maximize(q, start, tol, opts.inner_iters)
        return pi

    uniform_q = np.full(nu, 1.0 / nu)
    consider(response(uniform_q), uniform_q)

    if best["gap"] > gap_tol and nu > 1:
        if prob.pessimistic:
            _dual_descend(prob, uniform_q, gap_tol, opts, consider)
        else:
            q_polish = _dual_minimize(prob, uniform_q, response, opts)
            consider(response(q_polish), q_polish)
        for u in range(nu):
            if best["gap"] <= gap_tol:
                break
            vertex = np.eye(nu)[u]
            consider(response(vertex), vertex)

    if best["gap"] > gap_tol:
        _no_regret(prob, consider, response, gap_tol, opts)

    return MaxMinSolution(
        policy=PolicyTable(best["pi"]),
        gap=float(best["gap"]),
        converged=bool(best["gap"] <= gap_tol),
        group_values=best["values"],
        q=best["q"],
    )


def _dual_minimize(prob, q0, response, opts):
    """Minimise q -> max_pi L(pi, q) over the simplex (SLSQP, Danskin gradient)."""
    state = {"pi": None}

    def fun(q):
        q = np.clip(q, 0.0, None)
        s = q.sum()
        q = q / s if s > 0 else np.full(len(q), 1.0 / len(q))
        pi = response(q, pi0=state["pi"])
        state["pi"] = pi
        value, _, _ = prob.weighted_value_and_grad(pi, q)
        grad = np.einsum("x,uxy,xy->u", prob.rho, prob.r, pi)
        return value, grad

    res = minimize(
        fun, q0, jac=True, method="SLSQP",
        bounds=[(0.0, 1.0)] * len(q0),
        constraints=[{"type": "eq", "fun": lambda q: q.sum() - 1.0, "jac": lambda q: np.ones_like(q)}],
        options={"maxiter": opts.polish_iters, "ftol": 1e-14},
    )
    q = np.clip(res.x, 0.0, None)
    return q / q.sum() if q.sum() > 0 else q0


def _dual_descend(prob, q0, gap_tol, opts, consider):
    """Pessimistic case: projected gradient descent on the dual upper envelope.

    F(q) = L(pi_in(q), q) + FW slack, with pi_in solved cold from the Gibbs
    warm start so F is a deterministic function of q; the descent direction
    is the exact Danskin gradient E_pi[r_u] - eta_u Gamma_u(pi).
    """
    from .reward_estimation import project_simplex

    def envelope(q):
        pi0 = prob.gibbs_best_response(q)
        pi, _ = prob.inner_maximize(q, pi0, gap_tol / 30.0, opts.inner_iters)
        value, grad, _ = prob.weighted_value_and_grad(pi, q)
        upper = value + max(prob.fw_slack(pi, grad), 0.0)
        danskin = np.einsum("x,uxy,xy->u", prob.rho, prob.r, pi) - prob.eta * prob.gammas(pi)
        return upper, danskin, pi

    q = q0.copy()
    f_cur, g_cur, pi_cur = envelope(q)
    consider(pi_cur, q)
    lr = 1.0 / max(np.abs(g_cur).max(), 1e-12)
    for _ in range(opts.polish_iters):
        moved = False
        for _ in range(25):
            q_new = project_simplex(q - lr * g_cur)
            if np.allclose(q_new, q, atol=1e-14):
                break
            f_new, g_new, pi_new = envelope(q_new)
            if f_new <= f_cur + 1e-4 * float(g_cur @ (q_new - q)):
                gap = consider(pi_new, q_new)
                q, f_cur, g_cur = q_new, f_new, g_new
                moved = True
                if gap <= gap_tol:
                    return
                break
            lr *= 0.5
        if not moved:
            return
        lr = min(lr * 2.0, 1e6)


def _no_regret(prob, consider, response, gap_tol, opts):
    """Simultaneous mirror-ascent / Hedge dynamics with averaged iterates."""
    nu = prob.num_groups
    pi = prob.ref.copy()
    q = np.full(nu, 1.0 / nu)
    pi_avg = np.zeros_like(pi)
    q_avg = np.zeros(nu)
    scale = max(np.abs(prob.r).max(), prob.beta, 1e-12)
    for t in range(1, opts.rounds + 1):
        _, grad, values = prob.weighted_value_and_grad(pi, q)
        step = 1.0 / (scale * np.sqrt(t))
        logs = np.log(np.maximum(pi, 1e-300)) + step * grad
        logs -= logs.max(axis=1, keepdims=True)
        pi = np.exp(logs)
        pi /= pi.sum(axis=1, keepdims=True)
        hedge = q * np.exp(-step * values / scale)
        q = hedge / hedge.sum()
        pi_avg += pi
        q_avg += q
        if t % opts.check_every == 0 or t == opts.rounds:
            gap = consider(pi_avg / t, q_avg / t)
            if gap <= gap_tol:
                return


def policy_to_csv(policy) -> str:
    import csv
    import io

    p = _policy_mat(policy)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["prompt", "response", "probability"])
    for x in range(p.shape[0]):
        for y in range(p.shape[1]):
            writer.writerow([x, y, repr(float(p[x, y]))])
    return buf.getvalue()


def selection_to_json(sel: GroupSelection) -> str:
    import json

    return json.dumps(
        {"chosen": sel.chosen, "scores": [float(s) for s in sel.scores], "tie": sel.tie},
        indent=2,
    )
