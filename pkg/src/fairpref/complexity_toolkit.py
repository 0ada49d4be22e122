"""Closed-form sample-complexity objects.

Binary entropy, total variation, KL, the entropy-difference bound
TV * log|Omega| + h(TV), the piecewise link f between KL and entropy
gaps together with its inverse at half the minimum gap, the W_{-1}
branch of the Lambert function, per-group hardness constants psi_u, and
the sufficient-sample evaluators for the worst-group identification and
epsilon-accuracy requirements.
"""

from dataclasses import dataclass
import math

import numpy as np

from .policy_engine import conditional_entropy, feature_inv_norms, gibbs_policy
from .preference_data import CovarianceStats
from .reward_estimation import ConfidenceSpec
from .tabular_world import World, reward_table

BRANCH_POINT = -1.0 / math.e


def binary_entropy(p: float) -> float:
    """-p ln p - (1-p) ln(1-p) with the endpoint convention h(0) = h(1) = 0."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if p in (0.0, 1.0):
        return 0.0
    return float(-p * math.log(p) - (1.0 - p) * math.log1p(-p))


def tv_distance(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return float(0.5 * np.abs(p - q).sum())


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats; +inf when p puts mass where q does not."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    mask = p > 0
    if np.any(q[mask] == 0):
        return float("inf")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def fannes_bound(p, q, y_size: int) -> float:
    """TV * ln(y_size) + h(TV): an upper bound on |H(p) - H(q)|."""
    tv = tv_distance(p, q)
    return tv * math.log(y_size) + binary_entropy(min(tv, 1.0))


def f_of(x: float, y_size: int) -> float:
    """Piecewise entropy-gap link; continuous at the breakpoint 1/(2 e^2).

    f(x) = c sqrt(2x) above the breakpoint and -c sqrt(2x) ln sqrt(2x)
    below, with c = ln(y_size) + 2.
    """
    if x < 0:
        raise ValueError("x must be nonnegative")
    c = math.log(y_size) + 2.0
    s = math.sqrt(2.0 * x)
    if x >= 1.0 / (2.0 * math.e**2):
        return c * s
    if s == 0.0:
        return 0.0
    return -c * s * math.log(s)


def lambert_w_minus1(x: float) -> float:
    """Non-principal real branch of w e^w = x on [-1/e, 0).

    Halley iteration from the asymptotic seed ln(-x) - ln(-ln(-x)) (or the
    branch-point series near -1/e), with a monotone bisection fallback on
    [-745, -1].
    """
    if BRANCH_POINT * (1.0 + 1e-12) <= x < BRANCH_POINT:
        x = BRANCH_POINT   # rounding slop from callers composing 1/e
    if not BRANCH_POINT <= x < 0.0:
        raise ValueError("x must lie in [-1/e, 0)")
    if x == BRANCH_POINT:
        return -1.0
    ex1 = 1.0 + math.e * x
    if ex1 < 1e-3:
        s = math.sqrt(2.0 * ex1)
        w = -1.0 - s - s**2 / 3.0 - 11.0 * s**3 / 72.0
    else:
        l1 = math.log(-x)
        l2 = math.log(-l1)
        w = l1 - l2 + l2 / l1
    w = min(w, -1.0)
    for _ in range(100):
        ew = math.exp(w)
        f = w * ew - x
        if f == 0.0:
            return w
        fp = ew * (w + 1.0)
        fpp = ew * (w + 2.0)
        denom = fp - f * fpp / (2.0 * fp) if fp != 0.0 else 0.0
        if denom == 0.0 or not math.isfinite(denom):
            break
        w_new = w - f / denom
        if not math.isfinite(w_new):
            break
        w_new = min(w_new, -1.0)
        if abs(w_new - w) <= 1e-16 * abs(w_new):
            return w_new
        w = w_new
    if abs(w * math.exp(w) - x) <= 1e-13 * abs(x):
        return w
    return _bisect_w(x)


def _bisect_w(x: float) -> float:
    lo, hi = -745.0, -1.0   # w e^w decreasing on this bracket
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid * math.exp(mid) - x > 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= abs(hi) * 1e-16:
            break
    return 0.5 * (lo + hi)


def f_inverse_half_delta(delta_min: float, y_size: int) -> float:
    """x such that f(x, y_size) = delta_min / 2.

    Large gaps (delta_min > (2/e) c) land on the square-root branch, giving
    delta_min^2 / (8 c^2); small gaps invert the -s ln s branch through
    W_{-1}, giving exp(2 W_{-1}(-delta_min / (2c))) / 2.
    """
    if delta_min <= 0:
        raise ValueError("delta_min must be positive")
    c = math.log(y_size) + 2.0
    if delta_min > (2.0 / math.e) * c:
        return delta_min**2 / (8.0 * c**2)
    return 0.5 * math.exp(2.0 * lambert_w_minus1(-delta_min / (2.0 * c)))


@dataclass(frozen=True)
class GapProfile:
    delta_u: np.ndarray
    delta_min: float
    u_star: int


def gap_profile(gibbs_tables, rho) -> GapProfile:
    """Entropy gaps of the group Gibbs distributions against the top group.

    The top group u_star maximises the conditional entropy; an entropy tie
    at the top is rejected since a zero minimum gap voids the
    identification analysis.  A single group yields an infinite gap.
    """
    entropies = np.array([conditional_entropy(g, rho) for g in gibbs_tables])
    u_star = int(entropies.argmax())
    delta_u = np.abs(entropies[u_star] - entropies)
    delta_u[u_star] = 0.0
    if len(entropies) == 1:
        return GapProfile(delta_u=delta_u, delta_min=float("inf"), u_star=u_star)
    rest = np.delete(delta_u, u_star)
    delta_min = float(rest.min())
    if delta_min <= 1e-12:
        raise ValueError("entropy tie at the top; need a non-degenerate instance")
    return GapProfile(delta_u=delta_u, delta_min=delta_min, u_star=u_star)


@dataclass(frozen=True)
class ComplexityInputs:
    y_size: int
    beta: float
    spec: ConfidenceSpec
    psi_u: np.ndarray
    regime: str

    def __post_init__(self):
        if self.regime not in ("large_gap", "small_gap"):
            raise ValueError("regime must be 'large_gap' or 'small_gap'")

    @classmethod
    def from_gap(cls, y_size, beta, spec, psi_u, gap: GapProfile, regime_override=None):
        c = math.log(y_size) + 2.0
        regime = "large_gap" if gap.delta_min > (2.0 / math.e) * c else "small_gap"
        return cls(
            y_size=y_size, beta=beta, spec=spec,
            psi_u=np.asarray(psi_u, dtype=float),
            regime=regime_override or regime,
        )


def psi_u(world: World, stats: CovarianceStats, spec: ConfidenceSpec, beta: float, group: int) -> float:
    """(C_delta + B_max^2) / beta^2 times the squared worst-prompt mean
    inverse-metric feature norm under the group's true Gibbs distribution."""
    r = reward_table(world.truth.theta_star[:, group], world.phi)
    nu = gibbs_policy(r, world.truth.ref_policy, beta)
    norms = feature_inv_norms(world.phi, stats)
    per_prompt = (nu.probs * norms).sum(axis=1)
    return float((spec.c_delta + spec.b_max**2) / beta**2 * per_prompt.max() ** 2)


def n_maxmin(inputs: ComplexityInputs, gap: GapProfile, multiplier: float = 1.0) -> float:
    """Sufficient samples for worst-group identification (constants set to 1)."""
    if gap.delta_min == 0:
        raise ValueError("delta_min must be nonzero")
    c = math.log(inputs.y_size) + 2.0
    if inputs.regime == "large_gap":
        if math.isinf(gap.delta_min):
            return 0.0
        factor = (c / gap.delta_min) ** 4
    else:
        factor = math.exp(-4.0 * lambert_w_minus1(-gap.delta_min / (2.0 * c)))
    return float(multiplier * np.max(inputs.psi_u * factor))


def n_sr(inputs: ComplexityInputs, gap: GapProfile, pistar_feature_norm: float,
         epsilon: float, multiplier: float = 1.0) -> float:
    """max of the identification cost and the epsilon-accuracy cost
    C_delta / eps^2 * ||E_{pi*}[phi]||^2_{(Sigma+lam I)^{-1}}."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    accuracy = multiplier * inputs.spec.c_delta / epsilon**2 * pistar_feature_norm**2
    return float(max(n_maxmin(inputs, gap, multiplier), accuracy))


def kl_gibbs_bound_check(world: World, fitted_theta: np.ndarray, stats: CovarianceStats,
                         spec: ConfidenceSpec, beta: float, group: int, n: int = None):
    """Measured KL(true Gibbs || fitted Gibbs) vs the bound's leading term.

    Uses the lam = 1/N convention: the width is c_sr * sqrt((c_delta +
    b_max^2) / N) and the feature norms use stats.lam (set to 1/N by the
    caller).  Returns (measured_kl, bound_leading_term); the O(1/N)
    remainder is unquantified, so this is a trend report, not a bound test.
    """
    if n is None:
        if stats.lam <= 0:
            raise ValueError("cannot infer N from lam; pass n explicitly")
        n = int(round(1.0 / stats.lam))
    r_true = reward_table(world.truth.theta_star[:, group], world.phi)
    r_fit = reward_table(np.asarray(fitted_theta, dtype=float), world.phi)
    nu_true = gibbs_policy(r_true, world.truth.ref_policy, beta)
    nu_fit = gibbs_policy(r_fit, world.truth.ref_policy, beta)
    per_prompt = np.array(
        [kl_divergence(nu_true.probs[x], nu_fit.probs[x]) for x in range(world.config.num_prompts)]
    )
    measured = float(world.rho.rho @ per_prompt)
    width = spec.c_sr * math.sqrt((spec.c_delta + spec.b_max**2) / n)
    norms = feature_inv_norms(world.phi, stats)
    mean_norm = float(world.rho.rho @ (nu_true.probs * norms).sum(axis=1))
    return measured, (2.0 / beta) * width * mean_norm
