"""Preference-loss MLEs under shared-representation and per-group models.

The shared-representation estimator minimises the pooled binary
cross-entropy over (B, W) with B column-norm bounded and each w_u on the
simplex.  The per-group baseline fits an unconstrained-direction theta_u
inside the same norm ball from that group's records only.  Confidence
widths eta scale as sqrt(C_delta / N) pooled versus sqrt(C_delta / N_u)
per group.
"""

from dataclasses import dataclass
import math
import time

import numpy as np

from .rng import stream
from .preference_data import PreferenceDataset
from .tabular_world import sample_simplex

ARMIJO = 1e-4
MAX_HALVINGS = 60


@dataclass(frozen=True)
class ConfidenceSpec:
    """Bundle (lambda, delta, constants) from which widths are computed.

    gamma is the curvature floor of the sigmoid cross-entropy on scores
    bounded by l_max * b_max, and c_delta = (d + log(1/delta)) / gamma^2.
    """

    lam: float
    delta: float
    c_sr: float
    c_mm: float
    gamma: float
    c_delta: float
    b_max: float
    l_max: float

    def __post_init__(self):
        if not (0 < self.delta < 1):
            raise ValueError("delta must lie in (0, 1)")
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        mu = self.l_max * self.b_max
        gamma = 1.0 / (2.0 + math.exp(-mu) + math.exp(mu))
        if abs(self.gamma - gamma) > 1e-12:
            raise ValueError("gamma inconsistent with l_max * b_max")

    @classmethod
    def create(cls, d, delta, lam, b_max, l_max, c_sr=1.0, c_mm=1.0):
        mu = l_max * b_max
        gamma = 1.0 / (2.0 + math.exp(-mu) + math.exp(mu))
        c_delta = (d + math.log(1.0 / delta)) / gamma**2
        return cls(
            lam=lam, delta=delta, c_sr=c_sr, c_mm=c_mm,
            gamma=gamma, c_delta=c_delta, b_max=b_max, l_max=l_max,
        )


def eta_sr(spec: ConfidenceSpec, n: int) -> float:
    """Pooled confidence width c_sr * sqrt(c_delta / n + lam * b_max^2)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return spec.c_sr * math.sqrt(spec.c_delta / n + spec.lam * spec.b_max**2)


def eta_mm(spec: ConfidenceSpec, n_u: int) -> float:
    """Per-group confidence width c_mm * sqrt(c_delta / n_u + lam * b_max^2)."""
    if n_u < 1:
        raise ValueError("n_u must be >= 1")
    return spec.c_mm * math.sqrt(spec.c_delta / n_u + spec.lam * spec.b_max**2)


@dataclass(frozen=True)
class SharedRepParams:
    b: np.ndarray
    w: np.ndarray
    b_max: float

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float)
        w = np.asarray(self.w, dtype=float)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "w", w)
        if np.linalg.norm(b, axis=0).max() > self.b_max + 1e-9:
            raise ValueError("b column norm exceeds b_max + 1e-9")
        if np.any(w < -1e-9) or np.any(np.abs(w.sum(axis=0) - 1.0) > 1e-9):
            raise ValueError("w columns must lie on the simplex within 1e-9")

    @property
    def theta(self) -> np.ndarray:
        """Per-group products b @ w; the only identified quantity."""
        return self.b @ self.w


@dataclass(frozen=True)
class MaxMinParams:
    theta: np.ndarray
    b_max: float

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        object.__setattr__(self, "theta", theta)
        if np.linalg.norm(theta, axis=0).max() > self.b_max + 1e-9:
            raise ValueError("theta column norm exceeds b_max + 1e-9")


@dataclass(frozen=True)
class FitReport:
    final_loss: float
    iterations: int
    grad_norm: float
    converged: bool
    wall_time: float
    unidentified_groups: tuple = ()


@dataclass(frozen=True)
class FitOpts:
    tol: float = 1e-7
    max_iters: int = 20000
    restarts: int = 5
    lr0: float = 1.0
    seed: int = 0
    init: tuple = None
    callback: object = None


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-threshold)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v, kind="stable")[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, len(v) + 1)
    rho = np.max(np.nonzero(u - css / idx > 0)[0])
    tau = css[rho] / (rho + 1)
    return np.maximum(v - tau, 0.0)


def project_columns_simplex(w: np.ndarray) -> np.ndarray:
    out = np.empty_like(w, dtype=float)
    for j in range(w.shape[1]):
        out[:, j] = project_simplex(w[:, j])
    return out


def project_column_ball(b: np.ndarray, b_max: float) -> np.ndarray:
    """Rescale columns with norm above b_max onto the sphere of radius b_max."""
    b = np.asarray(b, dtype=float)
    norms = np.linalg.norm(b, axis=0)
    scale = np.where(norms > b_max, b_max / np.maximum(norms, 1e-300), 1.0)
    return b * scale


def _scores(b, w, diffs, groups):
    return np.einsum("ik,ki->i", diffs @ b, w[:, groups])


def _bce_from_scores(s, z):
    # -mean(z log sig(s) + (1-z) log(1 - sig(s))), saturation-safe.
    return float(np.mean(z * np.logaddexp(0.0, -s) + (1.0 - z) * np.logaddexp(0.0, s)))


def bce_loss(params: SharedRepParams, dataset: PreferenceDataset, phi=None) -> float:
    """Mean binary cross-entropy of the preference labels under (B, W)."""
    s = _scores(params.b, params.w, dataset.diffs, dataset.groups)
    return _bce_from_scores(s, dataset.labels)


def bce_gradients(params: SharedRepParams, dataset: PreferenceDataset, phi=None):
    """Exact gradients of bce_loss w.r.t. B (d x K) and W (K x U)."""
    _, gb, gw = _loss_and_grads(params.b, params.w, dataset.diffs, dataset.labels, dataset.groups, dataset.num_groups)
    return gb, gw


def _loss_and_grads(b, w, diffs, z, groups, num_groups):
    n = len(z)
    s = _scores(b, w, diffs, groups)
    loss = _bce_from_scores(s, z)
    sig = 1.0 / (1.0 + np.exp(-np.clip(s, -700, 700)))
    c = (sig - z) / n
    gb = diffs.T @ (c[:, None] * w[:, groups].T)
    c_onehot = np.zeros((n, num_groups))
    c_onehot[np.arange(n), groups] = c
    gw = b.T @ (diffs.T @ c_onehot)
    return loss, gb, gw


def _backtrack(x, grad, loss, loss_fn, project, step):
    """Projected-gradient step with Armijo halving; returns (x_new, loss_new, step)."""
    for _ in range(MAX_HALVINGS):
        x_new = project(x - step * grad)
        loss_new = loss_fn(x_new)
        decrease = np.vdot(grad, x_new - x)
        if loss_new <= loss + ARMIJO * decrease:
            return x_new, loss_new, step
        step *= 0.5
    return x, loss, step


def _spectral_init(dataset: PreferenceDataset, k: int, b_max: float):
    """Data-driven start: one-step score estimates per group, SVD for B0.

    At theta = 0 the per-group score direction is mean((z - 1/2) * delta);
    scaling by the inverse sigmoid curvature (4) and a ridge-inverted group
    covariance gives a crude per-group estimate whose top-k left singular
    vectors seed the extractor.  Weight columns start as the projection
    coefficients pulled onto the simplex.
    """
    d = dataset.diffs.shape[1]
    thetas = np.zeros((d, dataset.num_groups))
    groups = dataset.groups
    z = dataset.labels
    for u in range(dataset.num_groups):
        mask = groups == u
        if not mask.any():
            continue
        block = dataset.diffs[mask]
        score = block.T @ (z[mask] - 0.5) / mask.sum()
        cov = block.T @ block / mask.sum() + (1.0 / max(mask.sum(), 1)) * np.eye(d)
        theta = 4.0 * np.linalg.solve(cov, score)
        norm = np.linalg.norm(theta)
        if norm > b_max:
            theta *= b_max / norm
        thetas[:, u] = theta
    weights = np.sqrt(dataset.n_per_group / dataset.n)
    left, _, _ = np.linalg.svd(thetas * weights[None, :], full_matrices=False)
    b0 = project_column_ball(left[:, :k] * b_max, b_max)
    coef, *_ = np.linalg.lstsq(b0, thetas, rcond=None)
    w0 = project_columns_simplex(coef)
    return b0, w0


def _fit_sharedrep_once(diffs, z, groups, num_groups, k, b_max, opts, b0, w0):
    b, w = b0.copy(), w0.copy()
    group_rows = [np.flatnonzero(groups == u) for u in range(num_groups)]
    step_b = opts.lr0
    step_w = np.full(num_groups, opts.lr0)
    loss, gb, _ = _loss_and_grads(b, w, diffs, z, groups, num_groups)
    pg_norm = np.inf
    it = 0
    for it in range(1, opts.max_iters + 1):
        b, loss, step_b = _backtrack(
            b, gb, loss,
            lambda bb: _bce_from_scores(_scores(bb, w, diffs, groups), z),
            lambda bb: project_column_ball(bb, b_max),
            step_b,
        )
        step_b = min(step_b * 2.0, 1e6)
        # The W subproblem separates per group; each column gets its own
        # line search on its group-local loss so minority columns are not
        # paced by the pooled objective.
        proj = diffs @ b
        for u in range(num_groups):
            rows = group_rows[u]
            if rows.size == 0:
                continue
            pu, zu = proj[rows], z[rows]
            su = pu @ w[:, u]
            sig = 1.0 / (1.0 + np.exp(-np.clip(su, -700, 700)))
            grad_u = pu.T @ (sig - zu) / rows.size
            loss_u = _bce_from_scores(su, zu)
            w_u, _, step_u = _backtrack(
                w[:, u], grad_u, loss_u,
                lambda ww: _bce_from_scores(pu @ ww, zu),
                project_simplex,
                step_w[u],
            )
            w[:, u] = w_u
            step_w[u] = min(step_u * 2.0, 1e6)
        loss, gb, gw = _loss_and_grads(b, w, diffs, z, groups, num_groups)
        pg_b = b - project_column_ball(b - gb, b_max)
        pg_w = w - project_columns_simplex(w - gw)
        pg_norm = math.sqrt(np.vdot(pg_b, pg_b) + np.vdot(pg_w, pg_w))
        if opts.callback is not None:
            opts.callback(b, w)
        if pg_norm <= opts.tol:
            break
    return b, w, loss, it, pg_norm


def fit_sharedrep(dataset: PreferenceDataset, phi=None, k: int = None, b_max: float = 1.0,
                  opts: FitOpts = FitOpts()):
    """Alternating projected gradient descent on the pooled preference loss.

    Full-batch steps on B (column-ball projection) then on W (per-column
    simplex projection), Armijo backtracking, multi-start over
    opts.restarts seeded initialisations; the lowest-loss solution wins.
    Passing opts.init=(b0, w0) runs a single warm start instead.
    """
    if dataset.n == 0:
        raise ValueError("dataset must be nonempty")
    d = dataset.diffs.shape[1]
    if k is None or k < 1 or k > d:
        raise ValueError("need 1 <= k <= feature_dim")
    t0 = time.perf_counter()
    diffs, z, groups = dataset.diffs, dataset.labels, dataset.groups
    starts = []
    if opts.init is not None:
        b0, w0 = opts.init
        starts.append((project_column_ball(np.asarray(b0, float), b_max),
                       project_columns_simplex(np.asarray(w0, float))))
    else:
        starts.append(_spectral_init(dataset, k, b_max))
        for r in range(max(opts.restarts, 1) - 1):
            rng = stream(opts.seed, "optimizer", r)
            b0 = project_column_ball(rng.standard_normal((d, k)) * b_max / math.sqrt(d), b_max)
            w0 = sample_simplex(rng, k, dataset.num_groups) if k > 1 else np.ones((1, dataset.num_groups))
            starts.append((b0, w0))
    best = None
    for b0, w0 in starts:
        b, w, loss, it, pg = _fit_sharedrep_once(
            diffs, z, groups, dataset.num_groups, k, b_max, opts, b0, w0
        )
        if best is None or loss < best[2]:
            best = (b, w, loss, it, pg)
    b, w, loss, it, pg = best
    params = SharedRepParams(b=b, w=w, b_max=b_max)
    report = FitReport(
        final_loss=loss,
        iterations=it,
        grad_norm=pg,
        converged=pg <= opts.tol,
        wall_time=time.perf_counter() - t0,
        unidentified_groups=dataset.empty_groups,
    )
    return params, report


def _fit_ball_mle(diffs, z, b_max, opts, theta0):
    theta = theta0.copy()
    loss_fn = lambda th: _bce_from_scores(diffs @ th, z)
    project = lambda th: th if np.linalg.norm(th) <= b_max else th * (b_max / np.linalg.norm(th))
    n = len(z)
    step = opts.lr0
    pg_norm = np.inf
    it = 0
    loss = loss_fn(theta)
    for it in range(1, opts.max_iters + 1):
        s = diffs @ theta
        sig = 1.0 / (1.0 + np.exp(-np.clip(s, -700, 700)))
        grad = diffs.T @ ((sig - z) / n)
        theta, loss, step = _backtrack(theta, grad, loss, loss_fn, project, step)
        step = min(step * 2.0, 1e6)
        s = diffs @ theta
        sig = 1.0 / (1.0 + np.exp(-np.clip(s, -700, 700)))
        grad = diffs.T @ ((sig - z) / n)
        pg = theta - project(theta - grad)
        pg_norm = float(np.linalg.norm(pg))
        if opts.callback is not None:
            opts.callback(theta)
        if pg_norm <= opts.tol:
            break
    return theta, loss, it, pg_norm


def fit_maxmin(dataset: PreferenceDataset, phi=None, b_max: float = 1.0,
               opts: FitOpts = FitOpts()):
    """Independent per-group MLEs theta_u in the b_max ball.

    Convex per group, so a single start suffices; opts.init may carry a
    (d, U) warm-start matrix.  Every group must have records.
    """
    if dataset.n == 0:
        raise ValueError("dataset must be nonempty")
    for u in dataset.empty_groups:
        raise ValueError(f"group {u} has no records; per-group MLE undefined")
    t0 = time.perf_counter()
    d = dataset.diffs.shape[1]
    groups = dataset.groups
    thetas, losses, iters, pgs = [], [], [], []
    for u in range(dataset.num_groups):
        mask = groups == u
        diffs_u, z_u = dataset.diffs[mask], dataset.labels[mask]
        if opts.init is not None:
            theta0 = np.asarray(opts.init, dtype=float)[:, u]
        else:
            theta0 = np.zeros(d)
        theta, loss, it, pg = _fit_ball_mle(diffs_u, z_u, b_max, opts, theta0)
        thetas.append(theta)
        losses.append(loss * mask.sum())
        iters.append(it)
        pgs.append(pg)
    params = MaxMinParams(theta=np.column_stack(thetas), b_max=b_max)
    report = FitReport(
        final_loss=float(sum(losses) / dataset.n),
        iterations=max(iters),
        grad_norm=max(pgs),
        converged=max(pgs) <= opts.tol,
        wall_time=time.perf_counter() - t0,
    )
    return params, report


def params_to_json(sr=None, mm=None, report: FitReport = None) -> str:
    """Serialise fitted parameters and the fit report to JSON."""
    import json

    doc = {}
    if sr is not None:
        doc["b"] = sr.b.tolist()
        doc["w"] = sr.w.tolist()
        doc["b_max"] = sr.b_max
    if mm is not None:
        doc["theta"] = mm.theta.tolist()
        doc["b_max"] = mm.b_max
    if report is not None:
        doc["fit_report"] = {
            "final_loss": report.final_loss,
            "iterations": report.iterations,
            "grad_norm": report.grad_norm,
            "converged": report.converged,
            "wall_time": report.wall_time,
            "unidentified_groups": list(report.unidentified_groups),
        }
    return json.dumps(doc, indent=2)


def params_from_json(text: str):
    """Inverse of params_to_json; returns (SharedRepParams | None, MaxMinParams | None)."""
    import json

    doc = json.loads(text)
    sr = mm = None
    if "b" in doc:
        sr = SharedRepParams(b=np.array(doc["b"]), w=np.array(doc["w"]), b_max=float(doc["b_max"]))
    if "theta" in doc:
        mm = MaxMinParams(theta=np.array(doc["theta"]), b_max=float(doc["b_max"]))
    return sr, mm
