"""Bradley-Terry preference sampling and difference-feature statistics.

Datasets are lists of (prompt, first, second, label, group) records with
cached difference features delta_i = phi(x_i, y_i) - phi(x_i, y'_i).  The
pooled covariance Sigma = mean(delta delta^T) and per-group Sigma_u feed
the confidence-set geometry used by the estimators and policies.
"""

from dataclasses import dataclass, field
import csv
import io
import math

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .rng import stream
from .tabular_world import World


def bt_preference_prob(r1: float, r2: float) -> float:
    """P(first preferred) = sigmoid(r1 - r2), stable on both tails."""
    z = r1 - r2
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@dataclass(frozen=True)
class PreferenceRecord:
    prompt: int
    first: int
    second: int
    label: int
    group: int

    def __post_init__(self):
        if self.first == self.second:
            raise ValueError("first and second responses must differ")
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")
        if self.group < 0:
            raise ValueError("group must be nonnegative")


@dataclass(frozen=True)
class PreferenceDataset:
    records: tuple
    diffs: np.ndarray
    num_groups: int
    n_per_group: np.ndarray = field(default=None)

    def __post_init__(self):
        diffs = np.asarray(self.diffs, dtype=float)
        object.__setattr__(self, "diffs", diffs)
        counts = np.bincount(
            [r.group for r in self.records], minlength=self.num_groups
        ).astype(int)
        if self.n_per_group is None:
            object.__setattr__(self, "n_per_group", counts)
        elif not np.array_equal(np.asarray(self.n_per_group), counts):
            raise ValueError("n_per_group inconsistent with records")
        if len(self.records) != diffs.shape[0]:
            raise ValueError("diffs row count must equal record count")

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=float)

    @property
    def groups(self) -> np.ndarray:
        return np.array([r.group for r in self.records], dtype=int)

    @property
    def empty_groups(self) -> tuple:
        return tuple(int(u) for u in np.flatnonzero(self.n_per_group == 0))


@dataclass(frozen=True)
class CovarianceStats:
    sigma: np.ndarray
    sigma_per_group: tuple
    lam: float

    @property
    def dim(self) -> int:
        return self.sigma.shape[0]


def _dataset_from_arrays(world: World, prompts, firsts, seconds, labels, groups) -> PreferenceDataset:
    records = tuple(
        PreferenceRecord(int(x), int(y), int(yp), int(z), int(g))
        for x, y, yp, z, g in zip(prompts, firsts, seconds, labels, groups)
    )
    tab = world.phi.table
    diffs = tab[prompts, firsts] - tab[prompts, seconds]
    return PreferenceDataset(records=records, diffs=diffs, num_groups=world.config.num_groups)


def sample_dataset(
    world: World,
    n_total: int,
    proportions=None,
    prompt_sampling: str = "from_rho",
    response_pair_sampling: str = "uniform_without_replacement",
    seed: int = 0,
    group_mode: str = "iid",
) -> PreferenceDataset:
    """Draw a Bradley-Terry dataset with group-skewed annotators.

    Groups are i.i.d. from ``proportions`` (or fixed largest-remainder
    quotas with ``group_mode="quota"``); prompts follow rho or the uniform
    law; response pairs are uniform ordered distinct pairs, or two draws
    from the reference policy with ``response_pair_sampling="from_ref_policy"``;
    labels are Bernoulli(sigmoid(r_u(x,y) - r_u(x,y'))) under the record's
    group truth.  Deterministic given seed.
    """
    if n_total < 1:
        raise ValueError("n_total must be >= 1")
    ny = world.config.num_responses
    if ny < 2:
        raise ValueError("need at least 2 responses to form preference pairs")
    props = np.asarray(
        proportions if proportions is not None else world.config.group_proportions,
        dtype=float,
    )
    if props.shape != (world.config.num_groups,) or np.any(props < 0):
        raise ValueError("proportions must be a nonnegative vector of length num_groups")
    if abs(props.sum() - 1.0) > 1e-12:
        raise ValueError("proportions must sum to 1 within 1e-12")

    rng = stream(seed, "data")
    if group_mode == "iid":
        groups = rng.choice(len(props), size=n_total, p=props)
    elif group_mode == "quota":
        counts = _largest_remainder(props, n_total)
        groups = np.repeat(np.arange(len(props)), counts)
        rng.shuffle(groups)
    else:
        raise ValueError(f"unknown group_mode {group_mode!r}")

    if prompt_sampling == "from_rho":
        prompts = rng.choice(world.config.num_prompts, size=n_total, p=world.rho.rho)
    elif prompt_sampling == "uniform":
        prompts = rng.integers(0, world.config.num_prompts, size=n_total)
    else:
        raise ValueError(f"unknown prompt_sampling {prompt_sampling!r}")

    if response_pair_sampling == "uniform_without_replacement":
        firsts = rng.integers(0, ny, size=n_total)
        shift = rng.integers(1, ny, size=n_total)
        seconds = (firsts + shift) % ny
    elif response_pair_sampling == "from_ref_policy":
        ref = world.truth.ref_policy
        firsts = np.empty(n_total, dtype=int)
        seconds = np.empty(n_total, dtype=int)
        for i, x in enumerate(prompts):
            firsts[i] = rng.choice(ny, p=ref[x])
            row = ref[x].copy()
            row[firsts[i]] = 0.0
            row /= row.sum()
            seconds[i] = rng.choice(ny, p=row)
    else:
        raise ValueError(f"unknown response_pair_sampling {response_pair_sampling!r}")

    theta = world.truth.theta_star  # (d, U)
    tab = world.phi.table
    diffs = tab[prompts, firsts] - tab[prompts, seconds]
    margins = np.einsum("id,id->i", diffs, theta[:, groups].T)
    probs = 1.0 / (1.0 + np.exp(-np.clip(margins, -700, 700)))
    labels = (rng.random(n_total) < probs).astype(int)
    return _dataset_from_arrays(world, prompts, firsts, seconds, labels, groups)


def _largest_remainder(props: np.ndarray, n: int) -> np.ndarray:
    raw = props * n
    counts = np.floor(raw).astype(int)
    short = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def compute_covariances(dataset: PreferenceDataset, lam: float) -> CovarianceStats:
    """Pooled and per-group difference-feature covariances.

    Empty groups get a zero matrix; downstream inverse norms then rely on
    the ridge lam, which is stored here for that purpose.
    """
    d = dataset.diffs.shape[1]
    n = dataset.n
    sigma = dataset.diffs.T @ dataset.diffs / n
    sigma = 0.5 * (sigma + sigma.T)
    per_group = []
    groups = dataset.groups
    for u in range(dataset.num_groups):
        mask = groups == u
        nu = int(mask.sum())
        if nu == 0:
            per_group.append(np.zeros((d, d)))
            continue
        block = dataset.diffs[mask]
        s = block.T @ block / nu
        per_group.append(0.5 * (s + s.T))
    return CovarianceStats(sigma=sigma, sigma_per_group=tuple(per_group), lam=float(lam))


def weighted_norm(v: np.ndarray, m: np.ndarray, lam: float) -> float:
    """sqrt(v^T (M + lam I) v)."""
    v = np.asarray(v, dtype=float)
    a = np.asarray(m, dtype=float) + lam * np.eye(len(v))
    return float(np.sqrt(max(v @ a @ v, 0.0)))


def weighted_inv_norm(v: np.ndarray, m: np.ndarray, lam: float) -> float:
    """sqrt(v^T (M + lam I)^{-1} v) via a Cholesky solve."""
    v = np.asarray(v, dtype=float)
    a = np.asarray(m, dtype=float) + lam * np.eye(len(v))
    try:
        factor = cho_factor(a, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ValueError("M + lam I must be positive definite (need lam > 0)") from exc
    return float(np.sqrt(max(v @ cho_solve(factor, v), 0.0)))


def inv_metric_solver(m: np.ndarray, lam: float):
    """Factor (M + lam I) once; returns solve(x) for repeated inverse-metric work."""
    a = np.asarray(m, dtype=float) + lam * np.eye(m.shape[0])
    factor = cho_factor(a, lower=True)
    return lambda x: cho_solve(factor, np.asarray(x, dtype=float))


def dataset_to_csv(dataset: PreferenceDataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["prompt", "first", "second", "label", "group"])
    for r in dataset.records:
        writer.writerow([r.prompt, r.first, r.second, r.label, r.group])
    return buf.getvalue()


def dataset_from_csv(text: str, world: World) -> PreferenceDataset:
    """Rebuild a dataset (and its cached diffs) from CSV against a world."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header != ["prompt", "first", "second", "label", "group"]:
        raise ValueError("unexpected dataset CSV header")
    rows = [[int(v) for v in row] for row in reader if row]
    arr = np.array(rows, dtype=int).reshape(-1, 5)
    return _dataset_from_arrays(world, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4])
