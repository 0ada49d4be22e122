"""Finite synthetic worlds for preference learning experiments.

A world is a prompt distribution rho over |X| prompts, a response space of
size |Y|, an explicit feature table phi(x, y) in R^d, and a ground-truth
reward model theta_u = B w_u per annotator group, where B is a shared
d x K extractor with bounded columns and each w_u lives on the simplex.
"""

from dataclasses import dataclass, field
from typing import NamedTuple
import json

import numpy as np

from .rng import stream

# Floor applied to rho before renormalisation; keeps rho_min certifiably > 0.
RHO_FLOOR = 1e-3


@dataclass(frozen=True)
class WorldConfig:
    num_prompts: int
    num_responses: int
    feature_dim: int
    shared_dim: int
    num_groups: int
    l_max: float = 1.0
    b_max: float = 1.0
    group_proportions: tuple = ()
    rng_seed: int = 0
    # Center features per prompt before rescaling.  Difference features,
    # preference probabilities and per-group suboptimalities are invariant
    # to this, and it pins E_{y~ref}[r(x, y)] = 0, the representative on
    # which worst-group reward/entropy accounting is exact.
    center_features: bool = True

    def __post_init__(self):
        if self.num_prompts < 1:
            raise ValueError("num_prompts must be >= 1")
        if self.num_responses < 1:
            raise ValueError("num_responses must be >= 1")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.shared_dim < 1 or self.shared_dim > self.feature_dim:
            raise ValueError("shared_dim must satisfy 1 <= shared_dim <= feature_dim")
        if self.num_groups < 1:
            raise ValueError("num_groups must be >= 1")
        if self.l_max <= 0:
            raise ValueError("l_max must be positive")
        if self.b_max <= 0:
            raise ValueError("b_max must be positive")
        props = self.group_proportions
        if not props:
            props = tuple([1.0 / self.num_groups] * self.num_groups)
            object.__setattr__(self, "group_proportions", props)
        props = tuple(float(p) for p in props)
        object.__setattr__(self, "group_proportions", props)
        if len(props) != self.num_groups:
            raise ValueError("group_proportions length must equal num_groups")
        if any(p < 0 for p in props):
            raise ValueError("group_proportions entries must be nonnegative")
        if abs(sum(props) - 1.0) > 1e-12:
            raise ValueError("group_proportions must sum to 1 within 1e-12")
        if not (0 <= int(self.rng_seed) < 2**64):
            raise ValueError("rng_seed must fit in 64 unsigned bits")


@dataclass(frozen=True)
class FeatureMap:
    """Explicit embedding table, shape (|X|, |Y|, d), with ||phi|| <= l_max."""

    table: np.ndarray
    l_max: float

    def __post_init__(self):
        tab = np.asarray(self.table, dtype=float)
        object.__setattr__(self, "table", tab)
        if tab.ndim != 3:
            raise ValueError("feature table must have shape (|X|, |Y|, d)")
        norms = np.linalg.norm(tab, axis=2)
        if norms.max(initial=0.0) > self.l_max * (1 + 1e-12):
            raise ValueError("feature norm exceeds l_max")

    @property
    def num_prompts(self) -> int:
        return self.table.shape[0]

    @property
    def num_responses(self) -> int:
        return self.table.shape[1]

    @property
    def dim(self) -> int:
        return self.table.shape[2]


@dataclass(frozen=True)
class PromptDistribution:
    rho: np.ndarray
    rho_min: float = field(default=None)

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        object.__setattr__(self, "rho", rho)
        if rho.ndim != 1:
            raise ValueError("rho must be a vector")
        if np.any(rho < 0):
            raise ValueError("rho entries must be nonnegative")
        if abs(rho.sum() - 1.0) > 1e-12:
            raise ValueError("rho must sum to 1 within 1e-12")
        rmin = float(rho.min())
        if self.rho_min is None:
            object.__setattr__(self, "rho_min", rmin)
        elif abs(self.rho_min - rmin) > 1e-12:
            raise ValueError("rho_min must equal the minimum entry of rho")
        if rmin <= 0:
            raise ValueError("rho_min must be positive")


@dataclass(frozen=True)
class GroundTruth:
    """Shared extractor, group weights, cached products, reference policy."""

    b_star: np.ndarray
    w_star: np.ndarray
    theta_star: np.ndarray
    ref_policy: np.ndarray
    b_max: float

    def __post_init__(self):
        b = np.asarray(self.b_star, dtype=float)
        w = np.asarray(self.w_star, dtype=float)
        th = np.asarray(self.theta_star, dtype=float)
        ref = np.asarray(self.ref_policy, dtype=float)
        for name, arr in (("b_star", b), ("w_star", w), ("theta_star", th), ("ref_policy", ref)):
            object.__setattr__(self, name, arr)
        if np.linalg.norm(b, axis=0).max() > self.b_max * (1 + 1e-9):
            raise ValueError("b_star column norm exceeds b_max")
        if np.any(w < -1e-12) or np.any(np.abs(w.sum(axis=0) - 1.0) > 1e-12):
            raise ValueError("w_star columns must lie on the simplex within 1e-12")
        if np.max(np.abs(th - b @ w)) > 1e-12:
            raise ValueError("theta_star must equal b_star @ w_star within 1e-12")
        if np.any(ref <= 0) or np.any(np.abs(ref.sum(axis=1) - 1.0) > 1e-10):
            raise ValueError("ref_policy rows must be strictly positive distributions")

    @property
    def num_groups(self) -> int:
        return self.w_star.shape[1]


class World(NamedTuple):
    """Bundle returned by build_world; unpacks as (config, phi, rho, truth)."""

    config: WorldConfig
    phi: FeatureMap
    rho: PromptDistribution
    truth: GroundTruth


def sample_simplex(rng: np.random.Generator, k: int, n: int = 1) -> np.ndarray:
    """Uniform draws from the (k-1)-simplex via sorted uniform spacings.

    Returns shape (k, n): one simplex point per column.
    """
    u = rng.random((k - 1, n))
    u.sort(axis=0)
    pts = np.diff(np.vstack([np.zeros((1, n)), u, np.ones((1, n))]), axis=0)
    return pts


def build_world(config: WorldConfig) -> World:
    """Construct a world deterministically from config.rng_seed.

    Features come from a spherical Gaussian, centered per prompt when
    configured, then rescaled so the maximum norm is exactly l_max;
    b_star columns are rescaled to norm b_max; w_star columns are uniform
    on the simplex; rho is a Dirichlet draw floored at RHO_FLOOR and
    renormalised; the reference policy is uniform per prompt.
    """
    rng = stream(config.rng_seed, "world")
    nx, ny, d, k, u = (
        config.num_prompts,
        config.num_responses,
        config.feature_dim,
        config.shared_dim,
        config.num_groups,
    )

    table = rng.standard_normal((nx, ny, d))
    if config.center_features and ny > 1:
        table -= table.mean(axis=1, keepdims=True)
    max_norm = np.linalg.norm(table, axis=2).max()
    if max_norm > 0:
        table *= config.l_max / max_norm
    phi = FeatureMap(table=table, l_max=config.l_max)

    raw = rng.dirichlet(np.ones(nx)) if nx > 1 else np.ones(1)
    raw = np.maximum(raw, RHO_FLOOR)
    rho = PromptDistribution(rho=raw / raw.sum())

    b = rng.standard_normal((d, k))
    b *= config.b_max / np.linalg.norm(b, axis=0)
    w = sample_simplex(rng, k, u) if k > 1 else np.ones((1, u))
    theta = b @ w
    ref = np.full((nx, ny), 1.0 / ny)
    truth = GroundTruth(b_star=b, w_star=w, theta_star=theta, ref_policy=ref, b_max=config.b_max)
    return World(config=config, phi=phi, rho=rho, truth=truth)


def reward_of(theta: np.ndarray, phi: FeatureMap, x: int, y: int) -> float:
    """Linear reward <phi(x, y), theta>."""
    return float(phi.table[x, y] @ np.asarray(theta, dtype=float))


def reward_table(theta: np.ndarray, phi: FeatureMap) -> np.ndarray:
    """All rewards at once: (|X|, |Y|) table of <phi(x, y), theta>."""
    return phi.table @ np.asarray(theta, dtype=float)


def reward_gap_xi(phi: FeatureMap, b: np.ndarray, w: np.ndarray) -> float:
    """max over x of min over y != y' of |<phi(x,y) - phi(x,y'), B w>|.

    This is the inner quantity of the reward-gap infimum at a fixed (B, w);
    the infimum over the parameter class is sampled separately
    (experiment_harness.estimate_xi_inf).
    """
    if phi.num_responses < 2:
        raise ValueError("reward gap undefined for fewer than 2 responses")
    theta = np.asarray(b, dtype=float) @ np.asarray(w, dtype=float)
    r = reward_table(theta, phi)
    gaps = np.abs(r[:, :, None] - r[:, None, :])
    iu = np.triu_indices(phi.num_responses, k=1)
    return float(gaps[:, iu[0], iu[1]].min(axis=1).max())


def world_to_json(world: World) -> str:
    """Serialise a world to JSON with 17-significant-digit floats."""
    cfg = world.config
    doc = {
        "config": {
            "num_prompts": cfg.num_prompts,
            "num_responses": cfg.num_responses,
            "feature_dim": cfg.feature_dim,
            "shared_dim": cfg.shared_dim,
            "num_groups": cfg.num_groups,
            "l_max": cfg.l_max,
            "b_max": cfg.b_max,
            "group_proportions": list(cfg.group_proportions),
            "rng_seed": cfg.rng_seed,
            "center_features": cfg.center_features,
        },
        "features": world.phi.table.reshape(-1).tolist(),
        "rho": world.rho.rho.tolist(),
        "b_star": world.truth.b_star.tolist(),
        "w_star": world.truth.w_star.tolist(),
        "ref_policy": world.truth.ref_policy.tolist(),
    }
    return _dumps_17g(doc)


def world_from_json(text: str) -> World:
    doc = json.loads(text)
    cfg = WorldConfig(
        num_prompts=int(doc["config"]["num_prompts"]),
        num_responses=int(doc["config"]["num_responses"]),
        feature_dim=int(doc["config"]["feature_dim"]),
        shared_dim=int(doc["config"]["shared_dim"]),
        num_groups=int(doc["config"]["num_groups"]),
        l_max=float(doc["config"]["l_max"]),
        b_max=float(doc["config"]["b_max"]),
        group_proportions=tuple(doc["config"]["group_proportions"]),
        rng_seed=int(doc["config"]["rng_seed"]),
        center_features=bool(doc["config"].get("center_features", True)),
    )
    table = np.array(doc["features"], dtype=float).reshape(
        cfg.num_prompts, cfg.num_responses, cfg.feature_dim
    )
    phi = FeatureMap(table=table, l_max=cfg.l_max)
    rho = PromptDistribution(rho=np.array(doc["rho"], dtype=float))
    b = np.array(doc["b_star"], dtype=float)
    w = np.array(doc["w_star"], dtype=float)
    truth = GroundTruth(
        b_star=b,
        w_star=w,
        theta_star=b @ w,
        ref_policy=np.array(doc["ref_policy"], dtype=float),
        b_max=cfg.b_max,
    )
    return World(config=cfg, phi=phi, rho=rho, truth=truth)


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return format(x, ".17g")
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return json.dumps(x)
    if isinstance(x, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in x) + "]"
    if isinstance(x, dict):
        return "{" + ", ".join(f"{json.dumps(k)}: {_fmt(v)}" for k, v in x.items()) + "}"
    raise TypeError(f"cannot serialise {type(x)}")


def _dumps_17g(doc) -> str:
    # json.dump cannot format floats; emit the (flat, known) schema directly.
    return _fmt(doc)
