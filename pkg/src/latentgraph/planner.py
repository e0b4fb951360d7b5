"""Keypoint-seeded cross-entropy-method planning and closed-loop evaluation.

The planner runs one CEM search per keypoint.  Branch ``i`` starts its first
pick around keypoint ``i`` and everything else around the workspace centre;
the executed action is the first step of the best sequence over all branches.
Candidates are scored by a *scorer*, any callable mapping action sequences
(B, T, 4) to returns (B,), so the learned model and analytic stubs are
interchangeable.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from . import keypoints as kp
from . import sim
from . import trainer as tr


@dataclass(frozen=True)
class PlanConfig:
    horizon: int = 3
    population: int = 32
    elites: int = 4
    iterations: int = 4
    init_std: float = 0.2
    pick_jitter: float = 0.05
    plain_cem: bool = False
    min_std: float = 1e-3

    def __post_init__(self):
        if self.horizon < 1 or self.iterations < 1 or self.population < 1:
            raise ValueError("horizon, iterations and population must be >= 1")
        if not 1 <= self.elites <= self.population:
            raise ValueError("need 1 <= elites <= population")


@dataclass
class PlanResult:
    action: np.ndarray  # (4,)
    sequence: np.ndarray  # (T, 4)
    value: float
    branch: int
    branch_values: list[float] = field(default_factory=list)
    elite_means: list[list[float]] = field(default_factory=list)  # [branch][iteration]

    def diagnostics(self) -> dict:
        return {"action": self.action.tolist(), "value": self.value, "branch": self.branch,
                "branch_values": self.branch_values, "elite_means": self.elite_means,
                "sequence": self.sequence.tolist()}


def plan(centers: np.ndarray, scorer, cfg: PlanConfig = PlanConfig(),
         rng: np.random.Generator | None = None) -> PlanResult:
    """CEM over action sequences, one branch per pick centre.

    ``centers`` (K, 2) are keypoint positions in workspace coordinates; with
    ``cfg.plain_cem`` a single branch starts at the workspace centre instead.
    Ties are broken by lowest branch index, then lowest sample index.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    if cfg.plain_cem:
        centers = np.full((1, 2), 0.5)
    nb, t, p, e = len(centers), cfg.horizon, cfg.population, cfg.elites
    mean = np.full((nb, t, 4), 0.5)
    std = np.full((nb, t, 4), cfg.init_std)
    if not cfg.plain_cem:
        mean[:, 0, :2] = centers
        std[:, 0, :2] = cfg.pick_jitter
    elite_seq = np.zeros((nb, 0, t, 4))
    elite_ret = np.zeros((nb, 0))
    elite_idx = np.zeros((nb, 0), dtype=np.int64)
    history = [[] for _ in range(nb)]
    for it in range(cfg.iterations):
        noise = rng.standard_normal((nb, p, t, 4))
        samples = np.clip(mean[:, None] + std[:, None] * noise, 0.0, 1.0)
        returns = np.asarray(scorer(samples.reshape(nb * p, t, 4)), dtype=np.float64).reshape(nb, p)
        seq = np.concatenate([elite_seq, samples], axis=1)
        ret = np.concatenate([elite_ret, returns], axis=1)
        idx = np.concatenate([elite_idx, np.broadcast_to(it * p + np.arange(p), (nb, p))], axis=1)
        new_seq, new_ret, new_idx = [], [], []
        for b in range(nb):
            order = np.lexsort((idx[b], -ret[b]))[:e]
            new_seq.append(seq[b, order])
            new_ret.append(ret[b, order])
            new_idx.append(idx[b, order])
            history[b].append(float(ret[b, order].mean()))
        elite_seq, elite_ret, elite_idx = np.stack(new_seq), np.stack(new_ret), np.stack(new_idx)
        mean = elite_seq.mean(axis=1)
        std = np.maximum(elite_seq.std(axis=1, ddof=1 if e > 1 else 0), cfg.min_std)
    values = elite_ret[:, 0]
    best = int(np.lexsort((np.arange(nb), -values))[0])
    sequence = elite_seq[best, 0]
    return PlanResult(sequence[0].copy(), sequence.copy(), float(values[best]), best,
                      [float(v) for v in values], history)


# -- scorers -------------------------------------------------------------------------

class ModelScorer:
    """Sum of predicted rewards (``learned``) or of goal rewards (``goal``)
    over an open-loop rollout from the current belief and graph."""

    def __init__(self, model: dyn.DynamicsModel, h: np.ndarray, raw_nodes: np.ndarray,
                 mode: str = "learned", goal: np.ndarray | None = None):
        if mode not in ("learned", "goal"):
            raise ValueError(f"unknown reward mode {mode!r}")
        if mode == "goal" and goal is None:
            raise ValueError("goal mode needs a goal pooled state")
        if raw_nodes.shape[0] != model.cfg.k:
            raise dyn.KMismatchError(f"graph has K={raw_nodes.shape[0]}, model expects K={model.cfg.k}")
        self.model, self.h, self.raw, self.mode, self.goal = model, h.reshape(1, -1), raw_nodes, mode, goal

    def __call__(self, actions: np.ndarray) -> np.ndarray:
        b = actions.shape[0]
        pooled, rewards = dyn.rollout(self.model, np.repeat(self.h, b, axis=0),
                                      np.repeat(self.raw[None], b, axis=0), actions.astype(np.float32))
        if self.mode == "learned":
            return rewards.sum(axis=1)
        return dyn.goal_reward(pooled, self.goal[None, None]).sum(axis=1)


# -- policies -------------------------------------------------------------------------

class RandomPolicy:
    """Uniform pick over object pixels, uniform place."""

    name = "random"

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng([seed, 5])

    def reset(self, episode_seed: int) -> None:
        self.rng = np.random.default_rng([self.seed, episode_seed, 5])

    def act(self, image: np.ndarray) -> np.ndarray:
        return tr.random_action(image, self.rng)


class PlannerPolicy:
    """Closed-loop model-predictive control with a learned model."""

    name = "planner"

    def __init__(self, model: dyn.DynamicsModel, cfg: PlanConfig = PlanConfig(),
                 detector: kp.LearnedDetector | None = None, mode: str = "learned",
                 goal: np.ndarray | None = None, seed: int = 0):
        self.model, self.cfg, self.detector, self.mode, self.goal = model, cfg, detector, mode, goal
        self.seed = seed
        self.reset(0)

    def reset(self, episode_seed: int) -> None:
        self.h = self.model.zero_belief(1)
        self.rng = np.random.default_rng([self.seed, episode_seed, 6])
        self.last: PlanResult | None = None

    def act(self, image: np.ndarray) -> np.ndarray:
        graph = kp.encode_image(image, self.detector, self.model.cfg.k)
        raw = graph.node_inputs()
        scorer = ModelScorer(self.model, self.h, raw, self.mode, self.goal)
        self.last = plan(graph.workspace_xy(), scorer, self.cfg, self.rng)
        action = self.last.action.astype(np.float32)
        self.h, _ = dyn.observe(self.model, self.h, raw[None], action[None])
        return action


def goal_pooled(model: dyn.DynamicsModel, task: sim.TaskSpec, cfg: sim.SimConfig = sim.SimConfig(),
                detector: kp.LearnedDetector | None = None) -> np.ndarray:
    """Encoded pooled state of the canonical goal configuration."""
    img = sim.render_depth(sim.goal_state(task, cfg), cfg.image_size, cfg.image_size, cfg)
    raw = kp.encode_image(img, detector, model.cfg.k).node_inputs()
    with dyn.ad.no_grad():
        return dyn.encode(model, raw[None]).data[0]


@dataclass
class EvalResult:
    success_rate: float
    mean_best_reward: float
    successes: list[bool]
    best_rewards: list[float]


def evaluate_policy(task: sim.TaskSpec, policy, episodes: int, seed: int = 0,
                    cfg: sim.SimConfig = sim.SimConfig()) -> EvalResult:
    """Closed-loop rollouts.  An episode succeeds if any post-action state
    meets the task threshold within ``task.max_steps`` actions."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    successes, best = [], []
    size = cfg.image_size
    for e in range(episodes):
        es = tr.episode_seed(seed, e)
        state = sim.reset(task, es, cfg)
        policy.reset(es)
        ok, top = False, -np.inf
        for _ in range(task.max_steps):
            img = sim.render_depth(state, size, size, cfg)
            state = sim.step(state, sim.Action.from_array(policy.act(img)), cfg)
            r = sim.reward(state, task, cfg)
            top = max(top, r)
            if r >= task.success_threshold:
                ok = True
                break
        successes.append(ok)
        best.append(float(top))
    return EvalResult(float(np.mean(successes)), float(np.mean(best)), successes, best)
