"""Data collection, dynamics training and evaluation metrics."""
from __future__ import annotations

import csv
import dataclasses
import io
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import dynamics as dyn
from . import keypoints as kp
from . import sim
from .autodiff import Tensor
from .logs import Episode

PLACE_MARGIN = 0.1


# -- collection ----------------------------------------------------------------------

def episode_seed(seed: int, index: int) -> int:
    return seed * 100_000 + index


def random_action(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Pick a uniform object pixel (its centre, in workspace coords); place uniformly."""
    h, w = image.shape
    pix = np.flatnonzero(image.reshape(-1) > 0)
    if len(pix) == 0:
        pick = rng.uniform(0.0, 1.0, 2)
    else:
        q = int(pix[rng.integers(len(pix))])
        pick = np.array([(q % w + 0.5) / w, (q // w + 0.5) / h])
    place = rng.uniform(PLACE_MARGIN, 1.0 - PLACE_MARGIN, 2)
    return np.concatenate([pick, place])


def scripted_action(state: sim.ParticleState, task: sim.TaskSpec, rng: np.random.Generator,
                    cfg: sim.SimConfig) -> np.ndarray:
    """A hand-written heuristic: move one rope end onto its goal end, or pull a
    cloth corner outwards."""
    pos = state.positions
    if task.kind == "rope":
        goal = sim.rope_goal(task, cfg)
        end = int(rng.integers(2))
        i = 0 if end == 0 else len(pos) - 1
        tgt = goal[0] if np.linalg.norm(pos[i, :2] - goal[0, :2]) < np.linalg.norm(pos[i, :2] - goal[-1, :2]) else goal[-1]
        return np.clip(np.concatenate([pos[i, :2], tgt[:2]]), 0.0, 1.0)
    rows, cols = state.grid
    corner = int(rng.choice([0, cols - 1, rows * cols - cols, rows * cols - 1]))
    c = pos[:, :2].mean(axis=0)
    away = pos[corner, :2] + 0.3 * (pos[corner, :2] - c)
    return np.clip(np.concatenate([pos[corner, :2], away]), 0.0, 1.0)


def collect(task: sim.TaskSpec, episodes: int, policy: str = "random", seed: int = 0,
            cfg: sim.SimConfig = sim.SimConfig(), steps: int | None = None) -> list[Episode]:
    """Roll out a behaviour policy; record depth frames, actions, rewards."""
    if policy not in ("random", "scripted"):
        raise ValueError(f"unknown policy {policy!r}")
    steps = task.max_steps if steps is None else steps
    size = cfg.image_size
    out = []
    for e in range(episodes):
        es = episode_seed(seed, e)
        rng = np.random.default_rng([es, 1])
        state = sim.reset(task, es, cfg)
        ep = Episode(task.task_id, es, cfg.config_hash(), extra={"image_size": size})
        img = sim.render_depth(state, size, size, cfg)
        ep.append(img, np.zeros(4), sim.reward(state, task, cfg), sim.is_success(state, task, cfg))
        for _ in range(steps):
            a = random_action(img, rng) if policy == "random" else scripted_action(state, task, rng, cfg)
            state = sim.step(state, sim.Action.from_array(a), cfg)
            img = sim.render_depth(state, size, size, cfg)
            ep.append(img, a, sim.reward(state, task, cfg), sim.is_success(state, task, cfg))
        out.append(ep)
    return out


# -- encoded datasets --------------------------------------------------------------------

@dataclass
class EncodedEpisode:
    raw: np.ndarray  # (T+1, K, d_in) node vectors per frame
    actions: np.ndarray  # (T, 4), actions[t] moves frame t to t+1
    rewards: np.ndarray  # (T+1,)


def encode_episode(ep: Episode, k: int, detector: kp.LearnedDetector | None = None) -> EncodedEpisode:
    raw = np.stack([kp.encode_image(f, detector, k).node_inputs() for f in ep.frames])
    return EncodedEpisode(raw, np.asarray(ep.actions[1:], dtype=np.float32).reshape(-1, 4),
                          np.asarray(ep.rewards, dtype=np.float32))


def encode_episodes(episodes, k: int, detector=None) -> list[EncodedEpisode]:
    return [encode_episode(ep, k, detector) for ep in episodes]


# -- losses ---------------------------------------------------------------------------

def _distances(pred: Tensor, other: Tensor) -> Tensor:
    return ad.l2norm(pred - other, axis=-1)


def _tile_negatives(pred: Tensor, n: int) -> Tensor:
    """(..., P) -> (..., N, P)."""
    e = ad.expand(pred, n)
    order = tuple(range(1, pred.ndim)) + (0, pred.ndim)
    return ad.transpose(e, order)


def dynamics_loss(pred, target, negatives=None, margin: float = 1.0, mode: str = "hinge") -> Tensor:
    """Contrastive transition loss summed over the unroll, averaged over the batch.

    Shapes: ``pred`` and ``target`` (T, P) or (B, T, P); ``negatives``
    (T, N, P) or (B, T, N, P).  ``mode`` is ``hinge`` (positive distance plus
    a margin hinge per negative), ``positive`` (no negatives) or ``infonce``
    (cross-entropy over negated distances).
    """
    pred, target = dyn._t(pred), dyn._t(target)
    if pred.shape != target.shape:
        raise ad.ShapeError(f"dynamics_loss: prediction {pred.shape} vs target {target.shape}")
    pos = _distances(pred, target)
    if mode == "positive":
        total = ad.sum_(pos)
    else:
        if negatives is None or dyn._t(negatives).shape[-2] == 0:
            raise ValueError("contrastive loss needs at least one negative")
        negatives = dyn._t(negatives)
        n = negatives.shape[-2]
        neg = _distances(_tile_negatives(pred, n), negatives)
        if mode == "hinge":
            total = ad.sum_(pos) + ad.sum_(ad.relu(margin - neg))
        elif mode == "infonce":
            logits = ad.concat([ad.reshape(-pos, pos.shape + (1,)), -neg], axis=-1)
            total = -ad.sum_(ad.slice_(ad.log_softmax(logits, axis=-1), (Ellipsis, 0)))
        else:
            raise ValueError(f"unknown loss mode {mode!r}")
    batch = pred.shape[0] if pred.ndim == 3 else 1
    return total * (1.0 / batch)


def reward_loss(pred, true) -> Tensor:
    """Sum of squared errors over the unroll, averaged over the batch."""
    pred, true = dyn._t(pred), dyn._t(true)
    if pred.shape != true.shape:
        raise ad.ShapeError(f"reward_loss: lengths differ, {pred.shape} vs {true.shape}")
    d = pred - true
    batch = pred.shape[0] if pred.ndim == 2 else 1
    return ad.sum_(d * d) * (1.0 / batch)


# -- training ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    t_ctx: int = 2
    t_unroll: int = 5
    negatives: int = 10
    margin: float = 1.0
    alpha: float = 1.0
    batch_size: int = 16
    epochs: int = 50
    lr: float = 1e-3
    seed: int = 0
    no_graph: bool = False
    no_rnn: bool = False
    no_contrastive: bool = False
    infonce: bool = False
    max_pool: bool = False

    def __post_init__(self):
        if self.t_unroll < 1 or self.t_ctx < 1:
            raise ValueError("t_ctx and t_unroll must be >= 1")
        if self.negatives < 1:
            raise ValueError("need at least one negative")
        if self.margin <= 0 or self.alpha < 0:
            raise ValueError("margin must be > 0 and alpha >= 0")

    @property
    def loss_mode(self) -> str:
        if self.infonce:
            return "infonce"
        return "positive" if self.no_contrastive else "hinge"

    def ablations(self) -> list[str]:
        names = {"no_graph": "NoGraph", "no_rnn": "NoRNN", "no_contrastive": "NoContrastive",
                 "infonce": "InfoNCE", "max_pool": "MaxPool"}
        return [v for k, v in names.items() if getattr(self, k)]

    @classmethod
    def with_ablations(cls, names, **kw) -> "TrainConfig":
        lookup = {"nograph": "no_graph", "nornn": "no_rnn", "nocontrastive": "no_contrastive",
                  "infonce": "infonce", "maxpool": "max_pool"}
        flags = {}
        for n in names:
            key = lookup.get(n.lower().replace("-", "").replace("_", ""))
            if key is None:
                raise ValueError(f"unknown ablation {n!r}; choose from NoGraph, NoRNN, NoContrastive, InfoNCE, MaxPool")
            flags[key] = True
        return cls(**{**kw, **flags})


class NonFiniteLossError(ad.GradientError):
    pass


def model_config_for(cfg: TrainConfig, k: int, d_in: int) -> dyn.ModelConfig:
    return dyn.ModelConfig(k=k, d_in=d_in, no_graph=cfg.no_graph, no_rnn=cfg.no_rnn, max_pool=cfg.max_pool)


def _windows(data: list[EncodedEpisode], length: int) -> list[tuple[int, int]]:
    return [(e, s) for e, ep in enumerate(data) for s in range(ep.raw.shape[0] - length + 1)]


def _sample_negatives(data: list[EncodedEpisode], offsets: np.ndarray, exclude: np.ndarray, n: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Frame ids (global) drawn uniformly from episodes other than ``exclude``."""
    total = offsets[-1]
    out = np.empty(exclude.shape + (n,), dtype=np.int64)
    for idx in np.ndindex(exclude.shape):
        e = exclude[idx]
        lo, hi = offsets[e], offsets[e + 1]
        draw = rng.integers(0, total - (hi - lo), n)
        out[idx] = np.where(draw >= lo, draw + (hi - lo), draw)
    return out


def batch_losses(model: dyn.DynamicsModel, cfg: TrainConfig, batch: list[tuple[int, int]],
                 data: list[EncodedEpisode], frames: np.ndarray, offsets: np.ndarray,
                 rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    """Dynamics and reward loss for a batch of (episode, start) windows."""
    length = cfg.t_ctx + cfg.t_unroll
    raw = np.stack([data[e].raw[s:s + length] for e, s in batch])  # (B, W, K, d)
    acts = np.stack([data[e].actions[s:s + length - 1] for e, s in batch])  # (B, W-1, 4)
    rew = np.stack([data[e].rewards[s + cfg.t_ctx:s + length] for e, s in batch])  # (B, T)
    b, w, k, d = raw.shape
    obs = ad.reshape(dyn.embed(model, raw.reshape(b * w, k, d)), (b, w, k, -1))
    h = Tensor(model.zero_belief(b))
    preds, nodes = [], None
    for t in range(length - 1):
        if t < cfg.t_ctx:
            nodes = ad.slice_(obs, (slice(None), t))
        h, pooled, nodes_out = dyn.step_dynamics(model, h, nodes, acts[:, t])
        if t >= cfg.t_ctx - 1:
            preds.append(pooled)
            nodes = nodes_out
    pred = ad.stack(preds, axis=1)  # (B, T, P)
    target_nodes = ad.slice_(obs, (slice(None), slice(cfg.t_ctx, length)))
    target = ad.reshape(dyn.pool(model, ad.reshape(target_nodes, (b * cfg.t_unroll, k, -1))), (b, cfg.t_unroll, -1))
    negatives = None
    if cfg.loss_mode != "positive":
        ids = _sample_negatives(data, offsets, np.repeat(np.array([e for e, _ in batch])[:, None], cfg.t_unroll, 1),
                                cfg.negatives, rng)
        neg = dyn.encode(model, frames[ids.reshape(-1)])
        negatives = ad.reshape(neg, (b, cfg.t_unroll, cfg.negatives, -1))
    l_d = dynamics_loss(pred, target, negatives, cfg.margin, cfg.loss_mode)
    r_hat = ad.reshape(dyn.predict_reward(model, ad.reshape(pred, (b * cfg.t_unroll, -1))), (b, cfg.t_unroll))
    l_r = reward_loss(r_hat, rew)
    return l_d, l_r


def train(dataset: list[EncodedEpisode], cfg: TrainConfig = TrainConfig(), model: dyn.DynamicsModel | None = None,
          log=None) -> tuple[dyn.DynamicsModel, list[dict]]:
    """Fit a dynamics model; returns it and per-epoch median losses.

    One epoch visits every window of ``t_ctx + t_unroll`` consecutive frames in
    the dataset once, in shuffled batches.
    """
    if not dataset:
        raise ValueError("empty dataset")
    length = cfg.t_ctx + cfg.t_unroll
    usable = [ep for ep in dataset if ep.raw.shape[0] >= length]
    if not usable:
        raise ValueError(f"no episode has the {length} frames a training window needs")
    k, d_in = dataset[0].raw.shape[1:]
    if model is None:
        model = dyn.DynamicsModel(model_config_for(cfg, k, d_in), seed=cfg.seed)
        model.fit_input_stats(np.concatenate([ep.raw for ep in dataset]))
    frames = np.concatenate([ep.raw for ep in usable])
    offsets = np.concatenate([[0], np.cumsum([ep.raw.shape[0] for ep in usable])])
    rng = np.random.default_rng([cfg.seed, 2])
    params = dict(model.params.items())
    curve = []
    step = 0
    starts = _windows(usable, length)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(starts))
        rows = []
        for bi, lo in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [starts[i] for i in order[lo:lo + cfg.batch_size]]
            model.params.zero_grad()
            l_d, l_r = batch_losses(model, cfg, batch, usable, frames, offsets, rng)
            loss = l_d + l_r * cfg.alpha if cfg.alpha > 0 else l_d
            if not np.isfinite(loss.item()):
                raise NonFiniteLossError(f"non-finite loss at epoch {epoch}, batch {bi} (global batch {step})")
            grads = ad.backward(loss, params)
            ad.adam_step(model.params, grads, cfg.lr)
            rows.append((l_d.item(), l_r.item(), loss.item()))
            step += 1
        med = np.median(np.array(rows), axis=0)
        curve.append({"epoch": epoch + 1, "L_D": float(med[0]), "L_R": float(med[1]), "L": float(med[2])})
        if log:
            log(f"epoch {epoch + 1}/{cfg.epochs} L_D {med[0]:.4f} L_R {med[1]:.5f} L {med[2]:.4f}")
    return model, curve


def curve_csv(curve: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["epoch", "L_D", "L_R", "L"], lineterminator="\n")
    writer.writeheader()
    for row in curve:
        writer.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


# -- evaluation -------------------------------------------------------------------------

def top1_from_arrays(pred: np.ndarray, true: np.ndarray, negatives: np.ndarray) -> float:
    """Fraction of queries whose prediction is strictly nearer its target than
    every negative.  pred/true (Q, P), negatives (Q, N, P)."""
    pred, true, negatives = (np.asarray(a, dtype=np.float64) for a in (pred, true, negatives))
    if len(pred) == 0:
        raise ValueError("no evaluation points")
    d_pos = np.sqrt(((pred - true) ** 2).sum(axis=-1))
    d_neg = np.sqrt(((pred[:, None] - negatives) ** 2).sum(axis=-1))
    return float(np.mean(d_pos < d_neg.min(axis=1)))


def prediction_points(model: dyn.DynamicsModel, data: list[EncodedEpisode], t_ctx: int = 2,
                      horizon: int = 20) -> tuple[np.ndarray, np.ndarray]:
    """Open-loop predicted pooled states and their frame ids (episode, frame).

    The belief is warmed up on ``t_ctx`` observed frames, then the model
    predicts up to ``horizon`` further frames from its own outputs.
    """
    preds, ids = [], []
    for e, ep in enumerate(data):
        n_frames = ep.raw.shape[0]
        if n_frames <= t_ctx:
            continue
        steps = min(horizon, n_frames - t_ctx)
        with ad.no_grad():
            obs = dyn.embed(model, ep.raw[: t_ctx])
            h = Tensor(model.zero_belief(1))
            nodes = None
            for t in range(t_ctx - 1 + steps):
                if t < t_ctx:
                    nodes = ad.slice_(obs, (slice(t, t + 1),))
                h, pooled, out = dyn.step_dynamics(model, h, nodes, ep.actions[t:t + 1])
                if t >= t_ctx - 1:
                    preds.append(pooled.data[0])
                    ids.append((e, t + 1))
                    nodes = out
    return np.array(preds), np.array(ids, dtype=np.int64).reshape(-1, 2)


def encoded_frames(model: dyn.DynamicsModel, data: list[EncodedEpisode]) -> np.ndarray:
    with ad.no_grad():
        return dyn.encode(model, np.concatenate([ep.raw for ep in data])).data


def sample_eval_negatives(n_frames: int, query_frames: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Per query, ``n`` distinct frame ids drawn uniformly from all frames except the query's own."""
    if n_frames - 1 < n:
        raise ValueError(f"need at least {n + 1} held-out frames for {n} negatives, have {n_frames}")
    out = np.empty((len(query_frames), n), dtype=np.int64)
    for i, q in enumerate(query_frames):
        draw = rng.choice(n_frames - 1, size=n, replace=False)
        out[i] = np.where(draw >= q, draw + 1, draw)
    return out


def top1_accuracy(model: dyn.DynamicsModel, heldout: list[EncodedEpisode], n_negatives: int = 50,
                  horizon: int = 20, t_ctx: int = 2, seed: int = 0, predictor=None) -> float:
    """Top-1 dynamics accuracy on held-out episodes.

    ``predictor``, if given, replaces the model's open-loop predictions: it
    maps (encoded frames (F, P), frame ids (Q, 2)) to predictions (Q, P).
    """
    offsets = np.concatenate([[0], np.cumsum([ep.raw.shape[0] for ep in heldout])])
    enc = encoded_frames(model, heldout)
    if predictor is None:
        pred, ids = prediction_points(model, heldout, t_ctx, horizon)
    else:
        ids = np.array([(e, t) for e, ep in enumerate(heldout)
                        for t in range(t_ctx, min(ep.raw.shape[0], t_ctx + horizon))])
        pred = predictor(enc, ids, offsets)
    q = offsets[ids[:, 0]] + ids[:, 1]
    neg = sample_eval_negatives(len(enc), q, n_negatives, np.random.default_rng([seed, 3]))
    return top1_from_arrays(pred, enc[q], enc[neg])


def oracle_predictor(enc: np.ndarray, ids: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Returns the true encoding of each queried frame."""
    return enc[offsets[ids[:, 0]] + ids[:, 1]]


# -- thresholds --------------------------------------------------------------------------

MIN_CALIBRATION_SAMPLES = 20


def calibrate_threshold(task: sim.TaskSpec, states_or_rewards, cfg: sim.SimConfig = sim.SimConfig()) -> float:
    """5th percentile of reward over scripted near-goal states."""
    vals = [sim.reward(s, task, cfg) if isinstance(s, sim.ParticleState) else float(s) for s in states_or_rewards]
    if len(vals) < MIN_CALIBRATION_SAMPLES:
        raise ValueError(f"calibration needs at least {MIN_CALIBRATION_SAMPLES} scripted states, got {len(vals)}")
    return float(np.percentile(np.asarray(vals, dtype=np.float64), 5))


def calibrated_task(task: sim.TaskSpec, states, cfg: sim.SimConfig = sim.SimConfig()) -> sim.TaskSpec:
    return dataclasses.replace(task, success_threshold=calibrate_threshold(task, states, cfg))
