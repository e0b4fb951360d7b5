"""Recurrent graph dynamics over keypoint nodes.

Shapes are batched throughout: nodes are (B, K, D), beliefs (B, d_h),
actions (B, 4), pooled states (B, P).  One transition:

    u_i   = [e_i, h, a]                       node input
    v'_i  = ffn(attention(u)_i + lin(u_i))    predicted next node embedding
    pool  = [mean_i v'_i, sum_i exp(clamp(theta^T v'_i))]
    h'    = gru(h, pool)

Observed graphs enter through ``embed`` (standardized raw node vectors to
d'), and ``encode`` pools embedded observations the same way predictions
are pooled, so predicted and observed states live in one space.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor

MGF_CLAMP = 10.0


@dataclass(frozen=True)
class ModelConfig:
    k: int = 3
    d_in: int = 5
    d_model: int = 32
    d_hidden: int = 64
    heads: int = 2
    d_k: int = 16
    m: int = 8
    d_ffn: int = 64
    no_graph: bool = False
    no_rnn: bool = False
    max_pool: bool = False

    @property
    def pooled_dim(self) -> int:
        return self.d_model if self.max_pool else self.d_model + self.m

    @property
    def node_input_dim(self) -> int:
        return self.d_model + (0 if self.no_rnn else self.d_hidden) + 4


class KMismatchError(ValueError):
    pass


# -- small helpers -------------------------------------------------------------------

def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (..., I) @ w (I, O) + b, for any number of leading dims."""
    lead = x.shape[:-1]
    y = ad.matmul(ad.reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = y + ad.expand(b, y.shape[0])
    return ad.reshape(y, lead + (w.shape[1],))


def tile_nodes(x: Tensor, k: int) -> Tensor:
    """(B, D) -> (B, K, D)."""
    return ad.transpose(ad.expand(x, k), (1, 0, 2))


# -- model ---------------------------------------------------------------------------

class DynamicsModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params = ad.ParamStore()
        self.input_mean = np.zeros(cfg.d_in, dtype=np.float32)
        self.input_std = np.ones(cfg.d_in, dtype=np.float32)
        rng = np.random.default_rng(seed)
        p = self.params
        c = cfg

        def lin(name, i, o, bias=True):
            p.add(f"{name}/w", ad.glorot(rng, i, o))
            if bias:
                p.add(f"{name}/b", np.zeros(o, dtype=np.float32))

        lin("embed/l1", c.d_in, c.d_ffn)
        lin("embed/l2", c.d_ffn, c.d_model)
        u = c.node_input_dim
        if c.no_graph:
            lin("node/l1", u, c.d_ffn)
            lin("node/l2", c.d_ffn, c.d_model)
        else:
            for h in range(c.heads):
                for q in ("q", "k", "v"):
                    lin(f"tgconv/head{h}/{q}", u, c.d_k, bias=False)
            lin("tgconv/out", c.heads * c.d_k, c.d_model)
        lin("tgconv/res", u, c.d_model, bias=False)
        lin("ffn/l1", c.d_model, c.d_ffn)
        lin("ffn/l2", c.d_ffn, c.d_model)
        if not c.max_pool:
            p.add("pool/theta", rng.normal(0.0, 0.1, (c.d_model, c.m)).astype(np.float32))
        if not c.no_rnn:
            x = c.pooled_dim + c.d_hidden
            lin("gru/z", x, c.d_hidden)
            lin("gru/r", x, c.d_hidden)
            lin("gru/n_in", c.pooled_dim, c.d_hidden)
            lin("gru/n_h", c.d_hidden, c.d_hidden, bias=False)
        lin("reward", c.pooled_dim, 1)

    # persistence
    def flags(self) -> dict:
        return {"NoGraph": self.cfg.no_graph, "NoRNN": self.cfg.no_rnn, "MaxPool": self.cfg.max_pool}

    def save(self, path, metadata: dict | None = None) -> None:
        arrays = {**{f"params/{k}": v for k, v in self.params.arrays().items()},
                  "stats/mean": self.input_mean, "stats/std": self.input_std}
        meta = {"model": dataclasses.asdict(self.cfg), "flags": self.flags(), **(metadata or {})}
        checkpoint.save(path, arrays, meta, namespace="dynamics")

    @classmethod
    def load(cls, path) -> tuple["DynamicsModel", dict]:
        arrays, meta = checkpoint.load(path, namespace="dynamics")
        model = cls(ModelConfig(**meta["model"]))
        model.params.load_arrays({k[len("params/"):]: v for k, v in arrays.items() if k.startswith("params/")})
        model.input_mean = arrays["stats/mean"].astype(np.float32)
        model.input_std = arrays["stats/std"].astype(np.float32)
        return model, meta

    def copy(self) -> "DynamicsModel":
        out = DynamicsModel.__new__(DynamicsModel)
        out.cfg, out.params = self.cfg, self.params.copy()
        out.input_mean, out.input_std = self.input_mean.copy(), self.input_std.copy()
        return out

    def fit_input_stats(self, raw: np.ndarray) -> None:
        """Standardization constants from a stack of raw node vectors (..., d_in)."""
        flat = np.asarray(raw, dtype=np.float64).reshape(-1, self.cfg.d_in)
        self.input_mean = flat.mean(axis=0).astype(np.float32)
        self.input_std = np.maximum(flat.std(axis=0), 1e-6).astype(np.float32)

    def zero_belief(self, batch: int = 1) -> np.ndarray:
        return np.zeros((batch, self.cfg.d_hidden), dtype=np.float32)


# -- building blocks -------------------------------------------------------------------

def embed(model: DynamicsModel, raw) -> Tensor:
    """Raw node vectors (B, K, d_in) -> node embeddings (B, K, d')."""
    raw = np.asarray(raw.data if isinstance(raw, Tensor) else raw, dtype=np.float32)
    x = Tensor((raw - model.input_mean) / model.input_std)
    p = model.params
    return linear(ad.relu(linear(x, p["embed/l1/w"], p["embed/l1/b"])), p["embed/l2/w"], p["embed/l2/b"])


def tgconv(nodes, params, heads: int, prefix: str = "tgconv") -> tuple[Tensor, Tensor]:
    """Multi-head scaled dot-product attention over a fully connected node set.

    ``nodes`` is (B, K, D) or (K, D).  Returns node outputs (same leading
    dims, d') and the head-averaged attention (row-stochastic K x K).
    """
    u = _t(nodes)
    single = u.ndim == 2
    if single:
        u = ad.reshape(u, (1,) + u.shape)
    outs, attn = [], None
    for h in range(heads):
        q = linear(u, params[f"{prefix}/head{h}/q/w"])
        k = linear(u, params[f"{prefix}/head{h}/k/w"])
        v = linear(u, params[f"{prefix}/head{h}/v/w"])
        w = ad.softmax(ad.matmul(q, ad.swap_last(k)) * (1.0 / math.sqrt(q.shape[-1])), axis=-1)
        outs.append(ad.matmul(w, v))
        attn = w if attn is None else attn + w
    mixed = linear(ad.concat(outs, axis=-1), params[f"{prefix}/out/w"], params[f"{prefix}/out/b"])
    out = mixed + linear(u, params[f"{prefix}/res/w"])
    attn = attn * (1.0 / heads)
    if single:
        out, attn = ad.reshape(out, out.shape[1:]), ad.reshape(attn, attn.shape[1:])
    return out, attn


def mgf_pool(node_out, theta) -> Tensor:
    """[mean over nodes, per-direction sum of exp(clamp(theta_c . v_i))].

    ``node_out`` is (B, K, d') or (K, d'); ``theta`` is (d', m).
    """
    v = _t(node_out)
    single = v.ndim == 2
    if single:
        v = ad.reshape(v, (1,) + v.shape)
    b, k, d = v.shape
    proj = ad.reshape(ad.matmul(ad.reshape(v, (b * k, d)), _t(theta)), (b, k, -1))
    moments = ad.sum_(ad.exp(ad.clamp(proj, -MGF_CLAMP, MGF_CLAMP)), axis=1)
    out = ad.concat([ad.mean(v, axis=1), moments], axis=-1)
    return ad.reshape(out, out.shape[1:]) if single else out


def max_pool(node_out) -> Tensor:
    v = _t(node_out)
    return ad.amax(v, axis=-2)


def belief_update(h, pooled, params, prefix: str = "gru") -> Tensor:
    """Gated recurrent update.  z is the update gate (z=0 keeps h)."""
    h, pooled = _t(h), _t(pooled)
    single = h.ndim == 1
    if single:
        h, pooled = ad.reshape(h, (1, -1)), ad.reshape(pooled, (1, -1))
    x = ad.concat([pooled, h], axis=-1)
    z = ad.sigmoid(linear(x, params[f"{prefix}/z/w"], params[f"{prefix}/z/b"]))
    r = ad.sigmoid(linear(x, params[f"{prefix}/r/w"], params[f"{prefix}/r/b"]))
    n = ad.tanh(linear(pooled, params[f"{prefix}/n_in/w"], params[f"{prefix}/n_in/b"])
                + linear(r * h, params[f"{prefix}/n_h/w"]))
    out = (1.0 - z) * h + z * n
    return ad.reshape(out, (-1,)) if single else out


def pool(model: DynamicsModel, node_out: Tensor) -> Tensor:
    if model.cfg.max_pool:
        return max_pool(node_out)
    return mgf_pool(node_out, model.params["pool/theta"])


def encode(model: DynamicsModel, raw) -> Tensor:
    """Pooled state of an observed graph batch (B, K, d_in) -> (B, P)."""
    return pool(model, embed(model, raw))


def node_transition(model: DynamicsModel, u: Tensor) -> Tensor:
    p, c = model.params, model.cfg
    if c.no_graph:
        mixed = linear(ad.relu(linear(u, p["node/l1/w"], p["node/l1/b"])), p["node/l2/w"], p["node/l2/b"])
        z = mixed + linear(u, p["tgconv/res/w"])
    else:
        z, _ = tgconv(u, p, c.heads)
    return z + linear(ad.relu(linear(z, p["ffn/l1/w"], p["ffn/l1/b"])), p["ffn/l2/w"], p["ffn/l2/b"])


def step_dynamics(model: DynamicsModel, h, nodes, action) -> tuple[Tensor, Tensor, Tensor]:
    """One transition.  Returns (next belief, predicted pooled state, predicted nodes).

    ``nodes`` are node embeddings (B, K, d'), from :func:`embed` or from the
    previous step's prediction.
    """
    c = model.cfg
    nodes, action = _t(nodes), _t(action)
    if nodes.shape[1] != c.k:
        raise KMismatchError(f"graph has K={nodes.shape[1]} nodes, model expects K={c.k}")
    b = nodes.shape[0]
    parts = [nodes] if c.no_rnn else [nodes, tile_nodes(_t(h), c.k)]
    u = ad.concat(parts + [tile_nodes(action, c.k)], axis=-1)
    out = node_transition(model, u)
    pooled = pool(model, out)
    if c.no_rnn:
        h_next = Tensor(np.zeros((b, c.d_hidden), dtype=np.float32))
    else:
        h_next = belief_update(h, pooled, model.params)
    return h_next, pooled, out


def predict_reward(model: DynamicsModel, pooled) -> Tensor:
    """Affine reward head: (B, P) -> (B,)."""
    p = model.params
    r = linear(_t(pooled), p["reward/w"], p["reward/b"])
    return ad.reshape(r, r.shape[:-1])


def goal_reward(pooled: np.ndarray, pooled_goal: np.ndarray) -> np.ndarray | float:
    """Negative Euclidean distance along the last axis."""
    a, g = np.asarray(pooled, dtype=np.float64), np.asarray(pooled_goal, dtype=np.float64)
    if a.shape[-1] != g.shape[-1]:
        raise ad.ShapeError(f"goal_reward: dims {a.shape[-1]} vs {g.shape[-1]}")
    out = -np.sqrt(((a - g) ** 2).sum(axis=-1))
    return float(out) if np.ndim(out) == 0 else out


def observe(model: DynamicsModel, h, raw_nodes, action) -> tuple[np.ndarray, Tensor]:
    """Advance the belief with an observed graph and the action taken from it."""
    with ad.no_grad():
        nodes = embed(model, raw_nodes)
        h_next, pooled, _ = step_dynamics(model, h, nodes, action)
    return h_next.data, pooled


def rollout(model: DynamicsModel, h, raw_nodes, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Open-loop predictions from an observed graph.

    ``actions`` is (B, T, 4).  Returns pooled predictions (B, T, P) and
    predicted rewards (B, T), without recording a tape.
    """
    with ad.no_grad():
        nodes = embed(model, raw_nodes)
        h = _t(h)
        pooled_seq, rewards = [], []
        for t in range(actions.shape[1]):
            h, pooled, nodes = step_dynamics(model, h, nodes, actions[:, t])
            pooled_seq.append(pooled.data)
            rewards.append(predict_reward(model, pooled).data)
    return np.stack(pooled_seq, axis=1), np.stack(rewards, axis=1)
