"""Finite-difference cases: one small random instance per op and seed.

Each case returns ``(build, arrays)`` for :func:`autodiff.gradcheck`.  The
scalar is ``sum(op(inputs) * R)`` with a fixed random ``R`` so that every
entry of the Jacobian is exercised.  Inputs are drawn from [-1, 1], kept away
from kinks (relu, abs, clamp edges) and, for log/sqrt/div, from the domain
boundary.
"""
import numpy as np

from latentgraph import autodiff as ad
from latentgraph import dynamics as dyn
from latentgraph.autodiff import Tensor


def _u(rng, *shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, shape)


def _away(rng, *shape, gap=0.05):
    x = _u(rng, *shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


def _project(rng, fn):
    cache = {}

    def build(ts):
        out = fn(ts)
        if "r" not in cache:
            cache["r"] = rng.uniform(-1, 1, out.shape)
        return ad.sum_(out * Tensor(cache["r"]))

    return build


def _case(fn, *arrays_fn):
    def make(rng):
        arrays = [f(rng) for f in arrays_fn]
        return _project(rng, fn), arrays
    return make


OP_CASES = {
    "add": _case(lambda t: t[0] + t[1], lambda r: _u(r, 3, 4), lambda r: _u(r, 3, 4)),
    "add_scalar": _case(lambda t: t[0] + t[1], lambda r: _u(r, 3, 4), lambda r: _u(r)),
    "sub": _case(lambda t: t[0] - t[1], lambda r: _u(r, 5), lambda r: _u(r, 5)),
    "mul": _case(lambda t: t[0] * t[1], lambda r: _u(r, 2, 3), lambda r: _u(r, 2, 3)),
    "div": _case(lambda t: t[0] / t[1], lambda r: _u(r, 4), lambda r: _u(r, 4, lo=0.5, hi=1.0)),
    "neg": _case(lambda t: -t[0], lambda r: _u(r, 4)),
    "exp": _case(lambda t: ad.exp(t[0]), lambda r: _u(r, 3, 3)),
    "log": _case(lambda t: ad.log(t[0]), lambda r: _u(r, 4, lo=0.2, hi=1.0)),
    "sqrt": _case(lambda t: ad.sqrt(t[0]), lambda r: _u(r, 4, lo=0.2, hi=1.0)),
    "tanh": _case(lambda t: ad.tanh(t[0]), lambda r: _u(r, 6)),
    "sigmoid": _case(lambda t: ad.sigmoid(t[0]), lambda r: _u(r, 6)),
    "relu": _case(lambda t: ad.relu(t[0]), lambda r: _away(r, 8)),
    "abs": _case(lambda t: ad.abs_(t[0]), lambda r: _away(r, 8)),
    "clamp": _case(lambda t: ad.clamp(t[0], -0.5, 0.5),
                   lambda r: np.where(np.abs(np.abs(x := _u(r, 8)) - 0.5) < 0.05, 0.0, x)),
    "matmul": _case(lambda t: ad.matmul(t[0], t[1]), lambda r: _u(r, 3, 4), lambda r: _u(r, 4, 2)),
    "matmul_batched": _case(lambda t: ad.matmul(t[0], t[1]), lambda r: _u(r, 2, 3, 4), lambda r: _u(r, 2, 4, 3)),
    "transpose": _case(lambda t: ad.transpose(t[0], (2, 0, 1)), lambda r: _u(r, 2, 3, 4)),
    "reshape": _case(lambda t: ad.reshape(t[0], (6, 2)), lambda r: _u(r, 3, 4)),
    "expand": _case(lambda t: ad.expand(t[0], 3), lambda r: _u(r, 2, 2)),
    "slice": _case(lambda t: ad.slice_(t[0], (slice(None), slice(1, None, 2))), lambda r: _u(r, 3, 5)),
    "slice_fancy": _case(lambda t: ad.slice_(t[0], ([0, 2, 0], slice(None))), lambda r: _u(r, 3, 2)),
    "concat": _case(lambda t: ad.concat([t[0], t[1]], axis=1), lambda r: _u(r, 2, 3), lambda r: _u(r, 2, 1)),
    "stack": _case(lambda t: ad.stack([t[0], t[1]], axis=1), lambda r: _u(r, 2, 3), lambda r: _u(r, 2, 3)),
    "upsample2x": _case(lambda t: ad.upsample2x(t[0]), lambda r: _u(r, 2, 2, 3)),
    "sum": _case(lambda t: ad.sum_(t[0], axis=1), lambda r: _u(r, 3, 4)),
    "mean": _case(lambda t: ad.mean(t[0], axis=0), lambda r: _u(r, 3, 4)),
    "amax": _case(lambda t: ad.amax(t[0], axis=1), lambda r: _u(r, 3, 5)),
    "max_spatial": _case(lambda t: ad.max_spatial(t[0]), lambda r: _u(r, 2, 3, 3)),
    "softmax": _case(lambda t: ad.softmax(t[0], axis=-1), lambda r: _u(r, 3, 4)),
    "log_softmax": _case(lambda t: ad.log_softmax(t[0], axis=-1), lambda r: _u(r, 3, 4)),
    "l2norm": _case(lambda t: ad.l2norm(t[0], axis=-1), lambda r: _u(r, 3, 4)),
    "conv2d": _case(lambda t: ad.conv2d(t[0], t[1], t[2]), lambda r: _u(r, 1, 2, 4, 5),
                    lambda r: _u(r, 2, 2, 3, 3), lambda r: _u(r, 2)),
    "conv2d_1x1": _case(lambda t: ad.conv2d(t[0], t[1]), lambda r: _u(r, 3, 3, 3), lambda r: _u(r, 2, 3, 1, 1)),
}


def check_case(name, seed, eps=1e-4, rtol=1e-3, atol=1e-5):
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    build, arrays = OP_CASES[name](rng)
    return ad.gradcheck(build, arrays, eps=eps, rtol=rtol, atol=atol)


# -- the full transition on a tiny configuration ------------------------------------------

TINY = dyn.ModelConfig(k=2, d_in=3, d_model=3, d_hidden=4, heads=2, d_k=2, m=2, d_ffn=4)


def step_dynamics_case(seed, cfg=TINY):
    """Gradients of a random projection of (belief, pooled, nodes, reward)
    with respect to every parameter and to the inputs."""
    rng = np.random.default_rng([seed, 77])
    model = dyn.DynamicsModel(cfg, seed=seed)
    names = list(model.params.keys())
    arrays = [model.params[n].data.astype(np.float64) * 2.0 for n in names]
    h = rng.uniform(-1, 1, (1, cfg.d_hidden))
    nodes = rng.uniform(-1, 1, (1, cfg.k, cfg.d_model))
    act = rng.uniform(0, 1, (1, 4))
    coef = [rng.uniform(-1, 1, s) for s in [(1, cfg.d_hidden), (1, cfg.pooled_dim), (1, cfg.k, cfg.d_model), (1,)]]

    def build(ts):
        model.params = dict(zip(names, ts[:len(names)]))
        h_t, n_t, a_t = ts[len(names):]
        h2, pooled, out = dyn.step_dynamics(model, h_t, n_t, a_t)
        r = dyn.predict_reward(model, pooled)
        terms = [h2, pooled, out, r]
        total = ad.sum_(terms[0] * Tensor(coef[0]))
        for t, c in zip(terms[1:], coef[1:]):
            total = total + ad.sum_(t * Tensor(c))
        return total

    return build, arrays + [h, nodes, act]
