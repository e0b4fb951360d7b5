import math

import numpy as np
import pytest

from latentgraph import autodiff as ad
from latentgraph import dynamics as dyn
from latentgraph.autodiff import Tensor

SMALL = dyn.ModelConfig(k=3, d_in=5, d_model=8, d_hidden=6, heads=2, d_k=4, m=3, d_ffn=8)


def _tg_params(rng, d_in, d_k, d_out, heads):
    p = {}
    for h in range(heads):
        for q in "qkv":
            p[f"tgconv/head{h}/{q}/w"] = Tensor(rng.normal(size=(d_in, d_k)))
    p["tgconv/out/w"] = Tensor(rng.normal(size=(heads * d_k, d_out)))
    p["tgconv/out/b"] = Tensor(rng.normal(size=d_out))
    p["tgconv/res/w"] = Tensor(rng.normal(size=(d_in, d_out)))
    return p


def test_tgconv_single_node():
    rng = np.random.default_rng(0)
    p = _tg_params(rng, 4, 3, 5, 2)
    x = rng.normal(size=(1, 4))
    out, w = dyn.tgconv(Tensor(x), p, 2)
    np.testing.assert_allclose(w.data, [[1.0]])
    v = np.concatenate([x @ p[f"tgconv/head{h}/v/w"].data for h in range(2)], axis=1)
    want = v @ p["tgconv/out/w"].data + p["tgconv/out/b"].data + x @ p["tgconv/res/w"].data
    np.testing.assert_allclose(out.data, want, rtol=1e-10)


def test_tgconv_identical_nodes_uniform_attention():
    rng = np.random.default_rng(1)
    p = _tg_params(rng, 4, 3, 5, 2)
    x = np.tile(rng.normal(size=(1, 4)), (4, 1))
    out, w = dyn.tgconv(Tensor(x), p, 2)
    np.testing.assert_allclose(w.data, np.full((4, 4), 0.25), atol=1e-12)
    np.testing.assert_allclose(out.data, np.tile(out.data[:1], (4, 1)), atol=1e-12)


def test_tgconv_rows_stochastic():
    rng = np.random.default_rng(2)
    p = _tg_params(rng, 4, 3, 5, 2)
    _, w = dyn.tgconv(Tensor(rng.normal(size=(2, 5, 4))), p, 2)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-5)
    assert np.all(w.data >= 0)


def test_mgf_pool_theta_zero_and_single_node():
    rng = np.random.default_rng(3)
    v = rng.normal(size=(4, 5))
    out = dyn.mgf_pool(Tensor(v), Tensor(np.zeros((5, 3)))).data
    np.testing.assert_allclose(out[:5], v.mean(axis=0))
    np.testing.assert_allclose(out[5:], [4.0] * 3)
    theta = rng.normal(size=(5, 3))
    one = dyn.mgf_pool(Tensor(v[:1]), Tensor(theta)).data
    np.testing.assert_allclose(one, np.concatenate([v[0], np.exp(v[0] @ theta)]), rtol=1e-10)


def test_mgf_pool_clamps_exponent():
    v = np.array([[100.0, 0.0]])
    out = dyn.mgf_pool(Tensor(v), Tensor(np.array([[1.0], [0.0]]))).data
    assert out[-1] == pytest.approx(math.exp(10.0))


def test_max_pool_flag():
    cfg = dyn.ModelConfig(k=3, d_in=5, d_model=8, d_hidden=6, heads=2, d_k=4, m=3, d_ffn=8, max_pool=True)
    model = dyn.DynamicsModel(cfg)
    assert cfg.pooled_dim == 8 and "pool/theta" not in model.params
    v = np.random.default_rng(0).normal(size=(2, 3, 8)).astype(np.float32)
    np.testing.assert_array_equal(dyn.pool(model, Tensor(v)).data, v.max(axis=1))


def _gru_params(rng, d_p, d_h, zero=False):
    f = (lambda *s: np.zeros(s)) if zero else (lambda *s: rng.normal(size=s))
    return {"gru/z/w": Tensor(f(d_p + d_h, d_h)), "gru/z/b": Tensor(f(d_h)),
            "gru/r/w": Tensor(f(d_p + d_h, d_h)), "gru/r/b": Tensor(f(d_h)),
            "gru/n_in/w": Tensor(f(d_p, d_h)), "gru/n_in/b": Tensor(f(d_h)),
            "gru/n_h/w": Tensor(f(d_h, d_h))}


def test_belief_gate_closed_keeps_h():
    rng = np.random.default_rng(4)
    p = _gru_params(rng, 3, 4, zero=True)
    p["gru/z/b"] = Tensor(np.full(4, -50.0))
    h = rng.uniform(-1, 1, 4)
    np.testing.assert_allclose(dyn.belief_update(Tensor(h), Tensor(rng.normal(size=3)), p).data, h, atol=1e-12)


def test_belief_zero_stays_zero():
    rng = np.random.default_rng(5)
    p = _gru_params(rng, 3, 4)
    for name in ("gru/z/b", "gru/r/b", "gru/n_in/b"):
        p[name] = Tensor(np.zeros(4))
    np.testing.assert_array_equal(dyn.belief_update(Tensor(np.zeros(4)), Tensor(np.zeros(3)), p).data, 0.0)


def test_belief_stays_in_unit_interval():
    rng = np.random.default_rng(6)
    p = _gru_params(rng, 3, 4)
    h = np.zeros(4)
    for _ in range(50):
        h = dyn.belief_update(Tensor(h), Tensor(rng.normal(size=3) * 10), p).data
        assert np.all(np.abs(h) <= 1)


def test_step_dynamics_k_mismatch():
    model = dyn.DynamicsModel(SMALL)
    with pytest.raises(dyn.KMismatchError):
        dyn.step_dynamics(model, model.zero_belief(1), np.zeros((1, 4, 8)), np.zeros((1, 4)))


def test_step_dynamics_no_rnn_gives_zero_belief():
    cfg = dyn.ModelConfig(k=3, d_in=5, d_model=8, d_hidden=6, heads=2, d_k=4, m=3, d_ffn=8, no_rnn=True)
    model = dyn.DynamicsModel(cfg)
    assert cfg.node_input_dim == 8 + 4
    h, pooled, out = dyn.step_dynamics(model, np.ones((2, 6)), np.ones((2, 3, 8)), np.ones((2, 4)))
    np.testing.assert_array_equal(h.data, 0.0)
    assert pooled.shape == (2, cfg.pooled_dim) and out.shape == (2, 3, 8)


def test_node_input_dim():
    assert SMALL.node_input_dim == SMALL.d_model + SMALL.d_hidden + 4


def test_step_dynamics_deterministic():
    rng = np.random.default_rng(7)
    nodes = rng.normal(size=(2, 3, 8)).astype(np.float32)
    act = rng.uniform(size=(2, 4)).astype(np.float32)
    outs = []
    for _ in range(2):
        model = dyn.DynamicsModel(SMALL, seed=3)
        outs.append([t.data.tobytes() for t in dyn.step_dynamics(model, model.zero_belief(2), nodes, act)])
    assert outs[0] == outs[1]


def test_no_graph_nodes_independent():
    cfg = dyn.ModelConfig(k=3, d_in=5, d_model=8, d_hidden=6, heads=2, d_k=4, m=3, d_ffn=8, no_graph=True)
    model = dyn.DynamicsModel(cfg, seed=1)
    rng = np.random.default_rng(8)
    nodes = rng.normal(size=(1, 3, 8)).astype(np.float32)
    act = rng.uniform(size=(1, 4)).astype(np.float32)
    h = rng.normal(size=(1, 6)).astype(np.float32)
    _, _, a = dyn.step_dynamics(model, h, nodes, act)
    nodes[0, 2] += 5.0
    _, _, b = dyn.step_dynamics(model, h, nodes, act)
    np.testing.assert_array_equal(a.data[0, :2], b.data[0, :2])
    assert not np.array_equal(a.data[0, 2], b.data[0, 2])


def test_predict_reward_bias_and_linearity():
    model = dyn.DynamicsModel(SMALL)
    model.params["reward/w"].data[:] = 0.0
    model.params["reward/b"].data[:] = 0.7
    assert dyn.predict_reward(model, np.ones((1, SMALL.pooled_dim))).data[0] == pytest.approx(0.7)
    model = dyn.DynamicsModel(SMALL, seed=2)
    v = np.random.default_rng(9).normal(size=(1, SMALL.pooled_dim)).astype(np.float32)
    r1 = dyn.predict_reward(model, v).data[0]
    r2 = dyn.predict_reward(model, 2 * v).data[0]
    assert r2 == pytest.approx(2 * r1, rel=1e-5)


def test_goal_reward_examples():
    g = np.array([0.3, -1.0, 2.0])
    assert dyn.goal_reward(g, g) == 0.0
    assert dyn.goal_reward(g + np.eye(3)[0], g) == pytest.approx(-1.0)
    with pytest.raises(ad.ShapeError):
        dyn.goal_reward(np.zeros(3), np.zeros(4))


def test_rollout_matches_stepwise():
    model = dyn.DynamicsModel(SMALL, seed=4)
    rng = np.random.default_rng(10)
    raw = rng.normal(size=(2, 3, 5)).astype(np.float32)
    acts = rng.uniform(size=(2, 3, 4)).astype(np.float32)
    pooled, rew = dyn.rollout(model, model.zero_belief(2), raw, acts)
    h, nodes = Tensor(model.zero_belief(2)), dyn.embed(model, raw)
    for t in range(3):
        h, p, nodes = dyn.step_dynamics(model, h, nodes, acts[:, t])
        np.testing.assert_allclose(pooled[:, t], p.data, rtol=1e-6)
        np.testing.assert_allclose(rew[:, t], dyn.predict_reward(model, p).data, rtol=1e-6)


def test_checkpoint_round_trip_with_flags(tmp_path):
    cfg = dyn.ModelConfig(k=3, d_in=5, d_model=8, d_hidden=6, heads=2, d_k=4, m=3, d_ffn=8, no_graph=True)
    model = dyn.DynamicsModel(cfg, seed=5)
    model.fit_input_stats(np.random.default_rng(0).normal(size=(20, 3, 5)))
    model.save(tmp_path / "m.ckpt", {"ablations": ["NoGraph"]})
    back, meta = dyn.DynamicsModel.load(tmp_path / "m.ckpt")
    assert back.cfg == cfg and meta["flags"]["NoGraph"] and meta["ablations"] == ["NoGraph"]
    for name, p in model.params.items():
        assert p.data.tobytes() == back.params[name].data.tobytes()
    assert back.input_std.tobytes() == model.input_std.tobytes()
