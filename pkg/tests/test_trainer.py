import math

import numpy as np
import pytest

from latentgraph import autodiff as ad
from latentgraph import dynamics as dyn
from latentgraph import sim, trainer as tr

ROPE = sim.make_task("rope-0")


@pytest.fixture(scope="module")
def tiny_data():
    eps = tr.collect(ROPE, 6, seed=11, steps=8)
    return tr.encode_episodes(eps, 3)


def test_collect_zero_and_deterministic():
    assert tr.collect(ROPE, 0) == []
    a = tr.collect(ROPE, 2, seed=4, steps=3)
    b = tr.collect(ROPE, 2, seed=4, steps=3)
    assert all(x.equals(y) for x, y in zip(a, b))
    assert a[0].n_actions == 3 and len(a[0].frames) == 4
    with pytest.raises(ValueError):
        tr.collect(ROPE, 1, policy="expert")


def test_collect_scripted_policy_runs():
    eps = tr.collect(sim.make_task("cloth-fold"), 1, policy="scripted", seed=0, steps=2)
    assert eps[0].n_actions == 2


def test_random_picks_hit_the_object():
    eps = tr.collect(ROPE, 100, seed=3, steps=2)
    noops = 0
    for ep in eps:
        for img, a in zip(ep.frames[:-1], ep.actions[1:]):
            state_hit = img[int(a[1] * img.shape[0]), int(a[0] * img.shape[1])] > 0
            noops += not state_hit
    assert noops / 200 < 0.05


def test_dynamics_loss_zero_cases():
    v = np.random.default_rng(0).normal(size=(2, 4))
    far = v[:, None] + 5.0
    assert tr.dynamics_loss(v, v, np.repeat(far, 3, axis=1), margin=1.0).item() == 0.0


def test_dynamics_loss_coinciding_negative_gives_margin():
    v = np.random.default_rng(1).normal(size=(1, 4))
    negs = np.stack([v, v + 10.0], axis=1)
    assert tr.dynamics_loss(v, v, negs, margin=0.7).item() == pytest.approx(0.7, rel=1e-6)


def test_dynamics_loss_positive_mode_and_errors():
    a, b = np.zeros((2, 3)), np.ones((2, 3))
    assert tr.dynamics_loss(a, b, mode="positive").item() == pytest.approx(2 * math.sqrt(3), rel=1e-6)
    with pytest.raises(ValueError):
        tr.dynamics_loss(a, b, None)
    with pytest.raises(ValueError):
        tr.dynamics_loss(a, b, np.zeros((2, 0, 3)))


def test_dynamics_loss_infonce_uniform_when_equidistant():
    v = np.zeros((1, 2))
    negs = np.zeros((1, 3, 2))
    assert tr.dynamics_loss(v, v, negs, mode="infonce").item() == pytest.approx(math.log(4), rel=1e-6)


def test_reward_loss_examples():
    assert tr.reward_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0])).item() == 0.0
    assert tr.reward_loss(np.array([1.0, -1.0]), np.zeros(2)).item() == pytest.approx(2.0)
    with pytest.raises(ad.ShapeError):
        tr.reward_loss(np.zeros(3), np.zeros(4))


def test_train_config_validation_and_flags():
    with pytest.raises(ValueError):
        tr.TrainConfig(t_unroll=0)
    with pytest.raises(ValueError):
        tr.TrainConfig(margin=0.0)
    cfg = tr.TrainConfig.with_ablations(["NoContrastive", "no-graph"])
    assert cfg.no_contrastive and cfg.no_graph and cfg.loss_mode == "positive"
    assert cfg.ablations() == ["NoGraph", "NoContrastive"]
    assert tr.TrainConfig(infonce=True).loss_mode == "infonce"
    with pytest.raises(ValueError):
        tr.TrainConfig.with_ablations(["GAT"])


def test_train_zero_epochs(tiny_data):
    model, curve = tr.train(tiny_data, tr.TrainConfig(epochs=0))
    fresh, _ = tr.train(tiny_data, tr.TrainConfig(epochs=0))
    assert curve == []
    for name, p in model.params.items():
        np.testing.assert_array_equal(p.data, fresh.params[name].data)


def test_train_deterministic(tiny_data):
    cfg = tr.TrainConfig(epochs=2, batch_size=8)
    _, c1 = tr.train(tiny_data, cfg)
    _, c2 = tr.train(tiny_data, cfg)
    assert c1 == c2 and len(c1) == 2
    assert set(c1[0]) == {"epoch", "L_D", "L_R", "L"}


def test_train_alpha_zero_ignores_rewards(tiny_data):
    cfg = tr.TrainConfig(epochs=2, batch_size=8, alpha=0.0)
    corrupted = [tr.EncodedEpisode(ep.raw, ep.actions, np.random.default_rng(0).normal(size=ep.rewards.shape) * 100)
                 for ep in tiny_data]
    m1, _ = tr.train(tiny_data, cfg)
    m2, _ = tr.train(corrupted, cfg)
    for name, p in m1.params.items():
        if not name.startswith("reward"):
            assert p.data.tobytes() == m2.params[name].data.tobytes(), name


def test_train_nonfinite_reports_batch(tiny_data):
    bad = [tr.EncodedEpisode(ep.raw, ep.actions, ep.rewards.copy()) for ep in tiny_data]
    for ep in bad:
        ep.rewards[:] = np.inf
    with pytest.raises(tr.NonFiniteLossError, match="batch 0"):
        tr.train(bad, tr.TrainConfig(epochs=1, batch_size=8))


def test_train_rejects_empty():
    with pytest.raises(ValueError):
        tr.train([], tr.TrainConfig(epochs=1))


def test_curve_csv_header():
    text = tr.curve_csv([{"epoch": 1, "L_D": 1.5, "L_R": 0.25, "L": 1.75}])
    assert text.splitlines() == ["epoch,L_D,L_R,L", "1,1.5,0.25,1.75"]


def test_top1_oracle_and_degenerate(tiny_data):
    model, _ = tr.train(tiny_data, tr.TrainConfig(epochs=0))
    assert tr.top1_accuracy(model, tiny_data, n_negatives=10, predictor=tr.oracle_predictor) == 1.0
    pred = np.zeros((5, 3))
    assert tr.top1_from_arrays(pred, pred, np.zeros((5, 4, 3))) == 0.0


def test_top1_monotone_under_negative_removal():
    rng = np.random.default_rng(0)
    pred, true, neg = rng.normal(size=(200, 4)), rng.normal(size=(200, 4)), rng.normal(size=(200, 20, 4))
    accs = [tr.top1_from_arrays(pred, true, neg[:, :n]) for n in (20, 10, 5, 1)]
    assert all(b >= a for a, b in zip(accs, accs[1:]))
    assert 0.0 <= accs[0] <= 1.0


def test_top1_needs_enough_frames(tiny_data):
    model, _ = tr.train(tiny_data, tr.TrainConfig(epochs=0))
    with pytest.raises(ValueError, match="held-out frames"):
        tr.top1_accuracy(model, tiny_data[:1], n_negatives=50)


def test_eval_negatives_exclude_query():
    rng = np.random.default_rng(1)
    q = np.array([0, 5, 9])
    neg = tr.sample_eval_negatives(10, q, 9, rng)
    for qi, row in zip(q, neg):
        assert qi not in row and len(set(row)) == 9


def test_top1_invariant_to_keypoint_order(tiny_data):
    model, _ = tr.train(tiny_data, tr.TrainConfig(epochs=0))
    perm = [tr.EncodedEpisode(ep.raw[:, ::-1].copy(), ep.actions, ep.rewards) for ep in tiny_data]
    a = tr.top1_accuracy(model, tiny_data, n_negatives=10)
    b = tr.top1_accuracy(model, perm, n_negatives=10)
    assert a == pytest.approx(b)


def test_calibrate_threshold_examples():
    goal = sim.goal_state(ROPE)
    assert tr.calibrate_threshold(ROPE, [goal] * 20) == 0.0
    vals = np.linspace(-0.05, -0.01, 41)
    assert tr.calibrate_threshold(ROPE, vals) == pytest.approx(-0.048, abs=1e-9)
    with pytest.raises(ValueError):
        tr.calibrate_threshold(ROPE, [])
    assert tr.calibrated_task(ROPE, [goal] * 20).success_threshold == 0.0


# -- training-run checks on the shared rope-0 model ---------------------------------------

@pytest.mark.slow
def test_default_training_reduces_loss(rope_models):
    curve = rope_models.get()["curve"]
    assert curve[-1]["L"] < 0.3 * curve[0]["L"]


def _heldout_reward_errors(model, heldout, cfg=tr.TrainConfig()):
    """Open-loop predicted vs true rewards over every held-out window."""
    pred, true = [], []
    for ep in heldout:
        for s in range(len(ep.actions) - cfg.t_ctx - cfg.t_unroll + 2):
            h = model.zero_belief(1)
            for t in range(cfg.t_ctx - 1):
                h, _ = dyn.observe(model, h, ep.raw[s + t][None], ep.actions[s + t][None])
            start = s + cfg.t_ctx - 1
            _, r_hat = dyn.rollout(model, h, ep.raw[start][None], ep.actions[start:start + cfg.t_unroll][None])
            pred.append(r_hat[0])
            true.append(ep.rewards[start + 1:start + 1 + cfg.t_unroll])
    return np.concatenate(pred), np.concatenate(true)


@pytest.mark.slow
def test_reward_head_beats_constant_baseline(rope_setup, rope_models):
    model = rope_models.get()["model"]
    pred, true = _heldout_reward_errors(model, rope_setup["heldout"])
    baseline = np.mean(np.concatenate([ep.rewards for ep in rope_setup["train"]]))
    assert np.mean(np.abs(pred - true)) < 0.5 * np.mean(np.abs(baseline - true))
