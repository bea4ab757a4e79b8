import json

import numpy as np
import pytest

import oracles
from conftest import generic_network, random_state_graph
from morphgrasp import autodiff as ad
from morphgrasp.env import EnvConfig
from morphgrasp.errors import InvalidConfigError, LengthMismatchError
from morphgrasp.magcn import PolicyNetwork
from morphgrasp.trainer import (Adam, PpoConfig, RolloutBatch, adapt_lr, clip_grad_norm, compute_gae,
                                evaluate, ppo_loss, ppo_update, train)

SHORT = EnvConfig(explore_steps=12, lift_steps=6, hold_steps=4)
TINY = PpoConfig(n_repeat=1, epochs=1, minibatches=2)


def test_gae_hand_recursion():
    r, v, d = [1.0, 0.0, 1.0], [0.5, 0.5, 0.5, 0.0], [0.0, 0.0, 1.0]
    adv, ret = compute_gae(r, v, d, 0.9, 0.8)
    a2 = 1.0 - 0.5
    a1 = (0.0 + 0.9 * 0.5 - 0.5) + 0.9 * 0.8 * a2
    a0 = (1.0 + 0.9 * 0.5 - 0.5) + 0.9 * 0.8 * a1
    assert adv.tolist() == [a0, a1, a2]
    np.testing.assert_allclose(adv, [1.1732, 0.31, 0.5], atol=1e-15)
    assert ret.tolist() == [a0 + 0.5, a1 + 0.5, a2 + 0.5]


def test_gae_telescoping_and_zero():
    rng = np.random.default_rng(0)
    r, v = rng.normal(size=10), rng.normal(size=11)
    v[-1] = 0.0
    adv, _ = compute_gae(r, v, np.zeros(10), 1.0, 1.0)
    np.testing.assert_allclose(adv, [r[t:].sum() - v[t] for t in range(10)], atol=1e-12)
    adv, ret = compute_gae(np.zeros(5), np.zeros(6), np.zeros(5), 0.99, 0.95)
    assert np.all(adv == 0.0) and np.all(ret == 0.0)


def test_gae_matches_brute_force_oracle():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        T = int(rng.integers(1, 51))
        r, v = rng.normal(size=T), rng.normal(size=T + 1)
        d = (rng.uniform(size=T) < 0.1).astype(float)
        gamma, lam = rng.uniform(0.8, 1.0), rng.uniform(0.5, 1.0)
        adv, ret = compute_gae(r, v, d, gamma, lam)
        np.testing.assert_allclose(adv, oracles.brute_force_gae(r, v, d, gamma, lam), rtol=0, atol=1e-12)
        np.testing.assert_allclose(ret, adv + v[:-1], rtol=0, atol=0)


def test_gae_length_mismatch():
    with pytest.raises(LengthMismatchError):
        compute_gae([1.0, 2.0], [0.0, 0.0], [0.0, 0.0], 0.9, 0.9)


def _loss_inputs(net, rng, n=4):
    states = [random_state_graph(int(rng.integers(2, 6)), rng) for _ in range(n)]
    us = [rng.normal(0, 0.5, size=s.action_dim) for s in states]
    from morphgrasp.magcn import GraphBatch
    gb = GraphBatch.from_states(states)
    aw = np.array([u[:6] for u in us])
    an = np.vstack([u[6:].reshape(-1, 3) for u in us])
    logp, value, _ = net.log_prob_tensors(gb, aw, an)
    return states, us, logp.data[:, 0], value.data[:, 0]


def test_clipped_ratio_uses_upper_bound():
    net = generic_network(1)
    rng = np.random.default_rng(0)
    states, us, logp, value = _loss_inputs(net, rng, n=1)
    _, stats = ppo_loss(net, states, us, logp - np.log(1.5), [2.0], value, PpoConfig())
    assert stats["policy_loss"] == pytest.approx(-1.2 * 2.0, rel=1e-12)
    _, stats = ppo_loss(net, states, us, logp - np.log(1.1), [2.0], value, PpoConfig())
    assert stats["policy_loss"] == pytest.approx(-1.1 * 2.0, rel=1e-12)


def test_same_policy_gives_zero_loss_after_normalization():
    net = generic_network(2)
    rng = np.random.default_rng(1)
    states, us, logp, value = _loss_inputs(net, rng, n=6)
    adv = rng.normal(size=6)
    adv = (adv - adv.mean()) / adv.std()
    _, stats = ppo_loss(net, states, us, logp, adv, value, PpoConfig())
    assert abs(stats["policy_loss"]) < 1e-12 and abs(stats["kl"]) < 1e-12


def test_zero_advantage_leaves_policy_gradient_zero():
    net = generic_network(3)
    rng = np.random.default_rng(2)
    states, us, logp, value = _loss_inputs(net, rng)
    with ad.Tape() as tape:
        loss, _ = ppo_loss(net, states, us, logp, np.zeros(4), value + 1.0, PpoConfig(value_coef=0.0))
    grads = tape.backward(loss, net.params)
    assert all(np.all(g == 0.0) for g in grads.values())
    with ad.Tape() as tape:
        loss, _ = ppo_loss(net, states, us, logp, np.zeros(4), value + 1.0, PpoConfig())
    grads = tape.backward(loss, net.params)
    assert np.any(grads["critic.l1.w"] != 0.0)
    assert np.all(grads["dec_node.l1.w"] == 0.0) and np.all(grads["log_std.node"] == 0.0)


def test_ppo_update_moves_parameters():
    net = generic_network(4)
    rng = np.random.default_rng(3)
    states, us, logp, value = _loss_inputs(net, rng, n=8)
    batch = RolloutBatch(states, us, logp, np.zeros(8), value, np.ones(8),
                         advantages=rng.normal(size=8), returns=value + rng.normal(size=8))
    before = {k: p.data.copy() for k, p in net.params.items()}
    stats = ppo_update(net, batch, PpoConfig(epochs=2, minibatches=2))
    assert set(stats) >= {"policy_loss", "value_loss", "kl", "grad_norm"}
    assert any(not np.array_equal(before[k], p.data) for k, p in net.params.items())


def test_adapt_lr_rule():
    assert adapt_lr(3e-4, 0.05, 0.01) == pytest.approx(2e-4)
    assert adapt_lr(2e-4, 0.001, 0.01) == pytest.approx(3e-4)
    assert adapt_lr(5e-4, 0.01, 0.01) == 5e-4
    assert adapt_lr(1e-5, 1.0, 0.01) == 1e-5
    assert adapt_lr(1e-2, 0.0, 0.01) == 1e-2


def test_kl_target_changes_only_the_step_size():
    net_a, net_b = generic_network(4), generic_network(4)
    rng = np.random.default_rng(3)
    states, us, logp, value = _loss_inputs(net_a, rng, n=8)
    batch = RolloutBatch(states, us, logp, np.zeros(8), value, np.ones(8),
                         advantages=rng.normal(size=8), returns=value + rng.normal(size=8))
    fixed = ppo_update(net_a, batch, PpoConfig(epochs=2, minibatches=2))
    adaptive = ppo_update(net_b, batch, PpoConfig(epochs=2, minibatches=2, kl_target=0.01))
    assert fixed["lr"] == 5e-4
    assert adaptive["lr"] != 5e-4
    assert adaptive["kl_k3"] >= 0.0
    with pytest.raises(InvalidConfigError):
        PpoConfig(kl_target=0.0).validate()


def test_clip_grad_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_grad_norm(grads, 0.5)
    assert norm == 5.0
    assert np.sqrt(clipped["a"] ** 2 + clipped["b"] ** 2)[0] == pytest.approx(0.5)
    same, _ = clip_grad_norm(grads, 10.0)
    assert same["a"][0] == 3.0


def test_adam_first_step_is_lr_sized():
    p = {"w": ad.Tensor(np.array([1.0, -1.0]))}
    opt = Adam(p, 0.01)
    opt.step(p, {"w": np.array([5.0, -0.1])})
    np.testing.assert_allclose(p["w"].data, [0.99, -0.99], atol=1e-8)


def test_config_validation():
    with pytest.raises(InvalidConfigError):
        PpoConfig(clip=1.5).validate()
    with pytest.raises(InvalidConfigError):
        PpoConfig(lr=0.0).validate()
    cfg = PpoConfig()
    assert (cfg.gamma, cfg.lam, cfg.clip, cfg.epochs, cfg.minibatches, cfg.lr, cfg.max_grad_norm,
            cfg.n_repeat) == (0.996, 0.95, 0.2, 4, 4, 5e-4, 0.5, 3)


def test_train_needs_hands(bundles):
    with pytest.raises(InvalidConfigError):
        train([], ["sphere"])
    with pytest.raises(InvalidConfigError):
        train([bundles["toy_pincer"]], [])


def test_train_reproducible_with_metrics_log(bundles, tmp_path):
    hands = [bundles["toy_pincer"], bundles["toy2finger"]]
    log = tmp_path / "m.jsonl"
    a = train(hands, ["sphere"], cfg=TINY, iterations=2, seed=5, env_config=SHORT, metrics_path=log)
    b = train(hands, ["sphere"], cfg=TINY, iterations=2, seed=5, env_config=SHORT)
    assert a.metrics == b.metrics
    rows = [json.loads(x) for x in log.read_text().splitlines()]
    assert [r["iteration"] for r in rows] == [0, 1]
    assert set(rows[0]["per_hand"]) == {h.hand_id for h in hands}
    assert a.net.dumps() == b.net.dumps()
    for h in hands:
        res = evaluate(a.net, h, ["sphere"], trials=2, env_config=SHORT)
        assert 0.0 <= res.success_rate <= 1.0 and res.dq_in_limits


def test_thread_count_does_not_change_results(bundles, monkeypatch):
    hand = bundles["toy2finger"]
    net = generic_network(6)
    monkeypatch.setenv("MORPHGRASP_THREADS", "1")
    one = evaluate(net, hand, ["box"], trials=3, env_config=SHORT)
    monkeypatch.setenv("MORPHGRASP_THREADS", "3")
    three = evaluate(net, hand, ["box"], trials=3, env_config=SHORT)
    assert one.returns == three.returns
    assert all(np.array_equal(x, y) for x, y in zip(one.actions, three.actions))


def test_link_scale_harness(bundles):
    hand = bundles["toy3finger"]
    net = generic_network(7)
    base = evaluate(net, hand, ["sphere"], trials=2, env_config=SHORT)
    same = evaluate(net, hand, ["sphere"], trials=2, link_scale=1.0, env_config=SHORT)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(base.actions, same.actions))
    scaled = evaluate(net, hand, ["sphere"], trials=2, link_scale=2.0, env_config=SHORT)
    changed = np.concatenate([np.any(x != y, axis=1) for x, y in zip(base.actions, scaled.actions)])
    assert changed.mean() >= 0.9


def test_evaluate_is_seeded(bundles):
    net = generic_network(8)
    a = evaluate(net, bundles["toy_pincer"], ["cylinder"], trials=2, seed=3, env_config=SHORT)
    b = evaluate(net, bundles["toy_pincer"], ["cylinder"], trials=2, seed=3, env_config=SHORT)
    assert a.returns == b.returns
