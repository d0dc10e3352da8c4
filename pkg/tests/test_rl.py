import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lumennav.rl import (
    MLP,
    ActorCritic,
    Adam,
    PpoConfig,
    RolloutBuffer,
    RunningStats,
    ToyCenteringEnv,
    TrainingError,
    clip_global_norm,
    clipped_surrogate,
    compute_gae,
    gaussian_log_prob,
    gradient_check,
    load_checkpoint,
    normalize_advantages,
    policy_forward,
    ppo_update,
    run_policy,
    sample_action,
    save_checkpoint,
    train,
)
from oracles import discounted_sums, gae_reference

LOG_2PI = math.log(2 * math.pi)


# -- networks ------------------------------------------------------------------

def test_linear_net_gradient_is_exact(rng):
    net = MLP(4, 3, hidden=(), rng=rng)
    assert gradient_check(net, rng.standard_normal((5, 4)), rng) < 1e-8


@pytest.mark.parametrize("d2rl", [True, False])
def test_full_net_gradient(rng, d2rl):
    net = MLP(4, 3, hidden=(128, 64), d2rl=d2rl, rng=rng, head_scale=1.0)
    assert gradient_check(net, rng.standard_normal((8, 4)), rng) < 1e-4


def test_zero_weights_give_zero_hidden_gradients(rng):
    net = MLP(4, 2, hidden=(8, 8), rng=rng)
    for p in net.params.values():
        p[...] = 0.0
    x = rng.standard_normal((3, 4))
    out, cache = net.forward(x, cache=True)
    g = net.backward(np.ones_like(out), cache)
    # ELU(0) = 0 makes every hidden activation zero, so only the output bias learns
    for k in ("W0", "b0", "W1", "b1", "Wout"):
        assert not np.any(g[k]), k
    assert np.all(g["bout"] == 3.0)


def test_d2rl_layer_shapes():
    net = MLP(4, 3, hidden=(128, 64), d2rl=True)
    assert net.params["W0"].shape == (4, 128)
    assert net.params["W1"].shape == (132, 64)
    assert net.params["Wout"].shape == (64, 3)


def test_zero_head_outputs_bias(rng):
    agent = ActorCritic(4, 3, PpoConfig(), seed=0)
    agent.policy.mlp.params["Wout"][...] = 0.0
    agent.policy.mlp.params["bout"][...] = [0.1, -0.2, 0.3]
    for x in rng.standard_normal((5, 4)):
        mean, _ = policy_forward(agent.policy, x)
        assert np.array_equal(mean, [0.1, -0.2, 0.3])
    m1, _ = policy_forward(agent.policy, x)
    m2, _ = policy_forward(agent.policy, x)
    assert np.array_equal(m1, m2)


def test_policy_lipschitz_probe(rng):
    agent = ActorCritic(4, 3, PpoConfig(), seed=1)
    x = rng.standard_normal(4)
    base = policy_forward(agent.policy, x)[0]
    # Lipschitz bound from the layer norms (ELU is 1-Lipschitz)
    p = agent.policy.mlp.params
    lip = np.linalg.norm(p["W0"], 2)
    lip = (lip + 1.0) * np.linalg.norm(p["W1"], 2) * np.linalg.norm(p["Wout"], 2)
    for i in range(4):
        dx = np.zeros(4)
        dx[i] = 1e-6
        moved = policy_forward(agent.policy, x + dx)[0]
        assert np.linalg.norm(moved - base) <= lip * 1e-6 * (1 + 1e-6)


# -- sampling ------------------------------------------------------------------

def test_log_prob_at_mean():
    log_std = np.array([-0.5, 0.1, 0.3])
    mean = np.array([0.2, -0.4, 0.0])
    want = -np.sum(log_std) - 1.5 * LOG_2PI
    assert gaussian_log_prob(mean, mean, log_std) == pytest.approx(want, abs=1e-12)


def test_sampling_reproducible_and_clamped():
    mean, log_std = np.array([0.9, -0.9, 0.0]), np.array([0.5, 0.5, 0.5])
    a1 = sample_action(mean, log_std, np.random.default_rng(3))
    a2 = sample_action(mean, log_std, np.random.default_rng(3))
    assert np.array_equal(a1[0], a2[0]) and a1[2] == a2[2]
    assert np.all(np.abs(a1[0]) <= 1.0)
    assert a1[2] == pytest.approx(gaussian_log_prob(a1[1], mean, log_std))


def test_degenerate_variance_returns_clamped_mean():
    mean = np.array([1.7, -0.3, 0.5])
    act, raw, _ = sample_action(mean, np.full(3, -50.0), np.random.default_rng(0))
    assert np.allclose(act, [1.0, -0.3, 0.5], atol=1e-2)


# -- advantages ----------------------------------------------------------------

def test_gae_single_terminal_step():
    adv, ret = compute_gae([1.0], [0.0, 0.0], [1.0])
    assert adv.tolist() == [1.0] and ret.tolist() == [1.0]


def test_gae_zero_everything():
    adv, ret = compute_gae(np.zeros(5), np.zeros(6), np.zeros(5))
    assert not adv.any() and not ret.any()


def test_gae_two_step_hand_unrolled():
    g, lam = 0.99, 0.95
    adv, _ = compute_gae([1.0, 1.0], [0.5, 0.5, 0.0], [0.0, 1.0], g, lam)
    d1 = 1.0 - 0.5
    d0 = 1.0 + g * 0.5 - 0.5
    assert adv[1] == pytest.approx(d1, abs=1e-15)
    assert adv[0] == pytest.approx(d0 + g * lam * d1, abs=1e-15)


def test_gae_matches_forward_sum_oracle(rng):
    for _ in range(20):
        n = int(rng.integers(1, 9))
        r = rng.standard_normal(n)
        v = rng.standard_normal(n + 1)
        d = (rng.random(n) < 0.3).astype(float)
        g, lam = rng.uniform(0.8, 1.0), rng.uniform(0.0, 1.0)
        adv, ret = compute_gae(r, v, d, g, lam)
        ref_adv, ref_ret = gae_reference(r, v, d, g, lam)
        assert np.max(np.abs(adv - ref_adv)) <= 1e-10
        assert np.max(np.abs(ret - ref_ret)) <= 1e-10


def test_gae_lambda_one_is_discounted_return(rng):
    r = rng.standard_normal(12)
    adv, _ = compute_gae(r, np.zeros(13), np.zeros(12), 0.97, 1.0)
    assert np.max(np.abs(adv - discounted_sums(r, 0.97))) <= 1e-12


def test_gae_length_mismatch():
    with pytest.raises(ValueError):
        compute_gae([1.0, 2.0], [0.0, 0.0], [0.0, 0.0])


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=64))
def test_advantage_normalization(values):
    a = np.array(values)
    z = normalize_advantages(a)
    assert abs(z.mean()) < 1e-6
    if a.std() > 1e-9:
        assert abs(z.std() - 1.0) < 1e-6


# -- clipped objective ---------------------------------------------------------

def test_clip_arithmetic():
    assert clipped_surrogate(np.array([1.5]), np.array([2.0]), 0.2)[0] == pytest.approx(1.2 * 2.0)
    assert clipped_surrogate(np.array([0.5]), np.array([-2.0]), 0.2)[0] == pytest.approx(0.8 * -2.0)
    assert clipped_surrogate(np.array([1.0]), np.array([3.0]), 0.2)[0] == 3.0


@given(st.floats(0.01, 5.0), st.floats(-10, 10), st.floats(0.05, 0.5))
def test_clipped_never_exceeds_unclipped(r, a, eps):
    assert clipped_surrogate(np.array([r]), np.array([a]), eps)[0] <= r * a + 1e-12


def _buffer(agent, rng, n=64):
    obs = rng.standard_normal((n, 4))
    raw, logp = [], []
    for o in obs:
        _, r, lp = agent.act(o, rng)
        raw.append(r)
        logp.append(lp)
    adv = rng.standard_normal(n)
    return RolloutBuffer(obs, np.array(raw), np.array(logp), np.zeros(n), np.zeros(n), np.zeros(n),
                         adv, rng.standard_normal(n))


def test_first_pass_actor_loss_is_zero_after_normalization(rng):
    agent = ActorCritic(4, 3, PpoConfig(), seed=0)
    buf = _buffer(agent, rng)
    adv = normalize_advantages(buf.advantages)
    a_loss, *_ = agent.loss_and_grads(buf.obs, buf.raw_actions, buf.log_probs, adv, buf.returns)
    assert abs(a_loss) < 1e-12


def test_loss_gradients_match_finite_differences(rng):
    cfg = PpoConfig(hidden=(16, 8), normalize_value_targets=False)
    agent = ActorCritic(4, 3, cfg, seed=2)
    buf = _buffer(agent, rng, 32)
    # move the policy so some ratios leave 1 but stay away from the clip kinks
    for p in agent.policy.mlp.params.values():
        p += 0.01 * rng.standard_normal(p.shape)
    adv = normalize_advantages(buf.advantages)

    def total():
        a, v, *_ = agent.loss_and_grads(buf.obs, buf.raw_actions, buf.log_probs, adv, buf.returns)
        return a + cfg.value_coef * v

    *_, grads, _, _ = agent.loss_and_grads(buf.obs, buf.raw_actions, buf.log_probs, adv, buf.returns)
    worst = 0.0
    for name, p in agent.params.items():
        flat = p.reshape(-1)
        for i in rng.choice(flat.size, min(6, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + 1e-6
            up = total()
            flat[i] = old - 1e-6
            down = total()
            flat[i] = old
            num = (up - down) / 2e-6
            ana = grads[name].reshape(-1)[i]
            if max(abs(num), abs(ana)) > 1e-6:
                worst = max(worst, abs(num - ana) / max(abs(num), abs(ana)))
    assert worst < 1e-3


def test_ppo_update_rejects_nan(rng):
    agent = ActorCritic(4, 3, PpoConfig(), seed=0)
    buf = _buffer(agent, rng)
    buf.returns[3] = np.nan
    with pytest.raises(TrainingError):
        ppo_update(buf, agent, PpoConfig(normalize_value_targets=False), rng)


# -- optimizer and bookkeeping -------------------------------------------------

def test_adam_first_step_moves_by_lr():
    opt = Adam(lr=0.1)
    out = opt.step({"w": np.array([1.0, -1.0])}, {"w": np.array([3.0, -0.5])})
    assert out["w"] == pytest.approx([0.9, -0.9], abs=1e-6)


def test_clip_global_norm():
    g, n = clip_global_norm({"a": np.array([3.0]), "b": np.array([4.0])}, 1.0)
    assert n == 5.0
    assert math.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)
    g, _ = clip_global_norm({"a": np.array([0.3])}, 1.0)
    assert g["a"][0] == 0.3


def test_running_stats_match_batch(rng):
    x = rng.standard_normal(1000) * 3 + 2
    s = RunningStats()
    for chunk in np.array_split(x, 7):
        s.update(chunk)
    assert s.mean == pytest.approx(x.mean()) and s.std == pytest.approx(x.std())


@pytest.mark.parametrize("kw", [dict(gamma=0.0), dict(clip_epsilon=1.0), dict(minibatch_size=0),
                                dict(steps_per_update=8, minibatch_size=16)])
def test_ppo_config_validation(kw):
    with pytest.raises(ValueError):
        PpoConfig(**kw)


def test_checkpoint_round_trip(tmp_path, rng):
    agent = ActorCritic(4, 3, PpoConfig(), seed=4)
    save_checkpoint(tmp_path / "c.json", agent, extra={"config_hash": "abc", "seed": 4})
    back = load_checkpoint(tmp_path / "c.json")
    x = rng.standard_normal((6, 4))
    assert np.array_equal(back.policy.forward(x)[0], agent.policy.forward(x)[0])
    assert np.array_equal(back.value_of(x), agent.value_of(x))
    assert back.meta["config_hash"] == "abc"
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "none.json")


# -- training ------------------------------------------------------------------

def _toy_factory(rank, episode, seed):
    return ToyCenteringEnv()


def test_training_is_deterministic(tmp_path):
    cfg = PpoConfig(total_steps=1024, steps_per_update=512)
    _, c1 = train(_toy_factory, cfg, seed=7, curve_path=tmp_path / "a.csv")
    _, c2 = train(_toy_factory, cfg, seed=7, curve_path=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    _, c3 = train(_toy_factory, cfg, seed=8)
    assert c1 == c2 and c1 != c3


def test_toy_centering_task_converges():
    cfg = PpoConfig(total_steps=60_000)
    agent, curve = train(_toy_factory, cfg, seed=0)
    rewards = [np.mean([o.reward for o in run_policy(agent, ToyCenteringEnv(), s)]) for s in range(10)]
    assert np.mean(rewards) > 0.9
    assert all(np.isfinite(r["actor_loss"]) for r in curve)
