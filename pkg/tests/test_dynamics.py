import numpy as np
import pytest
from scipy.stats import spearmanr
from hypothesis import given
from hypothesis import strategies as st

from conftest import fd_relative_errors
from ctplan.data import Normalizer, collect_dataset, make_windows
from ctplan.dynamics import (AuxConfig, InverseDynamics, compute_returns, critic_loss, extract_action,
                             invdyn_loss, load_critic, load_invdyn, save_critic, save_invdyn, train_critic,
                             train_invdyn, Critic)
from ctplan.envs import INTEGRATOR, MAZE, env_step
from ctplan.errors import ContractError
from ctplan.numerics import Mlp


def brute_force_returns(rewards, gamma):
    out = []
    for k in range(len(rewards)):
        out.append(sum(gamma ** h * rewards[k + h] for h in range(len(rewards) - k)))
    return np.array(out)


# -- returns ------------------------------------------------------------------------

def test_returns_examples():
    np.testing.assert_array_equal(compute_returns([1, 1, 1], 0.5), [1.75, 1.5, 1.0])
    r = np.random.default_rng(0).standard_normal(10)
    np.testing.assert_array_equal(compute_returns(r, 0.0), r)
    assert compute_returns([], 0.9).shape == (0,)


def test_returns_match_quadratic_oracle():
    r = np.random.default_rng(1).standard_normal(100)
    np.testing.assert_allclose(compute_returns(r, 0.99), brute_force_returns(r, 0.99), rtol=0, atol=1e-9)


@pytest.mark.parametrize("gamma", [1.0, 1.5, -0.1])
def test_returns_reject_bad_gamma(gamma):
    with pytest.raises(ContractError):
        compute_returns([1.0], gamma)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=50), st.floats(0, 0.999))
def test_return_recursion_identity(rewards, gamma):
    rets = compute_returns(rewards, gamma)
    # the backward pass computes exactly r_k + gamma * R_{k+1}
    for k in range(len(rewards) - 1):
        assert rets[k] == rewards[k] + gamma * rets[k + 1]
    assert rets[-1] == rewards[-1]


@given(st.lists(st.floats(-1, 1), min_size=2, max_size=30), st.lists(st.floats(-1, 1), min_size=2, max_size=30),
       st.floats(-5, 5))
def test_constant_reward_shift_keeps_label_order(ra, rb, c):
    # equal-length episodes shift by the same geometric sum
    n = min(len(ra), len(rb))
    ra, rb, gamma = np.array(ra[:n]), np.array(rb[:n]), 0.9
    a, b = compute_returns(ra, gamma)[0], compute_returns(rb, gamma)[0]
    a2, b2 = compute_returns(ra + c, gamma)[0], compute_returns(rb + c, gamma)[0]
    if abs(a - b) > 1e-9:
        assert (a > b) == (a2 > b2)


# -- inverse dynamics ---------------------------------------------------------------

def _tiny_invdyn(seed=0, d_s=2, d_a=1):
    net = Mlp.init((2 * d_s, 6, d_a), np.random.default_rng(seed))
    return InverseDynamics(net, d_s, d_a, 1, -np.ones(d_a), np.ones(d_a))


def test_invdyn_loss_zero_model_gives_mean_square_action():
    model = _tiny_invdyn()
    for p in model.net.parameters():
        p.data[...] = 0.0
    a = np.random.default_rng(0).standard_normal((12, 1))
    s = np.random.default_rng(1).standard_normal((12, 2))
    assert invdyn_loss(model, s, s, a).item() == pytest.approx(np.mean(np.sum(a ** 2, axis=1)), rel=1e-12)


def test_invdyn_loss_perfect_model_is_zero():
    model = _tiny_invdyn()
    s = np.random.default_rng(1).standard_normal((5, 2))
    a = model.predict_normalized(s, s).data
    assert invdyn_loss(model, s, s, a).item() == 0.0


@given(st.integers(0, 10_000))
def test_invdyn_loss_non_negative(seed):
    rng = np.random.default_rng(seed)
    model = _tiny_invdyn(seed)
    assert invdyn_loss(model, rng.standard_normal((4, 2)), rng.standard_normal((4, 2)),
                       rng.standard_normal((4, 1))).item() >= 0.0


def test_invdyn_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    model = _tiny_invdyn()
    s, s1, a = rng.standard_normal((6, 2)), rng.standard_normal((6, 2)), rng.standard_normal((6, 1))
    assert max(fd_relative_errors(lambda: invdyn_loss(model, s, s1, a), model.net.parameters())) < 1e-4


def _integrator_pairs(n, seed):
    """Transitions away from the velocity clamp, where the inverse map is linear."""
    rng = np.random.default_rng(seed)
    s = np.column_stack([rng.uniform(-1.5, 1.5, n), rng.uniform(-0.85, 0.85, n)])
    a = rng.uniform(-1, 1, (n, 1))
    s1 = np.array([env_step(INTEGRATOR, si, ai)[0] for si, ai in zip(s, a)])
    return s, s1, a


@pytest.fixture(scope="module")
def integrator_invdyn():
    s, s1, a = _integrator_pairs(3000, 0)
    norm = Normalizer(np.array([-2.0, -1.0]), np.array([2.0, 1.0]))
    cfg = AuxConfig(hidden=32, depth=2, lr=3e-3, batch_size=128, steps=3000, seed=0)
    model, metrics = train_invdyn(norm.normalize(s), norm.normalize(s1), a, [-1.0], [1.0], 1, cfg)
    return model, norm, metrics


def test_integrator_invdyn_held_out_mse(integrator_invdyn):
    model, norm, metrics = integrator_invdyn
    s, s1, a = _integrator_pairs(500, 99)
    pred = model.predict_normalized(norm.normalize(s), norm.normalize(s1)).data
    assert np.mean((pred - a) ** 2) < 1e-3
    assert metrics["holdout_mse"] < metrics["holdout_mse_initial"]


def test_integrator_action_recovery(integrator_invdyn):
    model, norm, _ = integrator_invdyn
    s = np.zeros(2)
    s_unit, _, _ = env_step(INTEGRATOR, s, [1.0])
    assert extract_action(model, norm.normalize(s), norm.normalize(s_unit)) == pytest.approx([1.0], abs=0.05)
    s_null, _, _ = env_step(INTEGRATOR, s, [0.0])
    assert extract_action(model, norm.normalize(s), norm.normalize(s_null)) == pytest.approx([0.0], abs=0.05)
    # the recovered action drives the true forward map back onto s_next
    s0 = np.array([0.3, -0.2])
    target, _, _ = env_step(INTEGRATOR, s0, [0.6])
    a_hat = extract_action(model, norm.normalize(s0), norm.normalize(target))
    reached, _, _ = env_step(INTEGRATOR, s0, a_hat)
    assert np.max(np.abs(norm.normalize(reached) - norm.normalize(target))) < 0.05


def test_constant_action_dataset():
    rng = np.random.default_rng(0)
    s, s1 = rng.uniform(-1, 1, (400, 2)), rng.uniform(-1, 1, (400, 2))
    a = np.full((400, 1), 0.37)
    model, _ = train_invdyn(s, s1, a, [-1.0], [1.0], 1, AuxConfig(hidden=16, lr=1e-2, steps=4000, batch_size=128,
                                                                lr_schedule="cosine"))
    pred = model.predict_normalized(s, s1).data
    assert np.mean((pred - 0.37) ** 2) < 1e-6


def test_invdyn_determinism_and_round_trip(tmp_path):
    s, s1, a = _integrator_pairs(200, 0)
    cfg = AuxConfig(hidden=8, steps=50, batch_size=32, seed=4)
    m1, _ = train_invdyn(s, s1, a, [-1.0], [1.0], 1, cfg)
    m2, _ = train_invdyn(s, s1, a, [-1.0], [1.0], 1, cfg)
    save_invdyn(tmp_path / "a.ckpt", m1)
    save_invdyn(tmp_path / "b.ckpt", m2)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    loaded = load_invdyn(tmp_path / "a.ckpt")
    assert np.array_equal(extract_action(loaded, s[:5], s1[:5]), extract_action(m1, s[:5], s1[:5]))
    with pytest.raises(ContractError):
        load_critic(tmp_path / "a.ckpt")


def test_invdyn_needs_pairs():
    with pytest.raises(ContractError):
        train_invdyn(np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 1)), [-1.0], [1.0], 1)


# -- critic -------------------------------------------------------------------------

def test_constant_returns():
    w = np.random.default_rng(0).uniform(-1, 1, (300, 4, 2))
    critic, _ = train_critic(w, np.full(300, 2.5), 0.99, AuxConfig(hidden=16, steps=500, batch_size=64, lr=3e-3))
    assert np.mean((critic(w) - 2.5) ** 2) < 1e-4


def test_critic_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    critic = Critic(Mlp.init((6, 5, 1), rng), 3, 2, 0.99, 0.4, 1.7)
    w, r = rng.standard_normal((5, 3, 2)), rng.standard_normal(5)
    assert max(fd_relative_errors(lambda: critic_loss(critic, w, r), critic.net.parameters())) < 1e-4


def test_critic_rejects_wrong_window_shape():
    critic = Critic(Mlp.init((6, 5, 1), np.random.default_rng(0)), 3, 2, 0.99)
    with pytest.raises(ContractError):
        critic(np.zeros((2, 2, 3)))


def test_critic_ranks_held_out_maze_windows(tmp_path):
    # dense distance-to-goal reward with short discounting, so the label is a function of the window
    ds = collect_dataset(MAZE, "mixture", n_episodes=60, seed=3, stride=2, horizon=8, gamma=0.5)
    goal = np.asarray(MAZE.goal)
    for t in ds.trajectories:
        t.rewards = -np.linalg.norm(t.states[:, :2] - goal, axis=1)
    train = make_windows(ds, split="train")
    held = make_windows(ds, split="holdout")
    cfg = AuxConfig(hidden=64, depth=2, lr=1e-3, steps=1500, batch_size=128)
    critic, metrics = train_critic(train.windows, train.returns, ds.gamma, cfg)
    assert metrics["holdout_mse"] < metrics["holdout_mse_initial"]
    idx = np.random.default_rng(0).choice(len(held.windows), 100, replace=False)
    assert spearmanr(critic(held.windows[idx]), held.returns[idx]).statistic > 0.8
    save_critic(tmp_path / "c.ckpt", critic)
    assert np.array_equal(load_critic(tmp_path / "c.ckpt")(held.windows[:7]), critic(held.windows[:7]))
