import math

import numpy as np
import pytest

from crossway.coordination import CoordinationInstance, PendingRobot, SequentialOutcome
from crossway.errors import InputError
from crossway.harness import crossing_geometry, toy_scenario
from crossway.kinematics import Robot, build_trajectory
from crossway.learning import (
    OnlineLearner,
    OUNoise,
    ReplayBuffer,
    Trainer,
    TrainerConfig,
    Transition,
    cml_train,
    ou_noise_step,
    reward,
    softmax_action,
)
from crossway.nets import N_FEATURES
from crossway.policies import FeatureBounds
from crossway.solver import SolveResult

GEOM = crossing_geometry(num_lanes=4)  # 7 m approaches


def make_robot(rid, lane, **kw):
    base = dict(id=rid, lane=lane, length=0.75, priority=1.0, v_max=1.5,
                u_min=-2.0, u_max=2.0, arrival_time=0.0)
    base.update(kw)
    return Robot(**base)


def make_instance(pending, t=6.0):
    return CoordinationInstance(k=1, t=t, pending=list(pending), committed=[],
                                T_c=6.0, T_h=30.0, dt=0.1, geom=GEOM)


def entered_outcome(rid, traj):
    res = SolveResult(traj, float(traj.x[-1] - traj.x[0]), True, "test")
    return SequentialOutcome([rid], [], {rid: res}, [rid])


# -------------------------------------------------------------------- reward

def test_reward_empty_phase():
    inst = make_instance([])
    out = SequentialOutcome([], [], {}, [])
    assert reward(inst, out, T_r=20.0) == 0.0


def test_reward_single_entered_robot():
    # Constant 0.5 m/s from arrival: 5 m covered in the first 10 s.
    p = PendingRobot(make_robot(0, 0), x=-4.0, v=0.5)
    traj = build_trajectory(0.0, 0.1, -7.0, 0.5, [0.0] * 200, 1.5)
    out = entered_outcome(0, traj)
    assert reward(make_instance([p]), out, T_r=10.0) == pytest.approx(5.0)


def test_reward_weighted_and_averaged():
    a = PendingRobot(make_robot(0, 0, priority=4.0), x=-4.0, v=0.5)
    b = PendingRobot(make_robot(1, 1), x=-7.0, v=0.0)
    traj = build_trajectory(0.0, 0.1, -7.0, 0.5, [0.0] * 200, 1.5)
    out = SequentialOutcome(
        [0], [1], {0: SolveResult(traj, 10.0, True, "test")}, [0]
    )
    # entered: 4 * 5 / 2; deferred at x = -d: zero progress, zero penalty
    assert reward(make_instance([a, b]), out, T_r=10.0) == pytest.approx(10.0)


def test_reward_deferral_penalty_scales_with_progress():
    p = PendingRobot(make_robot(0, 0, priority=2.0), x=-4.0, v=0.5)  # covered 3 m
    out = SequentialOutcome([], [0], {}, [])
    assert reward(make_instance([p]), out, T_r=10.0) == pytest.approx(-2.0 * 9.0)


def test_reward_printed_penalty_form():
    p = PendingRobot(make_robot(0, 0), x=-4.0, v=0.5)
    out = SequentialOutcome([], [0], {}, [])
    # printed form penalizes (d - x)^2 = 11^2 instead of (d + x)^2 = 3^2
    assert reward(make_instance([p]), out, T_r=10.0,
                  printed_penalty_form=True) == pytest.approx(-121.0)


# ------------------------------------------------------------------- softmax

def test_softmax_uniform():
    for n in (1, 3, 7):
        out = softmax_action(np.full(n, 2.5))
        assert np.allclose(out, 1.0 / n)


def test_softmax_worked_example():
    out = softmax_action(np.array([0.0, math.log(3.0)]))
    assert np.allclose(out, [0.25, 0.75])


def test_softmax_shift_invariant_and_stable():
    z = np.array([1000.0, 1001.0, 999.0])
    out = softmax_action(z)
    assert np.allclose(out, softmax_action(z - 1000.0))
    assert np.all(np.isfinite(out))


# ------------------------------------------------------------------ OU noise

def test_ou_deterministic_mean_reversion():
    rng = np.random.default_rng(0)
    state = np.array([0.0])
    state, _ = ou_noise_step(state, theta=0.1, sigma=0.0, dt=1.0, rng=rng)
    assert state[0] == 0.0
    state = np.array([1.0])
    state, _ = ou_noise_step(state, theta=0.1, sigma=0.0, dt=1.0, rng=rng)
    assert state[0] == pytest.approx(0.9)


def test_ou_stationary_variance():
    theta, sigma = 0.05, 0.2
    rng = np.random.default_rng(1)
    state = np.zeros(1)
    samples = np.empty(1_000_000)
    for i in range(len(samples)):
        state, out = ou_noise_step(state, theta, sigma, 1.0, rng)
        samples[i] = out[0]
    target = sigma * sigma / (2.0 * theta)
    assert abs(np.var(samples[10_000:]) - target) / target < 0.10


def test_ou_noise_sigma_decay():
    noise = OUNoise(dim=2, decay_steps=100, seed=0)
    assert noise.sigma() == pytest.approx(0.2)
    for _ in range(200):
        noise.sample()
    assert noise.sigma() == pytest.approx(0.01)


# ------------------------------------------------------------- replay buffer

def rand_transition(rng, n):
    return Transition(rng.normal(size=(n, N_FEATURES)), rng.normal(size=n),
                      float(rng.normal()), rng.normal(size=(n, N_FEATURES)))


def test_buffer_grows_by_one_until_capacity():
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(3, capacity=5)
    for i in range(8):
        buf.add(rand_transition(rng, 3))
        assert len(buf) == min(i + 1, 5)


def test_buffer_fifo_eviction():
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(2, capacity=3)
    for i in range(5):
        tr = rand_transition(rng, 2)
        tr.reward = float(i)
        buf.add(tr)
    assert buf.rewards == [2.0, 3.0, 4.0]


def test_buffer_shape_validation():
    buf = ReplayBuffer(3)
    with pytest.raises(InputError):
        buf.add(rand_transition(np.random.default_rng(0), 4))


def test_buffer_merge_sizes():
    rng = np.random.default_rng(0)
    a, b = ReplayBuffer(2), ReplayBuffer(2)
    for _ in range(100):
        a.add(rand_transition(rng, 2))
    for _ in range(200):
        b.add(rand_transition(rng, 2))
    assert len(ReplayBuffer.merge([a, b])) == 300


def test_buffer_serialization_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    buf = ReplayBuffer(2)
    for _ in range(10):
        buf.add(rand_transition(rng, 2))
    path = str(tmp_path / "buffer.txt")
    buf.save(path)
    clone = ReplayBuffer.load(path)
    assert len(clone) == 10
    for i in range(10):
        assert np.array_equal(buf.states[i], clone.states[i])
        assert np.array_equal(buf.actions[i], clone.actions[i])
        assert buf.rewards[i] == clone.rewards[i]
        assert np.array_equal(buf.next_states[i], clone.next_states[i])


# ------------------------------------------------------------------ training

def tiny_trainer(seed=0):
    return Trainer(TrainerConfig(n_robots=3, critic_hidden=4, batch_size=4), seed=seed)


def rand_batch(rng, n=3, B=5):
    return (rng.normal(size=(B, n, N_FEATURES)), rng.normal(size=(B, n)),
            rng.normal(size=B), rng.normal(size=(B, n, N_FEATURES)))


def test_critic_loss_zero_when_consistent():
    tr = tiny_trainer()
    for net in (tr.critic, tr.target_critic):
        net.set_flat(np.zeros(net.n_params))
    tr.cfg.gamma = 0.0
    rng = np.random.default_rng(0)
    S, A, _, S2 = rand_batch(rng)
    batch = (S, A, np.zeros(len(S)), S2)  # Q = 0 = R everywhere
    assert tr.critic_loss(batch) == 0.0


def test_critic_descent_on_fixed_batch():
    tr = tiny_trainer(seed=2)
    batch = rand_batch(np.random.default_rng(1), B=1)
    prev = tr.critic_loss(batch)
    for _ in range(100):
        tr.critic_update(batch)
        cur = tr.critic_loss(batch)
        assert cur <= prev + 1e-12
        prev = cur


def _critic_flat_grads(tr, batch):
    # Mirrors critic_update's gradient computation without stepping.
    S, A, R, S2 = batch
    B, n, f = S.shape
    A2 = tr._joint_action(tr.target_actor, S2)
    X2 = np.concatenate([S2.reshape(B, n * f), A2], axis=1)
    y = R + tr.cfg.gamma * tr.target_critic(X2)[:, 0]
    X = np.concatenate([S.reshape(B, n * f), A], axis=1)
    Q, cache = tr.critic.forward(X)
    dQ = (2.0 * (Q[:, 0] - y) / B).reshape(-1, 1)
    dws, dbs, _ = tr.critic.backward(cache, dQ)
    return tr.critic.flat_grads(dws, dbs)


def test_critic_gradient_matches_finite_differences():
    tr = tiny_trainer(seed=3)
    batch = rand_batch(np.random.default_rng(4))
    analytic = _critic_flat_grads(tr, batch)
    theta = tr.critic.get_flat()
    eps = 1e-6
    idx = np.random.default_rng(5).choice(theta.size, size=40, replace=False)
    for i in idx:
        up, dn = theta.copy(), theta.copy()
        up[i] += eps
        dn[i] -= eps
        tr.critic.set_flat(up)
        lp = tr.critic_loss(batch)
        tr.critic.set_flat(dn)
        lm = tr.critic_loss(batch)
        fd = (lp - lm) / (2 * eps)
        assert abs(fd - analytic[i]) <= 1e-4 * max(1.0, abs(fd))
    tr.critic.set_flat(theta)


def test_actor_gradient_matches_finite_differences():
    tr = tiny_trainer(seed=6)
    batch = rand_batch(np.random.default_rng(7))
    dws, dbs = tr.actor_gradient(batch)
    analytic = tr.actor.flat_grads(dws, dbs)
    theta = tr.actor.get_flat()
    eps = 1e-6
    for i in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[i] += eps
        dn[i] -= eps
        tr.actor.set_flat(up)
        jp = tr.actor_objective(batch)
        tr.actor.set_flat(dn)
        jm = tr.actor_objective(batch)
        fd = (jp - jm) / (2 * eps)
        assert abs(fd - analytic[i]) <= 1e-4 * max(1.0, abs(fd))
    tr.actor.set_flat(theta)


def test_actor_gradient_zero_when_critic_ignores_action():
    tr = tiny_trainer(seed=8)
    tr.critic.set_flat(np.zeros(tr.critic.n_params))
    dws, dbs = tr.actor_gradient(rand_batch(np.random.default_rng(9)))
    assert np.all(tr.actor.flat_grads(dws, dbs) == 0.0)


def test_polyak_worked_examples():
    tr = tiny_trainer(seed=10)
    tr.polyak_update(rho=1.0)
    assert np.array_equal(tr.target_actor.get_flat(), tr.actor.get_flat())

    tr.target_actor.set_flat(np.zeros(tr.actor.n_params))
    tr.actor.set_flat(np.ones(tr.actor.n_params))
    tr.polyak_update(rho=0.5)
    assert np.allclose(tr.target_actor.get_flat(), 0.5)

    with pytest.raises(InputError):
        tr.polyak_update(rho=0.0)


def test_polyak_geometric_convergence():
    tr = tiny_trainer(seed=11)
    tr.target_actor.set_flat(np.zeros(tr.actor.n_params))
    tr.actor.set_flat(np.ones(tr.actor.n_params))
    for k in range(1, 30):
        tr.polyak_update(rho=0.1)
        expect = 1.0 - 0.9 ** k
        assert np.allclose(tr.target_actor.get_flat(), expect, atol=1e-12)


def test_cml_train_zero_iterations_leaves_actor_at_init():
    rng = np.random.default_rng(12)
    buf = ReplayBuffer(3)
    for _ in range(10):
        buf.add(rand_transition(rng, 3))
    cfg = TrainerConfig(n_robots=3, critic_hidden=4)
    trained, curve = cml_train([buf], iterations=0, seed=5, cfg=cfg)
    fresh = Trainer(cfg, seed=5)
    assert np.array_equal(trained.actor.get_flat(), fresh.actor.get_flat())
    assert curve == []


# ------------------------------------------------------------ online learner

def empty_instance(t=6.0):
    return CoordinationInstance(k=1, t=t, pending=[], committed=[], T_c=6.0,
                                T_h=30.0, dt=0.1, geom=GEOM)


def test_online_learner_empty_phase_records_zero_reward():
    sc = toy_scenario()
    bounds = FeatureBounds.from_scenario(sc)
    tr = tiny_trainer()
    buf = ReplayBuffer(3)
    learner = OnlineLearner(tr, bounds, buf, noise=None, T_r=sc.T_r)
    rng = np.random.default_rng(0)
    assert learner.precedence(empty_instance(6.0), rng) == {}
    learner.observe(empty_instance(6.0), SequentialOutcome([], [], {}, []))
    learner.precedence(empty_instance(12.0), rng)  # closes the transition
    assert len(buf) == 1
    assert buf.rewards[0] == 0.0


def test_online_learner_deterministic_without_noise():
    sc = toy_scenario()
    bounds = FeatureBounds.from_scenario(sc)
    p = PendingRobot(make_robot(0, 0), x=-3.0, v=1.0)
    outs = []
    for _ in range(2):
        learner = OnlineLearner(tiny_trainer(seed=4), bounds, ReplayBuffer(3),
                                noise=None, T_r=sc.T_r)
        outs.append(learner.precedence(make_instance([p]),
                                       np.random.default_rng(0)))
    assert outs[0] == outs[1]
