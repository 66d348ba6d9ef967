import numpy as np
import pytest

from crossway.coordination import CommittedRobot, CoordinationInstance, PendingRobot
from crossway.errors import InputError
from crossway.harness import crossing_geometry, toy_scenario
from crossway.kinematics import Robot
from crossway.nets import MLP, N_FEATURES, make_policy_net
from crossway.policies import (
    FeatureBounds,
    derived_pad_bound,
    features,
    heuristic_precedence,
    make_policy,
    neural_precedence,
    normalize_features,
    padded_state,
    pseudo_features,
)

GEOM = crossing_geometry(num_lanes=4)


def make_robot(rid, lane, **kw):
    base = dict(id=rid, lane=lane, length=0.75, priority=1.0, v_max=1.5,
                u_min=-2.0, u_max=2.0, arrival_time=0.0)
    base.update(kw)
    return Robot(**base)


def make_instance(pending, committed=(), t=0.0):
    return CoordinationInstance(k=1, t=t, pending=list(pending),
                                committed=list(committed), T_c=6.0, T_h=30.0,
                                dt=0.1, geom=GEOM)


def bounds():
    return FeatureBounds.from_scenario(toy_scenario())


# ------------------------------------------------------------------ features

def test_features_fresh_arrival():
    p = PendingRobot(make_robot(0, 0), x=-7.0, v=0.0)
    f = features(p, make_instance([p]), GEOM)
    assert f[0] == 0.0   # distance traveled since entering the approach
    assert f[1] == 0.0   # velocity
    assert f[6] == 0.0   # time since arrival
    assert f[7] == 0.0   # estimated wait, empty intersection
    assert f[8] == 0.0   # follower count
    assert f[9] == 0.0   # mean follower gap


def test_features_distance_traveled():
    p = PendingRobot(make_robot(0, 0), x=-3.5, v=1.0)
    f = features(p, make_instance([p]), GEOM)
    assert f[0] == pytest.approx(3.5)


def test_features_followers():
    front = PendingRobot(make_robot(0, 0), x=-2.0, v=0.0)
    f1 = PendingRobot(make_robot(1, 0), x=-3.0, v=0.0)
    f2 = PendingRobot(make_robot(2, 0), x=-4.0, v=0.0)
    f = features(front, make_instance([front, f1, f2]), GEOM)
    assert f[8] == 2.0
    assert f[9] == pytest.approx(1.5)  # mean of gaps 1 m and 2 m


def test_features_wait_estimate():
    p = PendingRobot(make_robot(0, 0), x=-3.0, v=0.5)
    committed = [CommittedRobot(make_robot(9, 1), None, 2.0, 12.5)]
    f = features(p, make_instance([p], committed, t=4.0), GEOM)
    assert f[7] == pytest.approx(8.5)


def test_normalization_unit_scale():
    b = bounds()
    raw = features(PendingRobot(make_robot(0, 3, priority=5.0), x=0.0, v=1.5),
                   make_instance([PendingRobot(make_robot(0, 3), x=0.0, v=1.5)]),
                   GEOM)
    norm = normalize_features(raw, b)
    assert norm[0] == pytest.approx(1.0)   # full approach covered
    assert norm[1] == pytest.approx(1.0)   # at the speed bound
    assert norm[3] == pytest.approx(1.0)   # last lane index


def test_pseudo_robot_is_out_of_band():
    b = bounds()
    pf = pseudo_features(b)
    assert pf[0] < -b.d_max  # far behind any real robot
    assert pf[2] == 0.0      # zero priority


def test_padded_state_shape_and_order():
    b = bounds()
    robots = [
        PendingRobot(make_robot(3, 0, arrival_time=2.0), x=-1.0, v=0.0),
        PendingRobot(make_robot(1, 1, arrival_time=1.0), x=-2.0, v=0.0),
    ]
    ids, state = padded_state(make_instance(robots), b, 6)
    assert ids == [1, 3]  # sorted by arrival time
    assert state.shape == (6, N_FEATURES)
    with pytest.raises(InputError):
        padded_state(make_instance(robots), b, 1)


def test_derived_pad_bound():
    # 4 approaches of 7 m, robots at least 0.75 m long -> 10 per lane
    assert derived_pad_bound(GEOM, 0.75) == 40


# ---------------------------------------------------------------- heuristics

def test_heuristic_worked_examples():
    p = PendingRobot(make_robot(0, 0), x=-3.0, v=1.5)
    assert heuristic_precedence("ttr", p) == pytest.approx(-2.0)
    assert heuristic_precedence("pdt", p) == pytest.approx(-6.0)
    assert heuristic_precedence("cdt", p) == pytest.approx(-2.5)


def test_heuristic_closer_robot_wins():
    near = PendingRobot(make_robot(0, 0), x=-1.0, v=1.0)
    far = PendingRobot(make_robot(1, 1), x=-4.0, v=1.0)
    for kind in ("ttr", "pdt", "cdt"):
        assert heuristic_precedence(kind, near) > heuristic_precedence(kind, far)


def test_heuristic_zero_velocity_guard():
    p = PendingRobot(make_robot(0, 0), x=-3.0, v=0.0)
    for kind in ("ttr", "pdt", "cdt"):
        assert np.isfinite(heuristic_precedence(kind, p))


def test_unknown_heuristic_rejected():
    with pytest.raises(InputError):
        make_policy("sorted-by-vibes")


# ------------------------------------------------------------------- network

def test_policy_net_shape():
    net = make_policy_net(seed=0)
    out = net(np.zeros((5, N_FEATURES)))
    assert out.shape == (5, 1)


def test_all_zero_weights_give_zero():
    net = make_policy_net(seed=0)
    net.set_flat(np.zeros(net.n_params))
    x = np.random.default_rng(0).normal(size=(3, N_FEATURES))
    assert np.all(net(x) == 0.0)


def test_hand_set_identity_on_feature():
    # Weights routing feature 1 (velocity) straight through all linear paths.
    net = MLP([N_FEATURES, 4, 2, 1], ["relu", "linear", "linear"])
    net.set_flat(np.zeros(net.n_params))
    net.weights[0][1, 0] = 1.0   # feature 1 -> hidden 0
    net.weights[1][0, 0] = 1.0
    net.weights[2][0, 0] = 1.0
    rng = np.random.default_rng(1)
    for _ in range(10):
        f = np.abs(rng.normal(size=N_FEATURES))  # ReLU passthrough needs >= 0
        # independent matrix arithmetic oracle
        w0, w1, w2 = net.weights
        expect = float((np.maximum(f @ w0, 0.0) @ w1 @ w2)[0])
        assert neural_precedence(net, f) == pytest.approx(expect, abs=1e-10)
        assert neural_precedence(net, f) == pytest.approx(f[1], abs=1e-10)


def test_net_forward_matches_manual_matmul():
    net = make_policy_net(seed=7)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, N_FEATURES))
    a = x
    for w, b, act in zip(net.weights, net.biases, net.activations):
        a = a @ w + b
        if act == "relu":
            a = np.maximum(a, 0.0)
    assert np.allclose(net(x), a, atol=1e-12)


def test_net_serialization_round_trip(tmp_path):
    net = make_policy_net(seed=3)
    path = str(tmp_path / "net.txt")
    net.save(path)
    clone = MLP.load(path)
    assert np.array_equal(net.get_flat(), clone.get_flat())


# -------------------------------------------------------------- policy objects

def test_policies_produce_index_per_pending():
    robots = [PendingRobot(make_robot(i, i % 4, arrival_time=float(i)), x=-1.0 - i, v=0.5)
              for i in range(4)]
    inst = make_instance(robots)
    rng = np.random.default_rng(0)
    for spec in ("ttr", "pdt", "cdt", "fcfs-order", "random", "ocp", "bestseq"):
        policy = make_policy(spec, bounds())
        prec = policy.precedence(inst, rng)
        assert sorted(prec) == [0, 1, 2, 3], spec


def test_ocp_orders_by_virtual_entry():
    near = PendingRobot(make_robot(0, 0), x=-1.0, v=1.0)
    far = PendingRobot(make_robot(1, 1), x=-5.0, v=0.0)
    policy = make_policy("ocp")
    prec = policy.precedence(make_instance([near, far]), np.random.default_rng(0))
    assert prec[0] > prec[1]


def test_neural_policy_from_file(tmp_path):
    net = make_policy_net(seed=0)
    path = str(tmp_path / "actor.txt")
    net.save(path)
    policy = make_policy(f"neural:{path}", bounds())
    p = PendingRobot(make_robot(0, 0), x=-3.0, v=1.0)
    prec = policy.precedence(make_instance([p]), np.random.default_rng(0))
    assert set(prec) == {0}
    with pytest.raises(InputError):
        make_policy(f"neural:{path}")  # bounds are required
