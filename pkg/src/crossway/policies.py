"""Precedence-index policies and the per-robot feature vector.

A policy maps a coordination snapshot to one real-valued precedence index per
pending robot; only the induced order matters downstream.  All feature
computations use information a robot could obtain locally or from its lane
followers and the committed robots' broadcast exit times, so any policy here
remains deployable without a central state collector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .coordination import CoordinationInstance, PendingRobot, best_sequence
from .errors import InputError
from .nets import MLP, N_FEATURES
from .solver import solve_relaxed_joint

VELOCITY_GUARD = 1e-3  # m/s, guards division by current velocity at v = 0


@dataclass(frozen=True)
class FeatureBounds:
    """Scenario-level scales for min-max feature normalization."""

    d_max: float
    v_max: float
    priority_max: float
    num_lanes: int
    u_max: float
    t_scale: float
    followers_max: float = 20.0

    @classmethod
    def from_scenario(cls, scenario) -> "FeatureBounds":
        geom = scenario.geom
        return cls(
            d_max=max(geom.approach_length),
            v_max=max(geom.lane_speed_limit),
            priority_max=5.0,
            num_lanes=geom.num_lanes,
            u_max=scenario.u_max,
            t_scale=scenario.T_h,
        )


def features(p: PendingRobot, inst: CoordinationInstance, geom) -> np.ndarray:
    """The 10 raw per-robot features, in fixed order.

    1 distance traveled since RoI entry, 2 velocity, 3 priority, 4 lane id,
    5 velocity bound, 6 acceleration bound, 7 time since arrival,
    8 estimated minimum wait (latest committed exit minus now, floored at 0,
    over all committed robots regardless of lane), 9 follower count on the
    lane, 10 mean distance to those followers (0 with fewer than 2).
    """
    r = p.robot
    d = geom.approach_length[r.lane]
    wait = 0.0
    for c in inst.committed:
        if c.exit_time is not None:
            wait = max(wait, c.exit_time - inst.t)
    follower_dists = sorted(
        p.x - q.x
        for q in inst.pending
        if q.robot.lane == r.lane and q.robot.id != r.id and q.x < p.x
    )
    mean_gap = float(np.mean(follower_dists)) if len(follower_dists) >= 2 else 0.0
    return np.array(
        [
            p.x + d,
            p.v,
            r.priority,
            float(r.lane),
            r.v_max,
            r.u_max,
            inst.t - r.arrival_time,
            wait,
            float(len(follower_dists)),
            mean_gap,
        ]
    )


def normalize_features(raw: np.ndarray, bounds: FeatureBounds) -> np.ndarray:
    scale = np.array(
        [
            bounds.d_max,
            bounds.v_max,
            bounds.priority_max,
            max(bounds.num_lanes - 1, 1),
            bounds.v_max,
            bounds.u_max,
            bounds.t_scale,
            bounds.t_scale,
            bounds.followers_max,
            bounds.d_max,
        ]
    )
    return raw / scale


def pseudo_features(bounds: FeatureBounds) -> np.ndarray:
    """Sentinel features for padding slots: far behind RoI entry, priority 0."""
    raw = np.zeros(N_FEATURES)
    raw[0] = -10.0 * bounds.d_max
    return raw


def padded_state(
    inst: CoordinationInstance, bounds: FeatureBounds, n_robots: int
) -> tuple[list[int], np.ndarray]:
    """Normalized (n_robots, 10) state matrix with pseudo-robot padding.

    Real robots come first, ordered by arrival time then id; returns their ids
    alongside.  Raises if the instance exceeds the pad size.
    """
    pending = sorted(inst.pending, key=lambda p: (p.robot.arrival_time, p.robot.id))
    if len(pending) > n_robots:
        raise InputError(
            f"{len(pending)} pending robots exceed pad size {n_robots}"
        )
    rows = [normalize_features(features(p, inst, inst.geom), bounds) for p in pending]
    pseudo = normalize_features(pseudo_features(bounds), bounds)
    while len(rows) < n_robots:
        rows.append(pseudo)
    return [p.robot.id for p in pending], np.array(rows)


def derived_pad_bound(geom, min_length: float) -> int:
    """Upper bound on simultaneously pending robots: full approaches bumper to bumper."""
    per_lane = [math.ceil(d / min_length) for d in geom.approach_length]
    return sum(per_lane)


# ---------------------------------------------------------------------------
# Heuristic indices
# ---------------------------------------------------------------------------


def heuristic_precedence(kind: str, p: PendingRobot) -> float:
    """TTR / PDT / CDT / arrival-order indices (larger index crosses earlier)."""
    dist = -p.x
    v = max(p.v, VELOCITY_GUARD)
    if kind == "ttr":
        return -dist / v
    if kind == "pdt":
        return -dist * dist / v
    if kind == "cdt":
        return -(0.5 * dist + 0.5 * dist / v)
    if kind == "fcfs-order":
        return -p.robot.arrival_time
    raise InputError(f"unknown heuristic: {kind}")


def neural_precedence(net: MLP, feature_vec: np.ndarray) -> float:
    """Deployment-time forward pass; no softmax outside training."""
    return float(net(feature_vec.reshape(1, -1))[0, 0])


# ---------------------------------------------------------------------------
# Policy objects
# ---------------------------------------------------------------------------


class Policy:
    name = "base"
    is_fcfs = False

    def precedence(self, inst: CoordinationInstance, rng) -> dict[int, float]:
        raise NotImplementedError


class HeuristicPolicy(Policy):
    def __init__(self, kind: str):
        heuristic_precedence(kind, _PROBE)  # validate kind early
        self.kind = kind
        self.name = kind

    def precedence(self, inst, rng):
        return {p.robot.id: heuristic_precedence(self.kind, p) for p in inst.pending}


class RandomPolicy(Policy):
    name = "random"

    def precedence(self, inst, rng):
        return {p.robot.id: float(rng.random()) for p in inst.pending}


class OCPPolicy(Policy):
    """Order by virtual entry (then exit) times from the relaxed joint solve."""

    name = "ocp"

    def precedence(self, inst, rng):
        virtual = solve_relaxed_joint(inst)
        ranked = sorted(inst.pending, key=lambda p: virtual[p.robot.id])
        return {p.robot.id: float(-i) for i, p in enumerate(ranked)}


class NeuralPolicy(Policy):
    def __init__(self, net: MLP, bounds: FeatureBounds, name: str = "neural"):
        self.net = net
        self.bounds = bounds
        self.name = name

    def precedence(self, inst, rng):
        out = {}
        for p in inst.pending:
            f = normalize_features(features(p, inst, inst.geom), self.bounds)
            out[p.robot.id] = neural_precedence(self.net, f)
        return out


class BestSeqPolicy(Policy):
    """Exhaustive-search order, encoded as precedence indices."""

    name = "bestseq"

    def __init__(self, cap: int = 8):
        self.cap = cap

    def precedence(self, inst, rng):
        if not inst.pending:
            return {}
        outcome, _ = best_sequence(inst, cap=self.cap)
        n = len(inst.pending)
        rank = {rid: float(n - i) for i, rid in enumerate(outcome.order)}
        fallback = {rid: float(-i - 1) for i, rid in enumerate(outcome.deferred)}
        return {
            p.robot.id: rank.get(p.robot.id, fallback.get(p.robot.id, -n - 1.0))
            for p in inst.pending
        }


class FcfsMode(Policy):
    """Marker policy: run_stream plans each robot in full on arrival."""

    name = "fcfs"
    is_fcfs = True

    def precedence(self, inst, rng):  # pragma: no cover - never consulted
        return {p.robot.id: -p.robot.arrival_time for p in inst.pending}


class _Probe:
    class robot:
        arrival_time = 0.0

    x = -1.0
    v = 1.0


_PROBE = _Probe()


def make_policy(spec: str, bounds: FeatureBounds | None = None) -> Policy:
    """Build a policy from its CLI name (``neural:<file>`` loads a saved net)."""
    if spec == "fcfs":
        return FcfsMode()
    if spec in ("ttr", "pdt", "cdt", "fcfs-order"):
        return HeuristicPolicy(spec)
    if spec == "ocp":
        return OCPPolicy()
    if spec == "bestseq":
        return BestSeqPolicy()
    if spec == "random":
        return RandomPolicy()
    if spec.startswith("neural:"):
        if bounds is None:
            raise InputError("neural policy needs feature bounds from a scenario")
        net = MLP.load(spec.split(":", 1)[1])
        return NeuralPolicy(net, bounds)
    raise InputError(f"unknown policy: {spec}")
