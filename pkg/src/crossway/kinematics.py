"""Robot state, sampled trajectories and the safety primitives.

All safety reasoning reduces to three scalar facts about a double integrator
with bounded acceleration: the stopping distance of a maximum braking maneuver
(MBM), the safe following distance derived from it, and whether a robot can
still stop before a downstream boundary.  Everything here is a pure function
of its arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import LaneGeometry

DEFAULT_DT = 0.1


@dataclass
class Robot:
    """Identity, lane and kinematic limits of one robot.

    Position is the lane coordinate of the robot's front end; its rear trails
    by ``length``.  ``coord_start`` / ``entry_time`` / ``exit_time`` are
    bookkeeping filled in as the robot progresses through its phases.
    """

    id: int
    lane: int
    length: float
    priority: float
    v_max: float
    u_min: float
    u_max: float
    arrival_time: float
    coord_start: float | None = None
    entry_time: float | None = None
    exit_time: float | None = None

    def __post_init__(self):
        assert self.length > 0 and self.v_max > 0 and self.priority > 0
        assert self.u_min < 0 < self.u_max


def propagate(
    x: float,
    v: float,
    u: float,
    dt: float,
    v_max: float = math.inf,
) -> tuple[float, float]:
    """One exact double-integrator step with analytic velocity-clamp splitting.

    If the velocity bound 0 or ``v_max`` is reached mid-step, the step is
    split at the hitting time so the position integral is exact (the clamp is
    never overshot in position).
    """
    if u > 0.0 and v + u * dt > v_max:
        th = (v_max - v) / u
        x += v * th + 0.5 * u * th * th + v_max * (dt - th)
        return x, v_max
    if u < 0.0 and v + u * dt < 0.0:
        th = -v / u
        x += v * th + 0.5 * u * th * th
        return x, 0.0
    return x + v * dt + 0.5 * u * dt * dt, v + u * dt


def mbm_stop_distance(v: float, u_min: float) -> float:
    """Distance covered by a maximum braking maneuver from speed ``v``."""
    return v * v / (-2.0 * u_min)


def safe_following_distance(
    v_follower: float, v_leader: float, leader_length: float, u_min: float
) -> float:
    """Minimum front-to-front gap so that simultaneous MBMs never collide."""
    return leader_length + max(0.0, (v_follower * v_follower - v_leader * v_leader) / (-2.0 * u_min))


def rear_end_satisfied(
    follower: tuple[float, float],
    leader: tuple[float, float],
    leader_length: float,
    u_min: float,
    tol: float = 0.0,
) -> bool:
    xf, vf = follower
    xl, vl = leader
    return xl - xf >= safe_following_distance(vf, vl, leader_length, u_min) - tol


def stoppable_before(x: float, v: float, boundary: float, u_min: float) -> bool:
    """Whether an MBM started now halts at or before ``boundary``."""
    return v * v <= 2.0 * (-u_min) * (boundary - x) + 1e-12


@dataclass
class Trajectory:
    """Uniformly sampled (u, v, x) profile starting at ``t0``.

    ``u`` is piecewise constant over each ``dt`` interval; ``v`` and ``x`` are
    grid-point samples (one more than ``u``) that satisfy the exact clamped
    kinematics of :func:`propagate`.  ``v_max`` records the clamp used when
    the profile was built so in-step interpolation stays exact.
    """

    t0: float
    dt: float
    u: np.ndarray
    v: np.ndarray
    x: np.ndarray
    v_max: float = math.inf

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.x = np.asarray(self.x, dtype=float)
        assert len(self.v) == len(self.u) + 1 and len(self.x) == len(self.u) + 1

    @property
    def n_steps(self) -> int:
        return len(self.u)

    @property
    def t_end(self) -> float:
        return self.t0 + self.n_steps * self.dt

    def state_at(self, t: float) -> tuple[float, float]:
        """Exact (x, v) at time ``t``, clamped to the stored horizon."""
        if t <= self.t0:
            return float(self.x[0]), float(self.v[0])
        if t >= self.t_end:
            return float(self.x[-1]), float(self.v[-1])
        rel = (t - self.t0) / self.dt
        k = min(int(rel), self.n_steps - 1)
        s = t - (self.t0 + k * self.dt)
        if s <= 1e-12:
            return float(self.x[k]), float(self.v[k])
        return propagate(float(self.x[k]), float(self.v[k]), float(self.u[k]), s, self.v_max)


def build_trajectory(
    t0: float,
    dt: float,
    x0: float,
    v0: float,
    controls: list[float],
    v_max: float,
) -> Trajectory:
    """Roll out a control sequence with exact clamped propagation."""
    xs = [x0]
    vs = [v0]
    x, v = x0, v0
    for u in controls:
        x, v = propagate(x, v, u, dt, v_max)
        xs.append(x)
        vs.append(v)
    return Trajectory(t0=t0, dt=dt, u=np.array(controls, dtype=float),
                      v=np.array(vs), x=np.array(xs), v_max=v_max)


def first_crossing_time(traj: Trajectory, threshold: float) -> float | None:
    """First time the position strictly exceeds ``threshold``, interpolated.

    Strict comparison (with a 1e-9 m slack) matters: a robot braking to a
    halt with its front at the threshold (e.g. waiting at the intersection
    boundary for its entry gate) has not crossed it.
    """
    x = traj.x
    idx = np.nonzero(x > threshold + 1e-9)[0]
    if len(idx) == 0:
        return None
    k = int(idx[0])
    if k == 0:
        return traj.t0
    x0, x1 = float(x[k - 1]), float(x[k])
    frac = (threshold - x0) / (x1 - x0) if x1 > x0 else 0.0
    return traj.t0 + (k - 1 + frac) * traj.dt


def boundary_crossing_times(
    traj: Trajectory, geom: LaneGeometry, robot: Robot
) -> tuple[float | None, float | None]:
    """(intersection entry, intersection exit) times for a trajectory.

    Entry is when the front end reaches x = 0; exit when the rear end clears
    the intersection, i.e. the front reaches span + length.  ``None`` if the
    boundary is not reached within the horizon.
    """
    span = geom.intersection_span[robot.lane]
    t_entry = first_crossing_time(traj, 0.0)
    t_exit = first_crossing_time(traj, span + robot.length)
    return t_entry, t_exit


class MotionHistory:
    """Contiguous trajectory segments forming one robot's realized motion.

    Used both as the follower-visible view of a leader (with conservative
    hold-at-final-state extrapolation beyond the known horizon) and as the
    realized-motion record for logging and audits.
    """

    def __init__(self, length: float, clear_x: float = math.inf, u_min: float | None = None):
        self.segments: list[Trajectory] = []
        self.length = length
        # Front position beyond which the robot has left the shared region
        # (rear cleared the intersection) and no longer constrains followers.
        self.clear_x = clear_x
        # Braking bound used to extrapolate beyond the known horizon.  A
        # maximal braking maneuver is the conservative continuation that keeps
        # the rear-end constraint control-invariant for followers; ``None``
        # falls back to an immediate stop (strictly harsher on followers).
        self.u_min = u_min

    def append(self, traj: Trajectory):
        if self.segments:
            assert abs(traj.t0 - self.segments[-1].t_end) < 1e-9
        self.segments.append(traj)

    @property
    def t_start(self) -> float:
        return self.segments[0].t0

    @property
    def t_end(self) -> float:
        return self.segments[-1].t_end

    def state_at(self, t: float) -> tuple[float, float]:
        segs = self.segments
        if t >= segs[-1].t_end:
            # Beyond the known horizon: continue with a maximal braking
            # maneuver to a stop (or stop immediately when no braking bound
            # is known).
            x_end, v_end = float(segs[-1].x[-1]), float(segs[-1].v[-1])
            if self.u_min is None or v_end <= 0.0:
                return x_end, 0.0
            return propagate(x_end, v_end, self.u_min, t - segs[-1].t_end)
        lo, hi = 0, len(segs) - 1
        while lo < hi:
            mid = (lo + hi) // 2
            if t >= segs[mid].t_end:
                lo = mid + 1
            else:
                hi = mid
        return segs[lo].state_at(t)

    def constrains_at(self, t: float) -> bool:
        """False once the robot is known to have left the shared region."""
        x, _ = self.state_at(t)
        return x < self.clear_x - 1e-9
