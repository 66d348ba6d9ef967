"""Per-robot trajectory optimization.

The planning problem is always the same shape: maximize distance covered over
a fixed horizon subject to acceleration/velocity bounds, rear-end safety
against one committed leader trajectory, and (optionally) an earliest
intersection-entry time.  Because every state constraint here is control
invariant (braking at the limit always preserves it), a greedy
maximal-acceleration sweep is optimal up to time discretization; an exact
dynamic program over quantized controls serves as the independent check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleEntryError, InputError, StateExplosionError
from .kinematics import (
    DEFAULT_DT,
    MotionHistory,
    Robot,
    Trajectory,
    build_trajectory,
    first_crossing_time,
    propagate,
    safe_following_distance,
    stoppable_before,
)

_U_RESOLUTION = 1e-6
_SAFETY_SLACK = 1e-9


@dataclass
class SolveRequest:
    """One robot's planning problem over ``[t_start, t_end]``.

    ``entry_gate`` is the earliest allowed intersection-entry time;
    ``math.inf`` keeps the robot stoppable before the intersection for the
    whole horizon (the provisional-phase constraint).  ``leader`` is the
    committed motion of the immediately preceding robot on the same lane.
    """

    robot: Robot
    x0: float
    v0: float
    t_start: float
    t_end: float
    dt: float = DEFAULT_DT
    leader: MotionHistory | None = None
    entry_gate: float | None = None
    intersection_span: float | None = None

    def n_steps(self) -> int:
        span = self.t_end - self.t_start
        if span < 0:
            raise InputError("t_end must not precede t_start")
        n = round(span / self.dt)
        if abs(n * self.dt - span) > 1e-9:
            raise InputError("horizon must be an integer multiple of dt")
        return n


@dataclass
class SolveResult:
    trajectory: Trajectory
    objective: float
    crossed: bool
    status: str
    entry_time: float | None = None
    exit_time: float | None = None


def _leader_samples(req: SolveRequest, n: int) -> list[tuple[float, float] | None]:
    """Leader (x, v) at each grid time; None where the leader no longer binds."""
    if req.leader is None:
        return [None] * (n + 1)
    out = []
    for k in range(n + 1):
        t = req.t_start + k * req.dt
        if not req.leader.constrains_at(t):
            out.append(None)
        else:
            out.append(req.leader.state_at(t))
    return out


def _gated_flags(req: SolveRequest, n: int) -> list[bool]:
    """Whether each step (indexed by its start time) is still entry-gated.

    Keeping the gate active for every step that starts before the gate time
    guarantees the realized entry time is never earlier than the gate.
    """
    if req.entry_gate is None:
        return [False] * n
    return [req.t_start + k * req.dt < req.entry_gate - 1e-9 for k in range(n)]


def _state_ok(
    x: float,
    v: float,
    gated: bool,
    leader_state: tuple[float, float] | None,
    leader_length: float,
    u_min: float,
    slack: float = _SAFETY_SLACK,
) -> bool:
    if gated and not stoppable_before(x, v, 0.0, u_min):
        return False
    if leader_state is not None:
        xl, vl = leader_state
        if xl - x < safe_following_distance(v, vl, leader_length, u_min) - slack:
            return False
    return True


def _check_entry(req: SolveRequest, gated0: bool, leader0) -> None:
    r = req.robot
    if req.v0 < -1e-9 or req.v0 > r.v_max + 1e-9:
        raise InfeasibleEntryError(f"robot {r.id}: initial velocity out of bounds")
    llen = req.leader.length if req.leader is not None else 0.0
    if not _state_ok(req.x0, req.v0, gated0, leader0, llen, r.u_min, slack=1e-6):
        raise InfeasibleEntryError(f"robot {r.id}: initial state violates constraints")


def _finish(req: SolveRequest, traj: Trajectory, status: str) -> SolveResult:
    objective = float(traj.x[-1] - traj.x[0])
    entry = exit_ = None
    crossed = False
    if req.intersection_span is not None:
        entry = first_crossing_time(traj, 0.0)
        exit_ = first_crossing_time(traj, req.intersection_span + req.robot.length)
        crossed = exit_ is not None
    return SolveResult(traj, objective, crossed, status, entry, exit_)


def _largest_admissible(
    x: float,
    v: float,
    u_hi: float,
    dt: float,
    r: Robot,
    g: bool,
    ls: tuple[float, float] | None,
    llen: float,
    ok,
) -> float | None:
    """Largest admissible control below ``u_hi``, solved in closed form.

    Both active constraints (stoppability before the boundary and the
    rear-end gap) are monotone in the control, so the admissible set is an
    interval whose upper end is the smallest of the per-constraint boundary
    roots.  Returns None when a velocity clamp would interfere with the
    no-clamp algebra (the caller falls back to a binary search).
    """
    mu = -r.u_min
    cands = [u_hi]
    if g:
        a = dt * dt
        b = 2.0 * v * dt + mu * dt * dt
        c = v * v + 2.0 * mu * (x + v * dt)
        disc = b * b - 4.0 * a * c
        if disc < 0.0:
            return None
        cands.append((-b + math.sqrt(disc)) / (2.0 * a))
    if ls is not None:
        xl, vl = ls
        # Boundary in the relu-off regime (slower than the leader): the gap
        # itself binds.  Otherwise the braking-envelope quadratic binds.
        u_gap = 2.0 * (xl - llen - x - v * dt) / (dt * dt)
        if u_gap <= (vl - v) / dt:
            cands.append(u_gap)
        else:
            a = dt * dt
            b = 2.0 * v * dt + mu * dt * dt
            c = v * v - vl * vl + 2.0 * mu * (x + v * dt - xl + llen)
            disc = b * b - 4.0 * a * c
            if disc < 0.0:
                return None
            cands.append((-b + math.sqrt(disc)) / (2.0 * a))
    # Back off the exact root by a hair: landing exactly on the boundary
    # leaves no slack for float error to accumulate while riding it over
    # many consecutive steps (the bisection path keeps a similar margin).
    u = min(cands) - 2e-7
    if u < r.u_min:
        return None
    v1 = v + u * dt
    if v1 < -1e-12 or v1 > r.v_max + 1e-12:
        return None
    if ok(u):
        return u
    if ok(u - 1e-9):
        return u - 1e-9
    return None


def _greedy_controls(
    req: SolveRequest,
    n: int,
    leader_states,
    gated,
    llen: float,
    approach_cap: float | None = None,
    delay: int = 0,
) -> list[float]:
    """Largest admissible acceleration each step (binary search on the interval).

    ``approach_cap`` additionally limits the velocity during gated steps and
    ``delay`` forces maximal braking for the first ``delay`` steps; both are
    used by the gate-timing refinement below.
    """
    r = req.robot
    controls: list[float] = []
    x, v = req.x0, req.v0
    for k in range(n):
        g = gated[k]
        ls = leader_states[k + 1]
        u_hi = r.u_max
        if k < delay:
            # Maximal braking preserves both the gate and rear-end invariants,
            # so no admissibility search is needed.
            u_hi = r.u_min
        elif g and approach_cap is not None:
            u_hi = max(r.u_min, min(u_hi, (approach_cap - v) / req.dt))

        def ok(u: float) -> bool:
            x1, v1 = propagate(x, v, u, req.dt, r.v_max)
            return _state_ok(x1, v1, g, ls, llen, r.u_min)

        if ok(u_hi):
            u = u_hi
        else:
            if not ok(r.u_min):
                raise InfeasibleEntryError(
                    f"robot {r.id}: maximal braking infeasible at step {k} "
                    "(malformed scenario)"
                )
            u_an = _largest_admissible(x, v, u_hi, req.dt, r, g, ls, llen, ok)
            if u_an is not None:
                u = u_an
            else:
                lo, hi = r.u_min, u_hi
                while hi - lo > _U_RESOLUTION:
                    mid = 0.5 * (lo + hi)
                    if ok(mid):
                        lo = mid
                    else:
                        hi = mid
                u = lo
        x, v = propagate(x, v, u, req.dt, r.v_max)
        controls.append(u)
    return controls


def _gate_stalled(traj: Trajectory, gated) -> bool:
    """Whether the profile wastes gated time stopped at the entry boundary."""
    for k in range(len(gated)):
        if gated[k] and traj.v[k] < 0.05 and traj.x[k] > -0.05:
            return True
    return False


def solve_max_progress(req: SolveRequest) -> SolveResult:
    """Invariant-preserving max-progress solve.

    The greedy pass picks the largest admissible acceleration every step; it
    is optimal except when a finite entry gate binds, where rushing to the
    boundary forces a standstill and squanders speed the robot could carry
    into the intersection when the gate lifts.  Since the objective depends
    only on the final position, that case is refined over two candidate
    families and the best resulting profile is kept:

    - a gated-approach speed cap (cruise so the boundary is reached at the
      gate time with the cruising speed), and
    - an initial braking delay followed by greedy (the greedy tail
      accelerates onto the maximal-braking parabola and rides it, so the
      robot is mid-parabola with speed in hand when the gate lifts; the delay
      length selects where on the parabola that happens).
    """
    n = req.n_steps()
    r = req.robot
    leader_states = _leader_samples(req, n)
    gated = _gated_flags(req, n)
    llen = req.leader.length if req.leader is not None else 0.0
    _check_entry(req, gated[0] if n else False, leader_states[0])

    def run(cap: float | None, delay: int = 0) -> Trajectory:
        controls = _greedy_controls(req, n, leader_states, gated, llen, cap, delay)
        return build_trajectory(req.t_start, req.dt, req.x0, req.v0, controls, r.v_max)

    best = run(None)
    gate_finite = req.entry_gate is not None and math.isfinite(req.entry_gate)
    if gate_finite and _gate_stalled(best, gated):
        scored = [(best, None)]
        # Coarse scan over the approach speed cap, then one refinement pass
        # around the best value.
        caps = [r.v_max * j / 8.0 for j in range(9)]
        scored += [(run(c), c) for c in caps]
        scored.sort(key=lambda e: -float(e[0].x[-1]))
        top_cap = scored[0][1]
        if top_cap is not None:
            width = r.v_max / 8.0
            for c in (top_cap - width / 2.0, top_cap + width / 2.0):
                if 0.0 <= c <= r.v_max:
                    scored.append((run(c), c))
        # Braking-delay scan: only delays within the gated prefix matter.
        # Final position is close to unimodal in the delay, so a fixed number
        # of nested 9-point grids plus an exhaustive pass over the last
        # bracket finds the optimum without rolling out every delay.  The
        # fixed budget keeps the per-solve cost independent of the gate
        # horizon.
        n_gated = sum(gated)
        delay_scores: dict[int, Trajectory] = {}

        def eval_delay(j: int) -> float:
            if j not in delay_scores:
                delay_scores[j] = run(None, j)
            return float(delay_scores[j].x[-1])

        lo, hi = 0, n_gated
        for _ in range(3):
            grid = sorted({int(round(j)) for j in np.linspace(lo, hi, 9)})
            best_j = max(grid, key=eval_delay)
            i = grid.index(best_j)
            lo = grid[i - 1] if i > 0 else grid[0]
            hi = grid[i + 1] if i + 1 < len(grid) else grid[-1]
        for j in range(lo, hi + 1):
            eval_delay(j)
        scored += [(traj, None) for traj in delay_scores.values()]
        scored.sort(key=lambda e: -float(e[0].x[-1]))
        best = scored[0][0]
    return _finish(req, best, "optimal-greedy")


def _propagate_vec(x, v, u, dt, v_max):
    """Vectorized clamped double-integrator step (mirrors kinematics.propagate)."""
    x1 = x + v * dt + 0.5 * u * dt * dt
    v1 = v + u * dt
    hit_hi = (u > 0.0) & (v1 > v_max)
    if np.any(hit_hi):
        th = (v_max - v[hit_hi]) / u[hit_hi]
        x1[hit_hi] = (
            x[hit_hi] + v[hit_hi] * th + 0.5 * u[hit_hi] * th * th + v_max * (dt - th)
        )
        v1[hit_hi] = v_max
    hit_lo = (u < 0.0) & (v1 < 0.0)
    if np.any(hit_lo):
        th = -v[hit_lo] / u[hit_lo]
        x1[hit_lo] = x[hit_lo] + v[hit_lo] * th + 0.5 * u[hit_lo] * th * th
        v1[hit_lo] = 0.0
    return x1, v1


def oracle_exact(
    req: SolveRequest,
    u_levels: int = 5,
    x_res: float = 1e-3,
    v_res: float = 1e-3,
    cap: int = 200_000,
) -> SolveResult:
    """Dynamic program over quantized controls with state-bucket merging.

    ``u_levels`` evenly spaced accelerations in [u_min, u_max].  After every
    step, states falling in the same (x, v) bucket of size
    (``x_res``, ``v_res``) are merged, keeping the one with the largest
    position.  Every surviving state is an exactly-propagated feasible state,
    so the returned objective is always achieved by a real trajectory; finer
    resolutions approach the quantized-control optimum at the cost of a
    larger frontier (capped at ``cap`` states).
    """
    n = req.n_steps()
    r = req.robot
    leader_states = _leader_samples(req, n)
    gated = _gated_flags(req, n)
    llen = req.leader.length if req.leader is not None else 0.0
    _check_entry(req, gated[0] if n else False, leader_states[0])

    if u_levels < 2:
        raise InputError("u_levels must be >= 2")
    levels = np.linspace(r.u_min, r.u_max, u_levels)
    mu = -r.u_min

    # Per layer: state arrays plus parent indices and the control taken.
    xs = np.array([req.x0])
    vs = np.array([req.v0])
    layers: list[tuple[np.ndarray, np.ndarray]] = []  # (parent, control) per step
    frontiers: list[tuple[np.ndarray, np.ndarray]] = [(xs, vs)]
    for k in range(n):
        m = len(xs)
        x_rep = np.repeat(xs, u_levels)
        v_rep = np.repeat(vs, u_levels)
        u_rep = np.tile(levels, m)
        parent = np.repeat(np.arange(m), u_levels)
        x1, v1 = _propagate_vec(x_rep, v_rep, u_rep, req.dt, r.v_max)

        ok = np.ones(len(x1), dtype=bool)
        if gated[k]:
            ok &= v1 * v1 <= 2.0 * mu * (-x1) + 1e-12
        ls = leader_states[k + 1]
        if ls is not None:
            xl, vl = ls
            need = llen + np.maximum(0.0, (v1 * v1 - vl * vl) / (2.0 * mu))
            ok &= xl - x1 >= need - _SAFETY_SLACK
        if not np.any(ok):
            raise InfeasibleEntryError(
                f"robot {req.robot.id}: no feasible quantized control at step {k}"
            )
        x1, v1, u_rep, parent = x1[ok], v1[ok], u_rep[ok], parent[ok]

        # Bucket merge: keep the largest-x state per (x, v) bucket.
        keys = np.stack(
            [np.round(x1 / x_res).astype(np.int64), np.round(v1 / v_res).astype(np.int64)]
        )
        order = np.lexsort((-x1, keys[1], keys[0]))
        keys = keys[:, order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = (keys[0, 1:] != keys[0, :-1]) | (keys[1, 1:] != keys[1, :-1])
        pick = order[first]
        xs, vs = x1[pick], v1[pick]
        if len(xs) > cap:
            raise StateExplosionError(f"oracle frontier exceeded cap ({len(xs)} > {cap})")
        layers.append((parent[pick], u_rep[pick]))
        frontiers.append((xs, vs))

    # Reconstruct the best control sequence.
    idx = int(np.argmax(xs))
    controls: list[float] = []
    for parent, u in reversed(layers):
        controls.append(float(u[idx]))
        idx = int(parent[idx])
    controls.reverse()
    traj = build_trajectory(req.t_start, req.dt, req.x0, req.v0, controls, r.v_max)
    return _finish(req, traj, "oracle-dp")


def certify_trajectory(
    traj: Trajectory,
    robot: Robot,
    leader: MotionHistory | None = None,
    entry_gate: float | None = None,
    tol: float = 1e-6,
) -> list[str]:
    """Independent constraint re-check; returns a list of violation messages.

    Checks input/velocity bounds, exact kinematic consistency, rear-end
    safety against the leader at every grid point, and that the position
    never crosses the intersection boundary at a gated grid time.
    """
    problems: list[str] = []
    n = traj.n_steps
    for k in range(n):
        u = float(traj.u[k])
        if u < robot.u_min - 1e-9 or u > robot.u_max + 1e-9:
            problems.append(f"step {k}: control {u} outside bounds")
        x1, v1 = propagate(float(traj.x[k]), float(traj.v[k]), u, traj.dt, robot.v_max)
        if abs(x1 - float(traj.x[k + 1])) > 1e-9 or abs(v1 - float(traj.v[k + 1])) > 1e-9:
            problems.append(f"step {k}: kinematic inconsistency")
    for k in range(n + 1):
        t = traj.t0 + k * traj.dt
        v = float(traj.v[k])
        x = float(traj.x[k])
        if v < -tol or v > robot.v_max + tol:
            problems.append(f"grid {k}: velocity {v} out of bounds")
        if leader is not None and leader.constrains_at(t):
            xl, vl = leader.state_at(t)
            need = safe_following_distance(v, vl, leader.length, robot.u_min)
            if xl - x < need - tol:
                problems.append(f"grid {k}: rear-end gap {xl - x:.6f} < {need:.6f}")
        if entry_gate is not None and t < entry_gate - 1e-9 and x > tol:
            problems.append(f"grid {k}: inside intersection before gate time")
    return problems


def solve_relaxed_joint(instance) -> dict[int, tuple[float, float]]:
    """Virtual entry/exit times with the intersection exclusivity relaxed.

    Robots on each lane are solved front to back against their predecessor
    only (rear-end safety still binds); the intersection is treated as free.
    Boundaries not reached within the horizon map to +inf.
    """
    geom = instance.geom
    t0 = instance.t
    out: dict[int, tuple[float, float]] = {}
    by_lane: dict[int, list] = {}
    for p in instance.pending:
        by_lane.setdefault(p.robot.lane, []).append(p)
    for lane, group in by_lane.items():
        group = sorted(group, key=lambda p: -p.x)
        span = geom.intersection_span[lane]
        # Nearest committed robot ahead of the lane's front pending robot.
        candidates = []
        for c in instance.committed:
            if c.robot.lane != lane or not c.view.constrains_at(t0):
                continue
            cx, _ = c.view.state_at(t0)
            if cx > group[0].x:
                candidates.append((cx, c))
        leader = min(candidates, key=lambda e: e[0])[1].view if candidates else None
        for p in group:
            req = SolveRequest(
                robot=p.robot,
                x0=p.x,
                v0=p.v,
                t_start=t0,
                t_end=t0 + instance.T_h,
                dt=instance.dt,
                leader=leader,
                entry_gate=None,
                intersection_span=span,
            )
            res = solve_max_progress(req)
            entry = res.entry_time if res.entry_time is not None else math.inf
            exit_ = res.exit_time if res.exit_time is not None else math.inf
            out[p.robot.id] = (entry, exit_)
            view = MotionHistory(p.robot.length, clear_x=span + p.robot.length, u_min=p.robot.u_min)
            view.append(res.trajectory)
            leader = view
    return out
