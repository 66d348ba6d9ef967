"""Scenario generation, metrics, safety audits and benchmark studies.

A scenario bundles the lane geometry, the per-lane arrival process and the
engine horizons into a flat, diffable key-value config.  The harness runs
policies on paired stream seeds, audits every realized log against the safety
conditions, and produces the comparison metrics (relative objective E and
relative weighted time-to-cross B), the optimality-gap table and the
buffer-adaptation sweep.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .coordination import (
    CoordinationInstance,
    SimulationLog,
    best_sequence,
    combined_toy_oracle,
    run_stream,
    sequential_optimization,
)
from .errors import CrosswayError, InputError
from .geometry import (
    DEFAULT_DIRECTIONS,
    LaneGeometry,
    _round_robin_conflicts,
    default_warehouse_geometry,
)
from .kinematics import Robot, first_crossing_time, rear_end_satisfied

_SCENARIO_TAG = "crossway-scenario-v1"
_LOG_TAG = "crossway-log-v1"

_PRIORITY_VALUES = (1.0, 2.0, 4.0, 5.0)
_PRIORITY_PROBS = (0.5, 0.3, 0.15, 0.05)

_RV_CHOICES = tuple(round(0.05 + 0.01 * i, 2) for i in range(11))  # 0.05 .. 0.15


def crossing_geometry(
    num_lanes: int = 4,
    approach: float = 7.0,
    span: float = 2.8,
    speed_limit: float = 1.5,
) -> LaneGeometry:
    """Simple symmetric crossing with round-robin direction assignment."""
    return LaneGeometry(
        num_lanes=num_lanes,
        approach_length=(approach,) * num_lanes,
        intersection_span=(span,) * num_lanes,
        lane_speed_limit=(speed_limit,) * num_lanes,
        conflict=_round_robin_conflicts(num_lanes),
        directions=tuple(DEFAULT_DIRECTIONS[i % 4] for i in range(num_lanes)),
    )


@dataclass(frozen=True)
class Scenario:
    """One simulation configuration: geometry, traffic process and horizons."""

    geom: LaneGeometry
    rates: tuple[float, ...]  # per-lane static rates (robots/lane/s)
    name: str = "custom"
    rate_mode: str = "static"  # static | random | burst
    heterogeneous_params: bool = False
    T_c: float = 6.0
    T_h: float = 30.0
    T_r: float = 20.0
    dt: float = 0.1
    stream_length: float = 300.0
    transient_cutoff: float = 90.0
    robot_length: float = 0.75
    u_min: float = -2.0
    u_max: float = 2.0
    # Real-world adaptation knobs (ideal operation when all zero).
    buffer_b: float = 0.0
    comm_delay: float = 0.0
    merge_delay: bool = False
    delta_p: float = 0.0
    delta_c: float = 0.0
    precompute_pool: int = 0
    explicit_length: float | None = None
    # Time-varying traffic parameters.
    rv_choices: tuple[float, ...] = _RV_CHOICES
    rv_period: float = 100.0
    burst_cycle: float = 30.0
    burst_high: float = 0.15
    burst_high_window: float = 10.0
    burst_low: float = 0.05

    def __post_init__(self):
        if len(self.rates) != self.geom.num_lanes:
            raise InputError("need one arrival rate per lane")
        if any(r < 0 for r in self.rates):
            raise InputError("arrival rates must be >= 0")
        if self.rate_mode not in ("static", "random", "burst"):
            raise InputError(f"unknown rate mode: {self.rate_mode}")
        if not self.T_r <= self.T_h:
            raise InputError("reward horizon T_r must not exceed T_h")
        if not self.transient_cutoff < self.stream_length:
            raise InputError("transient cutoff must fall inside the stream")
        for name in ("T_c", "T_h"):
            val = getattr(self, name)
            if abs(val / self.dt - round(val / self.dt)) > 1e-9:
                raise InputError(f"{name} must be a multiple of dt")
        if min(self.buffer_b, self.comm_delay, self.delta_p, self.delta_c) < 0:
            raise InputError("adaptation parameters must be >= 0")


def with_rate(scenario: Scenario, rate: float, name: str | None = None) -> Scenario:
    """The same scenario with a uniform static arrival rate on every lane."""
    return dataclasses.replace(
        scenario,
        rates=(rate,) * scenario.geom.num_lanes,
        name=name or f"{scenario.name}@{rate}",
    )


# ---------------------------------------------------------------------------
# Stream generation
# ---------------------------------------------------------------------------


@dataclass
class Arrival:
    """One tentative arrival; the engine may delay the realized entry."""

    time: float
    lane: int
    v0: float
    robot: Robot


def _lane_rate_fn(scenario: Scenario, lane: int, seed: int):
    """(rate(t), max rate) for one lane's possibly time-varying process."""
    if scenario.rate_mode == "static":
        lam = scenario.rates[lane]
        return (lambda t: lam), lam
    if scenario.rate_mode == "burst":
        hi, lo = scenario.burst_high, scenario.burst_low
        cycle, window = scenario.burst_cycle, scenario.burst_high_window

        def burst(t):
            return hi if (t % cycle) < window else lo

        return burst, max(hi, lo)
    # Random time-varying: resample the rate every rv_period seconds.
    rng = np.random.default_rng([seed, 5, lane])
    n_windows = int(math.ceil(scenario.stream_length / scenario.rv_period)) + 1
    levels = rng.choice(scenario.rv_choices, size=n_windows)

    def varying(t):
        return float(levels[min(int(t // scenario.rv_period), n_windows - 1)])

    return varying, float(max(scenario.rv_choices))


def generate_stream(scenario: Scenario, seed: int) -> list[Arrival]:
    """Tentative Poisson arrivals per lane, snapped to the engine time grid.

    Time-varying rates use thinning against the per-lane maximum rate.  Each
    robot draws an initial velocity uniform on [0, lane speed limit] and, in
    heterogeneous-parameter mode, a priority from {1, 2, 4, 5}.  Robot ids are
    assigned in chronological order across lanes.
    """
    dt = scenario.dt
    length = (
        scenario.explicit_length
        if scenario.explicit_length is not None
        else scenario.robot_length
    )
    raw: list[tuple[float, int, float, float]] = []  # (time, lane, v0, priority)
    for lane in range(scenario.geom.num_lanes):
        rate_fn, lam_max = _lane_rate_fn(scenario, lane, seed)
        if lam_max <= 0:
            continue
        rng = np.random.default_rng([seed, 3, lane])
        v_lane = scenario.geom.lane_speed_limit[lane]
        t = 0.0
        last_slot = -1
        while True:
            t += rng.exponential(1.0 / lam_max)
            if t > scenario.stream_length:
                break
            if rng.random() > rate_fn(t) / lam_max:
                continue
            slot = max(int(round(t / dt)), last_slot + 1)
            last_slot = slot
            v0 = rng.uniform(0.0, v_lane)
            if scenario.heterogeneous_params:
                priority = float(rng.choice(_PRIORITY_VALUES, p=_PRIORITY_PROBS))
            else:
                priority = 1.0
            raw.append((slot * dt, lane, v0, priority))
    raw.sort(key=lambda r: (r[0], r[1]))
    arrivals = []
    for rid, (t, lane, v0, priority) in enumerate(raw):
        robot = Robot(
            id=rid,
            lane=lane,
            length=length,
            priority=priority,
            v_max=scenario.geom.lane_speed_limit[lane],
            u_min=scenario.u_min,
            u_max=scenario.u_max,
            arrival_time=t,
        )
        arrivals.append(Arrival(t, lane, v0, robot))
    return arrivals


# ---------------------------------------------------------------------------
# Named scenario matrix
# ---------------------------------------------------------------------------


def _grid(start: float, stop: float, step: float = 0.01) -> list[float]:
    n = int(round((stop - start) / step)) + 1
    return [round(start + i * step, 3) for i in range(n)]


def table3_scenarios(stream_length: float = 300.0) -> dict[str, list[Scenario]]:
    """The nine named test configurations, one scenario per arrival rate.

    Sim-1/2 use heterogeneous robot parameters, Sim-3/4 homogeneous; Sim-5 is
    the static heterogeneous-traffic rate vector; Sim-6/7 probe rate grids
    unseen in training; Sim-8/9 are burst-mode and random time-varying.
    """
    het_geom = default_warehouse_geometry(heterogeneous_speed_limits=True)
    hom_geom = default_warehouse_geometry(heterogeneous_speed_limits=False)
    het_vector = (0.13, 0.18, 0.08, 0.15, 0.19, 0.09, 0.05, 0.16)

    def make(name, geom, rates, het, T_h, T_r, mode="static"):
        return Scenario(
            geom=geom,
            rates=rates,
            name=name,
            rate_mode=mode,
            heterogeneous_params=het,
            T_h=T_h,
            T_r=T_r,
            stream_length=stream_length,
        )

    def rate_family(sim, geom, grid, het, T_h, T_r):
        return [
            make(f"{sim}@{r}", geom, (r,) * geom.num_lanes, het, T_h, T_r)
            for r in grid
        ]

    low, high = _grid(0.01, 0.1), _grid(0.11, 0.2)
    sim7_grid = [0.125, 0.175] + _grid(0.21, 0.3)
    return {
        "sim1": rate_family("sim1", het_geom, low, True, 30.0, 20.0),
        "sim2": rate_family("sim2", het_geom, high, True, 60.0, 30.0),
        "sim3": rate_family("sim3", hom_geom, low, False, 30.0, 20.0),
        "sim4": rate_family("sim4", hom_geom, high, False, 60.0, 30.0),
        "sim5": [make("sim5", het_geom, het_vector, True, 60.0, 30.0)],
        "sim6": rate_family("sim6", het_geom, low, True, 30.0, 20.0),
        "sim7": rate_family("sim7", het_geom, sim7_grid, True, 60.0, 30.0),
        "sim8": [
            make("sim8", het_geom, (0.0,) * 8, False, 30.0, 20.0, mode="burst")
        ],
        "sim9": [
            make("sim9", het_geom, (0.0,) * 8, True, 60.0, 30.0, mode="random")
        ],
    }


def toy_scenario(
    num_lanes: int = 4,
    rate: float = 0.08,
    T_h: float = 15.0,
    stream_length: float = 120.0,
    heterogeneous_params: bool = False,
) -> Scenario:
    """Small crossing used by the opt-gap study and unit tests."""
    geom = crossing_geometry(num_lanes=num_lanes)
    return Scenario(
        geom=geom,
        rates=(rate,) * num_lanes,
        name="toy",
        heterogeneous_params=heterogeneous_params,
        T_h=T_h,
        T_r=min(10.0, T_h),
        stream_length=stream_length,
        transient_cutoff=0.0,
    )


# ---------------------------------------------------------------------------
# Safety audit
# ---------------------------------------------------------------------------


def audit_log(log: SimulationLog, scenario: Scenario) -> list[str]:
    """Post-hoc safety checks on a realized stream log.

    Verifies intersection mutual exclusion (no occupancy overlap between
    conflicting lanes beyond 1e-6 s) and the rear-end safe-distance condition
    at every grid point (tol 1e-6 m) between consecutive robots per lane.
    """
    geom = scenario.geom
    dt = log.dt
    violations: list[str] = []

    def view_crossing(a, threshold):
        for seg in a.view.segments:
            t = first_crossing_time(seg, threshold)
            if t is not None:
                return t
        return None

    # Occupancy intervals recomputed from the realized motion, not from the
    # entry/exit fields the planner recorded.
    occupancy = []
    for a in log.robots:
        entry = view_crossing(a, 0.0)
        if entry is None:
            continue
        span = geom.intersection_span[a.robot.lane]
        exit_ = view_crossing(a, span + a.robot.length)
        occupancy.append((a, entry, exit_ if exit_ is not None else log.horizon))
    for i, (a, ea, xa) in enumerate(occupancy):
        for b, eb, xb in occupancy[i + 1 :]:
            if geom.conflict_value(a.robot.lane, b.robot.lane) != -1:
                continue
            lo = max(ea, eb)
            hi = min(xa, xb)
            if hi - lo > 1e-6:
                violations.append(
                    f"mutual exclusion: robots {a.robot.id}/{b.robot.id} "
                    f"overlap {hi - lo:.3g}s in the intersection"
                )

    by_lane: dict[int, list] = {}
    for a in log.robots:
        by_lane.setdefault(a.robot.lane, []).append(a)
    for lane, group in by_lane.items():
        group.sort(key=lambda a: a.robot.arrival_time)
        for pred, succ in zip(group, group[1:]):
            k0 = int(round(succ.robot.arrival_time / dt))
            k1 = int(math.floor(min(succ.view.t_end, log.horizon) / dt + 1e-9))
            for k in range(k0, k1 + 1):
                t = k * dt
                if not pred.view.constrains_at(t):
                    break
                if not rear_end_satisfied(
                    succ.view.state_at(t),
                    pred.view.state_at(t),
                    pred.robot.length,
                    succ.robot.u_min,
                    tol=1e-6,
                ):
                    violations.append(
                        f"rear-end: robot {succ.robot.id} inside the safe "
                        f"distance of {pred.robot.id} at t={t:.1f}"
                    )
                    break
    return violations


def run_audited(scenario: Scenario, policy, seed: int, arrivals=None) -> SimulationLog:
    """Simulate one stream and fail loudly on any safety violation."""
    log = run_stream(scenario, policy, seed=seed, arrivals=arrivals)
    violations = audit_log(log, scenario)
    if violations:
        raise CrosswayError(
            f"safety audit failed ({policy.name}, seed {seed}): " + "; ".join(violations)
        )
    return log


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class StreamMetrics:
    objective: float  # priority-weighted distance in each robot's first T_h
    weighted_ttc_sum: float
    priority_sum: float
    n_crossed: int
    n_counted: int
    wall_us: list[float]


def stream_metrics(log: SimulationLog, scenario: Scenario) -> StreamMetrics:
    """Per-stream aggregates, transient-trimmed.

    A robot counts toward the objective if it arrived after the transient
    cutoff and its full first-``T_h`` window fits inside the stream; the
    weighted time-to-cross pools robots that actually exited.  Both windows
    start at the robot's spawn time, not its admission onto the lane, so time
    spent queued at a blocked entrance counts against the policy rather than
    disappearing from the accounting.
    """
    geom = scenario.geom
    objective = 0.0
    ttc_sum = 0.0
    pr_sum = 0.0
    n_crossed = 0
    n_counted = 0
    for a in log.robots:
        r = a.robot
        t_spawn = a.tentative_arrival
        if t_spawn < scenario.transient_cutoff:
            continue
        if t_spawn + scenario.T_h <= log.horizon + 1e-9:
            x_end, _ = a.view.state_at(t_spawn + scenario.T_h)
            objective += r.priority * (x_end + geom.approach_length[r.lane])
            n_counted += 1
        if r.exit_time is not None and r.exit_time <= log.horizon + 1e-9:
            ttc_sum += r.priority * (r.exit_time - t_spawn)
            pr_sum += r.priority
            n_crossed += 1
    wall = list(log.provisional_us)
    for tick in log.ticks:
        if tick.n_pending:
            wall.append(tick.wall_us / tick.n_pending)
    return StreamMetrics(objective, ttc_sum, pr_sum, n_crossed, n_counted, wall)


@dataclass
class PolicyStats:
    policy: str
    seeds: tuple[int, ...]
    J_bar: float  # mean per-stream objective
    J_hat: float  # priority-weighted mean time to cross
    throughput: float  # crossed robots per second past the transient
    wall_mean_us: float
    wall_p10_us: float
    wall_p90_us: float


@dataclass
class MetricsReport:
    scenario: str
    reference: str
    stats: dict[str, PolicyStats]
    E: dict[str, float]  # relative objective improvement of reference, %
    B: dict[str, float]  # relative weighted-TTC difference of reference, %

    def to_csv(self, path: str):
        # Wall-clock stats stay in memory only: written out they would make
        # otherwise identical reruns differ byte-for-byte.
        with open(path, "w") as fh:
            fh.write("policy,J_bar,J_hat,E_pct,B_pct,throughput,seeds\n")
            for key, s in self.stats.items():
                fh.write(
                    f"{key},{s.J_bar!r},{s.J_hat!r},{self.E[key]!r},{self.B[key]!r},"
                    f"{s.throughput!r},{' '.join(str(x) for x in s.seeds)}\n"
                )


def _aggregate(policy_name: str, seeds, per_stream: list[StreamMetrics], scenario) -> PolicyStats:
    window = scenario.stream_length - scenario.transient_cutoff
    J_bar = float(np.mean([m.objective for m in per_stream]))
    pr = sum(m.priority_sum for m in per_stream)
    ttc = sum(m.weighted_ttc_sum for m in per_stream)
    J_hat = ttc / pr if pr > 0 else math.inf
    throughput = float(np.mean([m.n_crossed / window for m in per_stream]))
    wall = np.concatenate([m.wall_us for m in per_stream if m.wall_us])
    return PolicyStats(
        policy=policy_name,
        seeds=tuple(seeds),
        J_bar=J_bar,
        J_hat=J_hat,
        throughput=throughput,
        wall_mean_us=float(np.mean(wall)),
        wall_p10_us=float(np.percentile(wall, 10)),
        wall_p90_us=float(np.percentile(wall, 90)),
    )


def relative_metrics(reference: PolicyStats, other: PolicyStats) -> tuple[float, float]:
    """(E, B) in percent; refuses comparisons across different stream seeds."""
    if reference.seeds != other.seeds:
        raise InputError("E/B require paired runs on identical stream seeds")
    E = 100.0 * (reference.J_bar - other.J_bar) / other.J_bar if other.J_bar else 0.0
    B = 100.0 * (reference.J_hat - other.J_hat) / other.J_hat if other.J_hat else 0.0
    return E, B


def evaluate(
    policies: list,
    scenario: Scenario,
    seeds: list[int],
    reference: str | None = None,
    audit: bool = True,
) -> MetricsReport:
    """Run every policy on the same stream seeds and compare to the reference.

    The reference defaults to the first policy; duplicate policy names get a
    numeric suffix so a policy can be compared against itself.
    """
    if not policies or not seeds:
        raise InputError("need at least one policy and one seed")
    keyed = []
    seen: dict[str, int] = {}
    for p in policies:
        n = seen.get(p.name, 0)
        seen[p.name] = n + 1
        keyed.append((p.name if n == 0 else f"{p.name}#{n + 1}", p))
    ref_key = reference or keyed[0][0]

    stats: dict[str, PolicyStats] = {}
    for key, policy in keyed:
        per_stream = []
        for seed in seeds:
            log = run_audited(scenario, policy, seed) if audit else run_stream(
                scenario, policy, seed=seed
            )
            per_stream.append(stream_metrics(log, scenario))
        stats[key] = _aggregate(key, seeds, per_stream, scenario)
    if ref_key not in stats:
        raise InputError(f"reference policy {ref_key!r} not among the runs")
    E, B = {}, {}
    for key, s in stats.items():
        E[key], B[key] = relative_metrics(stats[ref_key], s)
    return MetricsReport(scenario.name, ref_key, stats, E, B)


# ---------------------------------------------------------------------------
# Optimality-gap and scaling study
# ---------------------------------------------------------------------------


@dataclass
class GapSample:
    n_pending: int
    gap_pct: float | None  # None where the combined oracle was out of scope
    seq_per_robot_s: float
    bestseq_s: float


@dataclass
class GapRow:
    n_pending: int
    count: int
    avg_gap_pct: float | None
    p90_gap_pct: float | None
    seq_per_robot_s: float
    bestseq_s: float


@dataclass
class GapStudy:
    samples: list[GapSample]
    rows: list[GapRow]

    def to_csv(self, path: str):
        with open(path, "w") as fh:
            fh.write("n_pending,count,avg_gap_pct,p90_gap_pct,seq_per_robot_s,bestseq_s\n")
            for r in self.rows:
                fh.write(
                    f"{r.n_pending},{r.count},{r.avg_gap_pct!r},{r.p90_gap_pct!r},"
                    f"{r.seq_per_robot_s!r},{r.bestseq_s!r}\n"
                )


def harvest_instances(
    scenario: Scenario,
    n_instances: int,
    max_pending: int,
    seed: int = 0,
    policy=None,
    min_pending: int = 1,
) -> list[CoordinationInstance]:
    """Coordination-tick snapshots collected from live streams.

    Instances are deep-copied at the tick so later simulation steps cannot
    mutate them; streams keep running (with fresh seeds) until enough
    instances of the requested sizes are gathered.
    """
    from .policies import HeuristicPolicy

    policy = policy or HeuristicPolicy("ttr")
    out: list[CoordinationInstance] = []

    def keep(inst, outcome):
        if min_pending <= len(inst.pending) <= max_pending and len(out) < n_instances:
            out.append(copy.deepcopy(inst))

    stream = 0
    while len(out) < n_instances and stream < 200:
        run_stream(scenario, policy, seed=seed * 1000 + stream, tick_callback=keep)
        stream += 1
    return out


def optgap_study(
    scenario: Scenario,
    max_pending: int = 3,
    n_instances: int = 60,
    seed: int = 0,
    oracle_max: int = 3,
    bestseq_cap: int = 8,
) -> GapStudy:
    """BESTSEQ vs the combined toy oracle, with solver timing per instance size.

    Reports, per pending-set size, the average and 90th-percentile gap
    (C_oracle - C_bestseq) / C_oracle in percent where the oracle applies,
    plus per-robot sequential-solve time and total enumeration time.
    """
    from .policies import HeuristicPolicy

    ttr = HeuristicPolicy("ttr")
    instances = harvest_instances(scenario, n_instances, max_pending, seed=seed)
    samples: list[GapSample] = []
    for inst in instances:
        n = len(inst.pending)
        precedence = ttr.precedence(inst, None)
        tic = time.perf_counter()
        sequential_optimization(inst, precedence)
        seq_per_robot = (time.perf_counter() - tic) / n
        tic = time.perf_counter()
        _, c_bs = best_sequence(inst, cap=bestseq_cap)
        bs_time = time.perf_counter() - tic
        gap = None
        if n <= oracle_max:
            c_or = combined_toy_oracle(inst)
            gap = 100.0 * (c_or - c_bs) / c_or if c_or > 1e-9 else 0.0
        samples.append(GapSample(n, gap, seq_per_robot, bs_time))

    rows = []
    for n in sorted({s.n_pending for s in samples}):
        group = [s for s in samples if s.n_pending == n]
        gaps = [s.gap_pct for s in group if s.gap_pct is not None]
        rows.append(
            GapRow(
                n_pending=n,
                count=len(group),
                avg_gap_pct=float(np.mean(gaps)) if gaps else None,
                p90_gap_pct=float(np.percentile(gaps, 90)) if gaps else None,
                seq_per_robot_s=float(np.mean([s.seq_per_robot_s for s in group])),
                bestseq_s=float(np.mean([s.bestseq_s for s in group])),
            )
        )
    return GapStudy(samples, rows)


def slope_confidence_interval(
    xs, ys, confidence: float = 0.95
) -> tuple[float, float, float]:
    """Least-squares slope with its two-sided confidence interval."""
    from scipy import stats

    res = stats.linregress(xs, ys)
    dof = len(xs) - 2
    tcrit = stats.t.ppf(0.5 + confidence / 2.0, dof)
    return res.slope, res.slope - tcrit * res.stderr, res.slope + tcrit * res.stderr


# ---------------------------------------------------------------------------
# Real-world adaptations
# ---------------------------------------------------------------------------


def apply_adaptations(scenario: Scenario) -> Scenario:
    """Fold the tracking buffer (and optionally the delay bound) into lengths.

    The effective robot length becomes L + 2b, plus v_max * delay when the
    communication delay is merged into the buffer.  An ``explicit_length``
    overrides the formula entirely (for setups tuned empirically).
    """
    if scenario.explicit_length is not None:
        eff = scenario.explicit_length
    else:
        eff = scenario.robot_length + 2.0 * scenario.buffer_b
        if scenario.merge_delay:
            eff += max(scenario.geom.lane_speed_limit) * scenario.comm_delay
    return dataclasses.replace(
        scenario,
        robot_length=eff,
        explicit_length=None,
        buffer_b=0.0,
        comm_delay=0.0 if scenario.merge_delay else scenario.comm_delay,
        merge_delay=False,
    )


def precompute_initiation_time(scenario: Scenario, k: int) -> float:
    """When robot computations for coordination tick k must start."""
    return k * scenario.T_c - scenario.precompute_pool * scenario.delta_c - scenario.comm_delay


def _clone_arrivals(arrivals: list[Arrival], length: float) -> list[Arrival]:
    out = []
    for a in arrivals:
        robot = dataclasses.replace(
            a.robot, length=length, arrival_time=a.time,
            coord_start=None, entry_time=None, exit_time=None,
        )
        out.append(Arrival(a.time, a.lane, a.v0, robot))
    return out


def buffer_sweep(
    scenario: Scenario,
    policy,
    seeds: list[int],
    multipliers: tuple[float, ...] = (0.0, 0.25, 0.5, 1.0),
) -> list[tuple[float, float]]:
    """Throughput vs tracking buffer b, on identical arrival sets per seed.

    The buffer grid is expressed as multiples of the robot length.  Each seed
    generates one tentative arrival set at b = 0 that is reused (with robot
    lengths inflated) across the whole grid, fixing the robot count.
    """
    base_arrivals = {s: generate_stream(scenario, s) for s in seeds}
    window = scenario.stream_length - scenario.transient_cutoff
    results = []
    for mult in multipliers:
        b = mult * scenario.robot_length
        eff = apply_adaptations(dataclasses.replace(scenario, buffer_b=b))
        rates = []
        for s in seeds:
            arrivals = _clone_arrivals(base_arrivals[s], eff.robot_length)
            log = run_audited(eff, policy, seed=s, arrivals=arrivals)
            n = sum(
                1
                for a in log.robots
                if a.robot.exit_time is not None
                and a.robot.exit_time <= log.horizon + 1e-9
                and a.robot.arrival_time >= scenario.transient_cutoff
            )
            rates.append(n / window)
        results.append((b, float(np.mean(rates))))
    return results


# ---------------------------------------------------------------------------
# Serialization: scenario config and stream logs
# ---------------------------------------------------------------------------

_SCALAR_KEYS = [
    "name", "rate_mode", "heterogeneous_params", "T_c", "T_h", "T_r", "dt",
    "stream_length", "transient_cutoff", "robot_length", "u_min", "u_max",
    "buffer_b", "comm_delay", "merge_delay", "delta_p", "delta_c",
    "precompute_pool", "rv_period", "burst_cycle", "burst_high",
    "burst_high_window", "burst_low",
]


def save_scenario(scenario: Scenario, path: str):
    """Flat key-value config; one key per line, lists space-separated."""
    g = scenario.geom
    with open(path, "w") as fh:
        fh.write(f"format {_SCENARIO_TAG}\n")
        for key in _SCALAR_KEYS:
            fh.write(f"{key} {getattr(scenario, key)!r}\n".replace("'", ""))
        if scenario.explicit_length is not None:
            fh.write(f"explicit_length {scenario.explicit_length!r}\n")
        fh.write("rates " + " ".join(repr(r) for r in scenario.rates) + "\n")
        fh.write("rv_choices " + " ".join(repr(r) for r in scenario.rv_choices) + "\n")
        fh.write(f"num_lanes {g.num_lanes}\n")
        fh.write("approach_length " + " ".join(repr(v) for v in g.approach_length) + "\n")
        fh.write("intersection_span " + " ".join(repr(v) for v in g.intersection_span) + "\n")
        fh.write("speed_limit " + " ".join(repr(v) for v in g.lane_speed_limit) + "\n")
        if g.directions:
            fh.write("directions " + " ".join(g.directions) + "\n")
        for i, row in enumerate(g.conflict):
            fh.write(f"conflict_{i} " + " ".join(str(v) for v in row) + "\n")


def load_scenario(path: str) -> Scenario:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0].split(None, 1) != ["format", _SCENARIO_TAG]:
        raise InputError(f"{path}: not a {_SCENARIO_TAG} file")
    kv: dict[str, str] = {}
    for ln in lines[1:]:
        key, _, val = ln.partition(" ")
        kv[key] = val
    try:
        m = int(kv["num_lanes"])
        conflict = tuple(
            tuple(int(v) for v in kv[f"conflict_{i}"].split()) for i in range(m)
        )
        geom = LaneGeometry(
            num_lanes=m,
            approach_length=tuple(float(v) for v in kv["approach_length"].split()),
            intersection_span=tuple(float(v) for v in kv["intersection_span"].split()),
            lane_speed_limit=tuple(float(v) for v in kv["speed_limit"].split()),
            conflict=conflict,
            directions=tuple(kv.get("directions", "").split()),
        )
        kwargs = {}
        for key in _SCALAR_KEYS:
            raw = kv[key]
            default = getattr(Scenario, "__dataclass_fields__")[key].default
            if isinstance(default, bool):
                kwargs[key] = raw == "True"
            elif isinstance(default, int) and not isinstance(default, bool):
                kwargs[key] = int(raw)
            elif isinstance(default, float):
                kwargs[key] = float(raw)
            else:
                kwargs[key] = raw
        if "explicit_length" in kv:
            kwargs["explicit_length"] = float(kv["explicit_length"])
        return Scenario(
            geom=geom,
            rates=tuple(float(v) for v in kv["rates"].split()),
            rv_choices=tuple(float(v) for v in kv["rv_choices"].split()),
            **kwargs,
        )
    except (KeyError, ValueError) as exc:
        raise InputError(f"{path}: malformed scenario config ({exc})") from exc


def save_log(log: SimulationLog, path: str):
    """Line-delimited JSON: a versioned header, then one record per robot/tick.

    Floats go through JSON's shortest round-trip encoding, so identical runs
    produce byte-identical files.
    """
    def dump(obj):
        return json.dumps(obj, sort_keys=True, separators=(",", ":"))

    with open(path, "w") as fh:
        fh.write(
            dump(
                {
                    "format": _LOG_TAG,
                    "policy": log.policy,
                    "seed": log.seed,
                    "dt": log.dt,
                    "T_c": log.T_c,
                    "T_h": log.T_h,
                    "horizon": log.horizon,
                }
            )
            + "\n"
        )
        for a in log.robots:
            r = a.robot
            fh.write(
                dump(
                    {
                        "type": "robot",
                        "id": r.id,
                        "lane": r.lane,
                        "length": r.length,
                        "priority": r.priority,
                        "v_max": r.v_max,
                        "u_min": r.u_min,
                        "u_max": r.u_max,
                        "tentative_arrival": a.tentative_arrival,
                        "arrival_time": r.arrival_time,
                        "coord_start": r.coord_start,
                        "entry_time": r.entry_time,
                        "exit_time": r.exit_time,
                        "phase": a.phase,
                        "segments": [
                            {
                                "t0": seg.t0,
                                "dt": seg.dt,
                                "x0": float(seg.x[0]),
                                "v0": float(seg.v[0]),
                                "u": [float(u) for u in seg.u],
                            }
                            for seg in a.view.segments
                        ],
                    }
                )
                + "\n"
            )
        for tick in log.ticks:
            fh.write(
                dump(
                    {
                        "type": "tick",
                        "k": tick.k,
                        "t": tick.t,
                        "n_pending": tick.n_pending,
                        "n_entered": tick.n_entered,
                        "order": tick.order,
                    }
                )
                + "\n"
            )


def load_log_records(path: str) -> list[dict]:
    with open(path) as fh:
        records = [json.loads(ln) for ln in fh if ln.strip()]
    if not records or records[0].get("format") != _LOG_TAG:
        raise InputError(f"{path}: not a {_LOG_TAG} file")
    return records
