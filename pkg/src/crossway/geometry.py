"""Lane layout, intersection extent and the lane-conflict relation.

Positions along a lane run from ``-approach_length`` at the RoI entry to ``0``
at the intersection entry; the intersection occupies ``[0, intersection_span]``
along each lane.  Two lanes either coincide (conflict 0 -- same lane), run
disjoint (conflict 1), or cross inside the intersection (conflict -1), in
which case they share the intersection as a mutual-exclusion resource.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

# Default warehouse layout: 8 lanes, two per compass direction, assigned
# round-robin N, E, S, W.  N/S lanes run on the vertical axis, E/W on the
# horizontal one; crossing axes conflict, parallel distinct lanes do not.
DEFAULT_DIRECTIONS = ("N", "E", "S", "W")
_AXIS = {"N": 0, "S": 0, "E": 1, "W": 1}


@dataclass(frozen=True)
class LaneGeometry:
    """Immutable lane layout; safe to share between concurrent simulations."""

    num_lanes: int
    approach_length: tuple[float, ...]
    intersection_span: tuple[float, ...]
    lane_speed_limit: tuple[float, ...]
    conflict: tuple[tuple[int, ...], ...]
    directions: tuple[str, ...] = field(default=())

    def __post_init__(self):
        m = self.num_lanes
        if m <= 0:
            raise InputError("need at least one lane")
        for name in ("approach_length", "intersection_span", "lane_speed_limit"):
            vals = getattr(self, name)
            if len(vals) != m:
                raise InputError(f"{name} must have {m} entries")
            if any(v <= 0 for v in vals):
                raise InputError(f"{name} entries must be positive")
        if len(self.conflict) != m or any(len(row) != m for row in self.conflict):
            raise InputError("conflict table must be MxM")
        for a in range(m):
            if self.conflict[a][a] != 0:
                raise InputError("conflict diagonal must be 0")
            for b in range(m):
                if self.conflict[a][b] != self.conflict[b][a]:
                    raise InputError("conflict table must be symmetric")
                if a != b and self.conflict[a][b] not in (1, -1):
                    raise InputError("off-diagonal conflict entries must be +-1")

    def conflict_value(self, lane_a: int, lane_b: int) -> int:
        if not (0 <= lane_a < self.num_lanes and 0 <= lane_b < self.num_lanes):
            raise InputError(f"lane id out of range: ({lane_a}, {lane_b})")
        return self.conflict[lane_a][lane_b]

    def conflicting_lanes(self, lane: int) -> list[int]:
        return [b for b in range(self.num_lanes) if self.conflict_value(lane, b) == -1]


def conflict_value(geom: LaneGeometry, lane_a: int, lane_b: int) -> int:
    """Lane-level realization of the pairwise compatibility indicator."""
    return geom.conflict_value(lane_a, lane_b)


def _round_robin_conflicts(num_lanes: int) -> tuple[tuple[int, ...], ...]:
    dirs = [DEFAULT_DIRECTIONS[i % 4] for i in range(num_lanes)]
    table = np.ones((num_lanes, num_lanes), dtype=int)
    for a in range(num_lanes):
        for b in range(num_lanes):
            if a == b:
                table[a, b] = 0
            elif _AXIS[dirs[a]] != _AXIS[dirs[b]]:
                table[a, b] = -1
    return tuple(tuple(int(v) for v in row) for row in table)


def default_warehouse_geometry(heterogeneous_speed_limits: bool = False) -> LaneGeometry:
    """8-lane warehouse crossing: 7 m approaches, 0.7 m lane width.

    Four 0.7 m lanes per axis make the intersection a 2.8 m square, so each
    lane traverses 2.8 m of shared area.  With ``heterogeneous_speed_limits``
    lanes 0, 3, 4, 7 allow 1.5 m/s and lanes 1, 2, 5, 6 allow 1.0 m/s;
    otherwise all lanes allow 1.5 m/s.
    """
    m = 8
    if heterogeneous_speed_limits:
        limits = tuple(1.5 if l in (0, 3, 4, 7) else 1.0 for l in range(m))
    else:
        limits = (1.5,) * m
    return LaneGeometry(
        num_lanes=m,
        approach_length=(7.0,) * m,
        intersection_span=(2.8,) * m,
        lane_speed_limit=limits,
        conflict=_round_robin_conflicts(m),
        directions=tuple(DEFAULT_DIRECTIONS[i % 4] for i in range(m)),
    )
