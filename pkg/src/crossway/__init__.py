"""Coordination engine for continual robot streams at an unsignalized intersection.

Robots arrive randomly on fixed lanes, receive provisional (always-stoppable)
trajectories on arrival and coordinated intersection-crossing trajectories at
periodic decision ticks.  The crossing order at each tick is set by a pluggable
precedence policy (hand-written heuristics, exhaustive search, or a learned
shared neural policy), and trajectories are optimized sequentially in that
order, so mutual exclusion inside the intersection and rear-end safety hold by
construction.
"""

__version__ = "0.1.0"
