"""Fleet state, per-agent control sets, transitions, stage cost and episode simulation.

Timeline of one minute ``k``: the state already holds the requests that arrived at
``k``; every agent issues a control; pickups and moves are applied; the stage cost is
the number of requests still outstanding; then the requests of minute ``k+1`` arrive.
A request arriving at ``a`` and picked up at ``p`` therefore waits ``p - a`` minutes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .graph import StreetGraph

MOVE, STAY, PICKUP = "move", "stay", "pickup"


class InfeasibleControl(ValueError):
    pass


@dataclass(frozen=True)
class Request:
    pickup: int
    dropoff: int
    arrival: int
    assigned: bool = False

    def __post_init__(self):
        if self.pickup == self.dropoff:
            raise ValueError(f"request with pickup == dropoff == {self.pickup}")


@dataclass(frozen=True, order=True)
class Control:
    kind: str
    target: Optional[int] = None

    def __repr__(self):
        if self.kind == MOVE:
            return f"Move({self.target})"
        return "Stay" if self.kind == STAY else "Pickup"


def Move(target: int) -> Control:
    return Control(MOVE, int(target))


Stay = Control(STAY)
Pickup = Control(PICKUP)


@dataclass(frozen=True)
class SystemState:
    minute: int
    locations: tuple
    timers: tuple
    outstanding: tuple = ()
    busy_targets: tuple = field(default=None)

    def __post_init__(self):
        if self.busy_targets is None:
            object.__setattr__(self, "busy_targets", (None,) * len(self.locations))

    @property
    def m(self) -> int:
        return len(self.locations)

    def is_free(self, ell: int) -> bool:
        return self.timers[ell] == 0

    def requests_at(self, node: int) -> list[int]:
        """Indices of requests waiting at ``node``, oldest first."""
        return sorted((i for i, r in enumerate(self.outstanding) if r.pickup == node),
                      key=lambda i: self.outstanding[i].arrival)

    def check(self, g: StreetGraph) -> None:
        if not (len(self.locations) == len(self.timers) == len(self.busy_targets)):
            raise ValueError("locations, timers and busy_targets must have equal length")
        for ell, (v, t, b) in enumerate(zip(self.locations, self.timers, self.busy_targets)):
            if t < 0:
                raise ValueError(f"agent {ell}: negative timer")
            if (t == 0) != (b is None):
                raise ValueError(f"agent {ell}: timer {t} inconsistent with busy target {b}")
            if t > 0 and g.dist[v, b] != t:
                raise ValueError(f"agent {ell}: dist to busy target {g.dist[v, b]} != timer {t}")
        if any(r.assigned for r in self.outstanding):
            raise ValueError("outstanding list holds an assigned request")


def initial_state(locations: Sequence[int], minute: int = 0) -> SystemState:
    m = len(locations)
    return SystemState(minute, tuple(int(v) for v in locations), (0,) * m, (), (None,) * m)


def control_set(s: SystemState, ell: int, g: StreetGraph) -> list[Control]:
    """Feasible controls for agent ``ell`` in preference order (Pickup, Moves by node, Stay)."""
    v = s.locations[ell]
    if s.timers[ell] > 0:
        return [Move(g.next_hop[v, s.busy_targets[ell]])]
    out = [Pickup] if any(r.pickup == v for r in s.outstanding) else []
    out += [Move(j) for j in g.neighbors(v)]
    out.append(Stay)
    return out


def preference_rank(u: Control) -> tuple:
    order = {PICKUP: 0, MOVE: 1, STAY: 2}
    return (order[u.kind], -1 if u.target is None else u.target)


def _match_pickups(s: SystemState, controls: Sequence[Control]) -> dict[int, int]:
    """Map agent -> index in ``s.outstanding``; oldest request at the node first."""
    taken: set[int] = set()
    match = {}
    for ell, u in enumerate(controls):
        if u.kind != PICKUP:
            continue
        node = s.locations[ell]
        idx = next((i for i in s.requests_at(node) if i not in taken), None)
        if idx is None:
            raise InfeasibleControl(f"minute {s.minute}: agent {ell} has nothing to pick up at node {node}")
        taken.add(idx)
        match[ell] = idx
    return match


def count_serviced(s: SystemState, controls: Sequence[Control]) -> int:
    return len(_match_pickups(s, controls))


def check_feasible(s: SystemState, controls: Sequence[Control], g: StreetGraph) -> None:
    if len(controls) != s.m:
        raise InfeasibleControl(f"expected {s.m} controls, got {len(controls)}")
    for ell, u in enumerate(controls):
        if s.timers[ell] > 0:
            forced = g.next_hop[s.locations[ell], s.busy_targets[ell]]
            if u != Move(forced):
                raise InfeasibleControl(f"minute {s.minute}: busy agent {ell} must Move({forced}), got {u!r}")
        elif u.kind == MOVE and u.target not in g.neighbors(s.locations[ell]):
            raise InfeasibleControl(f"minute {s.minute}: agent {ell} cannot move to {u.target}")
        elif u.kind not in (MOVE, STAY, PICKUP):
            raise InfeasibleControl(f"unknown control kind {u.kind!r}")
    _match_pickups(s, controls)


def apply_controls(s: SystemState, controls: Sequence[Control], g: StreetGraph) -> tuple[SystemState, int]:
    """Apply a joint control within minute ``s.minute``. Returns (post-control state, serviced count)."""
    check_feasible(s, controls, g)
    match = _match_pickups(s, controls)
    locs, timers, targets = list(s.locations), list(s.timers), list(s.busy_targets)
    for ell, u in enumerate(controls):
        if ell in match:
            r = s.outstanding[match[ell]]
            targets[ell] = r.dropoff
            timers[ell] = int(g.dist[r.pickup, r.dropoff])
        elif s.timers[ell] > 0:
            locs[ell] = u.target
            timers[ell] -= 1
            if timers[ell] == 0:
                targets[ell] = None
        elif u.kind == MOVE:
            locs[ell] = u.target
    served = set(match.values())
    remaining = tuple(r for i, r in enumerate(s.outstanding) if i not in served)
    return SystemState(s.minute, tuple(locs), tuple(timers), remaining, tuple(targets)), len(match)


def add_arrivals(s: SystemState, new_requests: Sequence[Request]) -> SystemState:
    """Advance the clock by one minute and append that minute's arrivals."""
    k = s.minute + 1
    for r in new_requests:
        if r.arrival != k:
            raise ValueError(f"request arriving at minute {r.arrival} appended at minute {k}")
    return replace(s, minute=k, outstanding=s.outstanding + tuple(new_requests))


def transition(s: SystemState, controls: Sequence[Control], new_requests: Sequence[Request],
               g: StreetGraph) -> SystemState:
    mid, _ = apply_controls(s, controls, g)
    return add_arrivals(mid, new_requests)


def stage_cost(s_after: SystemState) -> int:
    """Outstanding count of a post-control state."""
    return len(s_after.outstanding)


@dataclass
class MinuteRecord:
    minute: int
    state: SystemState
    controls: tuple
    arrivals: tuple
    serviced: int
    cost: int


@dataclass
class Trace:
    horizon: int
    records: list = field(default_factory=list)
    pickups: list = field(default_factory=list)  # (minute, Request, agent)

    @property
    def total_cost(self) -> int:
        return sum(r.cost for r in self.records)


def run_episode(initial: SystemState, policy, arrivals, horizon: int, g: StreetGraph,
                seed: int = 0) -> tuple[int, Trace]:
    """Simulate minutes 1..horizon and return (total waiting minutes, trace).

    ``arrivals`` is anything with ``sample_minute(rng, minute) -> list[Request]``
    (a DemandModel or ScriptedArrivals). Minute ``k`` draws from a stream
    seeded by ``(seed, k)`` so every policy sees the same realization.
    """
    from .demand import minute_rng

    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if initial.minute != 0 or initial.outstanding:
        raise ValueError("episodes start from a minute-0 state with no outstanding requests")
    initial.check(g)
    policy.reset(horizon=horizon, seed=seed)
    trace = Trace(horizon)
    first = tuple(arrivals.sample_minute(minute_rng(seed, 1), 1))
    s = add_arrivals(initial, first)
    new = first
    for k in range(1, horizon + 1):
        controls = tuple(policy.joint_control(s))
        try:
            check_feasible(s, controls, g)
        except InfeasibleControl as exc:
            raise InfeasibleControl(f"policy {policy.name}: {exc}") from exc
        match = _match_pickups(s, controls)
        for ell, i in sorted(match.items()):
            trace.pickups.append((k, s.outstanding[i], ell))
        mid, psi = apply_controls(s, controls, g)
        cost = stage_cost(mid)
        trace.records.append(MinuteRecord(k, s, controls, new, psi, cost))
        if k < horizon:
            new = tuple(arrivals.sample_minute(minute_rng(seed, k + 1), k + 1))
            s = add_arrivals(mid, new)
    return trace.total_cost, trace


def trace_rows(trace: Trace):
    """Flatten a trace into CSV rows (minute, agent, location, timer, control, arrivals, serviced, cost)."""
    yield ("minute", "agent", "location", "timer", "control", "outstanding", "serviced", "cost")
    for rec in trace.records:
        for ell, u in enumerate(rec.controls):
            yield (rec.minute, ell, rec.state.locations[ell], rec.state.timers[ell], repr(u),
                   len(rec.state.outstanding), rec.serviced, rec.cost)


def waiting_minutes(trace: Trace) -> int:
    """Sum over requests of min(pickup minute, horizon + 1) - arrival minute."""
    n_plus = trace.horizon + 1
    picked = {}
    for k, r, _ in trace.pickups:
        picked[(r.arrival, r.pickup, r.dropoff, id(r))] = k
    total = 0
    seen = set()
    for rec in trace.records:
        for r in rec.arrivals:
            key = (r.arrival, r.pickup, r.dropoff, id(r))
            if key in seen:
                continue
            seen.add(key)
            total += min(picked.get(key, n_plus), n_plus) - r.arrival
    return total


def as_arrays(s: SystemState):
    """Numpy views used by the batch simulator."""
    loc = np.asarray(s.locations, dtype=np.int64)
    timer = np.asarray(s.timers, dtype=np.int64)
    target = np.array([-1 if b is None else b for b in s.busy_targets], dtype=np.int64)
    return loc, timer, target
