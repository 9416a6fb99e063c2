"""Operations-research comparison policies and the full-knowledge lower bound.

* instantaneous assignment: myopic matching of free agents to outstanding requests,
  recomputed every minute;
* two-step stochastic (TSS): matching that also prices sampled next-minute requests;
* oracle: branch-and-bound over per-vehicle pickup sequences with every future
  request known.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .dynamics import Control, Move, Pickup, Request, Stay, SystemState
from .graph import StreetGraph
from .policies import Policy

ENUMERATION_LIMIT = 6
TOP_NEAREST = 3


@dataclass
class AssignmentPlan:
    """Per-agent request index into ``state.outstanding`` (None when unassigned)."""

    targets: list
    routes: list = field(default_factory=list)


def _free_agents(s: SystemState) -> list[int]:
    return [ell for ell in range(s.m) if s.timers[ell] == 0]


def ble_matching(s: SystemState, g: StreetGraph) -> dict[int, int]:
    """Repeatedly take the closest (free agent, open request) pair.

    Ties: distance, then agent index, then position in the outstanding list.
    """
    pairs = sorted((int(g.dist[s.locations[a], r.pickup]), a, i)
                   for a in _free_agents(s) for i, r in enumerate(s.outstanding))
    used_a, used_r, match = set(), set(), {}
    for _, a, i in pairs:
        if a in used_a or i in used_r:
            continue
        match[a] = i
        used_a.add(a)
        used_r.add(i)
    return match


def optimal_matching(s: SystemState, g: StreetGraph) -> dict[int, int]:
    """Minimum total distance matching of maximal size."""
    agents = _free_agents(s)
    if not agents or not s.outstanding:
        return {}
    cost = np.array([[g.dist[s.locations[a], r.pickup] for r in s.outstanding] for a in agents])
    rows, cols = linear_sum_assignment(cost)
    return {agents[i]: int(j) for i, j in zip(rows, cols)}


def realize(s: SystemState, g: StreetGraph, match: dict[int, int]) -> list[Control]:
    """Controls that carry out a matching: pick up when there, else head to the pickup node."""
    out = []
    for ell in range(s.m):
        v = s.locations[ell]
        if s.timers[ell] > 0:
            out.append(Move(g.next_hop[v, s.busy_targets[ell]]))
        elif ell in match:
            rho = s.outstanding[match[ell]].pickup
            out.append(Pickup if rho == v else Move(g.next_hop[v, rho]))
        else:
            out.append(Stay)
    return out


def plan_of(s: SystemState, g: StreetGraph, match: dict[int, int]) -> AssignmentPlan:
    targets = [match.get(ell) for ell in range(s.m)]
    routes = []
    for ell, i in enumerate(targets):
        routes.append(None if i is None else _route(g, s.locations[ell], s.outstanding[i].pickup))
    return AssignmentPlan(targets, routes)


def _route(g: StreetGraph, a: int, b: int) -> list[int]:
    path = [a]
    while path[-1] != b:
        path.append(int(g.next_hop[path[-1], b]))
    return path


def instantaneous_assignment_control(s: SystemState, g: StreetGraph, hungarian: bool = False) -> list[Control]:
    match = optimal_matching(s, g) if hungarian else ble_matching(s, g)
    return realize(s, g, match)


class _JointPolicy(Policy):
    """Policies that plan all agents at once; per-agent queries read the cached plan."""

    def __init__(self, g):
        super().__init__(g)
        self._cache = (None, None)

    def plan(self, s: SystemState) -> list[Control]:
        raise NotImplementedError

    def joint_control(self, s):
        if self._cache[0] is not s:
            self._cache = (s, self.plan(s))
        return list(self._cache[1])

    def agent_control(self, s, ell, preceding):
        return self.joint_control(s)[ell]


class InstantaneousAssignmentPolicy(_JointPolicy):
    name = "inst-assign"

    def __init__(self, g: StreetGraph, hungarian: bool = False):
        super().__init__(g)
        self.hungarian = hungarian

    def plan(self, s):
        return instantaneous_assignment_control(s, self.g, self.hungarian)


# --- two-step stochastic matching -------------------------------------------------

def first_stage_matchings(s: SystemState, g: StreetGraph, limit: int = ENUMERATION_LIMIT,
                          top: int = TOP_NEAREST) -> list[dict[int, int]]:
    """Candidate maximal matchings of free agents to outstanding requests.

    Exhaustive when the smaller side has at most ``limit`` members; otherwise each agent
    only considers its ``top`` nearest requests and the largest matchings are kept.
    """
    agents = _free_agents(s)
    reqs = list(range(len(s.outstanding)))
    if not agents or not reqs:
        return [{}]
    size = min(len(agents), len(reqs))
    if size <= limit:
        out = []
        if len(agents) <= len(reqs):
            for perm in itertools.permutations(reqs, len(agents)):
                out.append(dict(zip(agents, perm)))
        else:
            for chosen in itertools.permutations(agents, len(reqs)):
                out.append(dict(zip(chosen, reqs)))
        return out
    near = {a: sorted(reqs, key=lambda i: (g.dist[s.locations[a], s.outstanding[i].pickup], i))[:top]
            for a in agents}
    best_size, out = 0, []
    for combo in itertools.product(*[near[a] + [None] for a in agents]):
        picked = [i for i in combo if i is not None]
        if len(picked) != len(set(picked)) or len(picked) < best_size:
            continue
        if len(picked) > best_size:
            best_size, out = len(picked), []
        out.append({a: i for a, i in zip(agents, combo) if i is not None})
    return out


def second_stage_cost(g: StreetGraph, agent_nodes: Sequence[int], counts: np.ndarray, pickups: np.ndarray) -> float:
    """Mean over samples of the min-cost matching of agents to sampled next-minute pickups."""
    if not len(agent_nodes) or counts.sum() == 0:
        return 0.0
    nodes = np.asarray(agent_nodes)
    total = 0.0
    for c, pu in zip(counts, pickups):
        if c == 0:
            continue
        cost = g.dist[nodes[:, None], pu[None, :c]]
        r, k = linear_sum_assignment(cost)
        total += cost[r, k].sum()
    return total / len(counts)


def tss_matching(s: SystemState, g: StreetGraph, counts: np.ndarray, pickups: np.ndarray) -> dict[int, int]:
    """First-stage matching minimizing travel now plus expected second-stage travel."""
    agents = _free_agents(s)
    cache: dict = {}
    best, best_key = {}, None
    for order, match in enumerate(first_stage_matchings(s, g)):
        first = sum(int(g.dist[s.locations[a], s.outstanding[i].pickup]) for a, i in match.items())
        rest = tuple(a for a in agents if a not in match)
        if rest not in cache:
            cache[rest] = second_stage_cost(g, [s.locations[a] for a in rest], counts, pickups)
        key = (first + cache[rest], order)
        if best_key is None or key[0] < best_key[0] - 1e-12:
            best, best_key = match, key
    return best


def tss_control(s: SystemState, g: StreetGraph, arrivals, sample_sets: int, seed: int = 0) -> list[Control]:
    if sample_sets < 1:
        raise ValueError("sample_sets must be at least 1")
    rng = np.random.default_rng([int(seed), int(s.minute), 4099])
    counts, pu, _ = arrivals.sample_batch(rng, sample_sets, s.minute + 1, 1)
    return realize(s, g, tss_matching(s, g, counts[:, 0], pu[:, 0, :]))


class TSSPolicy(_JointPolicy):
    name = "tss"

    def __init__(self, g: StreetGraph, arrivals, sample_sets: int = 1000, seed: int = 0):
        super().__init__(g)
        self.arrivals = arrivals
        self.sample_sets = sample_sets
        self.base_seed = seed

    def plan(self, s):
        return tss_control(s, self.g, self.arrivals, self.sample_sets, self.base_seed * 1_000_003 + self.seed)


# --- full-knowledge oracle ------------------------------------------------------

@dataclass
class OracleResult:
    cost: int
    exact: bool
    nodes: int
    schedule: list  # per vehicle: list of (request index, pickup minute)


def _vehicle_starts(initial: SystemState) -> list[tuple[int, int]]:
    """(node, first minute the vehicle can act freely) for each vehicle."""
    out = []
    for ell in range(initial.m):
        if initial.timers[ell] > 0:
            out.append((initial.busy_targets[ell], initial.minute + 1 + initial.timers[ell]))
        else:
            out.append((initial.locations[ell], initial.minute + 1))
    return out


def oracle_cost(initial: SystemState, requests: Sequence[Request], g: StreetGraph, horizon: int,
                node_budget: int = 2_000_000, warm_starts: Sequence = ()) -> OracleResult:
    """Minimum total waiting over minutes 1..horizon with every request known in advance.

    Vehicles serve ordered request subsets; a pickup happens at the earliest minute the
    vehicle can be at the pickup node, the request exists and no older request still waits
    at that node (pickups are oldest-first, as in the simulator). Unserved requests (or
    pickups after the horizon) cost ``horizon + 1 - arrival``. Partial schedules are
    extended in nondecreasing pickup time, which loses no schedule and lets the bound use
    the last event time. ``exact`` is False when the node budget ran out first.

    ``warm_starts`` holds per-vehicle request orders (indices into ``requests``), for
    example taken from simulated traces; each is re-timed and only seeds the incumbent.
    """
    keep = [i for i, r in enumerate(requests) if r.arrival <= horizon]
    reqs = [requests[i] for i in keep]
    renum = {i: j for j, i in enumerate(keep)}
    n_req = len(reqs)
    cap = horizon + 1
    arr = np.array([r.arrival for r in reqs], dtype=np.int64)
    rho = np.array([r.pickup for r in reqs], dtype=np.int64)
    trip = np.array([g.dist[r.pickup, r.dropoff] for r in reqs], dtype=np.int64)
    dst = np.array([r.dropoff for r in reqs], dtype=np.int64)
    dist = g.dist
    starts = _vehicle_starts(initial)
    if n_req == 0:
        return OracleResult(0, True, 0, [[] for _ in starts])

    unserved_cost = int((cap - arr).sum())
    best = {"cost": unserved_cost, "schedule": [[] for _ in starts]}
    nodes = 0
    exhausted = False

    # older[i]: requests at the same node that the simulator would hand out before i
    older = [np.array([j for j in range(n_req) if rho[j] == rho[i] and (arr[j], j) < (arr[i], i)], dtype=np.int64)
             for i in range(n_req)]

    def earliest(vnode, vfree):
        return np.maximum(arr, vfree + dist[vnode, rho])

    def blocked(i, p, waiting):
        o = older[i]
        return o.size > 0 and bool((waiting[o] & (arr[o] <= p)).any())

    def fifo_valid(sched) -> bool:
        when = np.full(n_req, cap + 1)
        for seq in sched:
            for i, p in seq:
                when[i] = p
        return all(not blocked(i, p, when > p) for seq in sched for i, p in seq)

    def greedy_seed():
        veh = list(starts)
        open_ = np.ones(n_req, dtype=bool)
        sched = [[] for _ in veh]
        cost = 0
        while open_.any():
            opts = [(int(earliest(v, t)[i]), i, k) for k, (v, t) in enumerate(veh) for i in np.flatnonzero(open_)]
            p, i, k = min(opts)
            if p > horizon:
                break
            cost += p - int(arr[i])
            open_[i] = False
            sched[k].append((i, p))
            veh[k] = (int(dst[i]), p + int(trip[i]) + 1)
        cost += int((cap - arr[open_]).sum())
        return cost, sched

    def retime(orders):
        served = np.zeros(n_req, dtype=bool)
        sched, cost = [], 0
        for (v, t), order in zip(starts, orders):
            seq = []
            for i in order:
                i = renum[i]
                p = max(int(arr[i]), t + int(dist[v, rho[i]]))
                if p > horizon or served[i]:
                    break
                served[i] = True
                seq.append((i, p))
                cost += p - int(arr[i])
                v, t = int(dst[i]), p + int(trip[i]) + 1
            sched.append(seq)
        return cost + int((cap - arr[~served]).sum()), sched

    for c0, s0 in [greedy_seed()] + [retime(o) for o in warm_starts]:
        if c0 < best["cost"] and fifo_valid(s0):
            best = {"cost": c0, "schedule": s0}

    veh = list(starts)
    open_ = np.ones(n_req, dtype=bool)
    sched = [[] for _ in veh]

    def search(accrued: int, last: int, last_node: int):
        nonlocal nodes, exhausted
        nodes += 1
        if nodes > node_budget:
            exhausted = True
            return
        idx = np.flatnonzero(open_)
        leave = accrued + int((cap - arr[idx]).sum())
        if leave < best["cost"]:
            best["cost"] = leave
            best["schedule"] = [list(x) for x in sched]
        if idx.size == 0:
            return
        pmat = np.array([earliest(v, t)[idx] for v, t in veh])  # [m, open]
        lb_times = np.minimum(np.maximum(pmat.min(axis=0), last), cap)
        if accrued + int((lb_times - arr[idx]).sum()) >= best["cost"]:
            return
        children = []
        for k in range(len(veh)):
            for j, i in enumerate(idx):
                p = int(pmat[k, j])
                if p < last:
                    # waiting only pays off when the latest pickup cleared an older request here
                    if rho[i] != last_node:
                        continue
                    p = last
                if p > horizon or blocked(i, p, open_):
                    continue
                children.append((p - int(arr[i]), p, k, int(i)))
        children.sort()
        for wait, p, k, i in children:
            if exhausted:
                return
            saved = veh[k]
            open_[i] = False
            veh[k] = (int(dst[i]), p + int(trip[i]) + 1)
            sched[k].append((i, p))
            search(accrued + wait, p, int(rho[i]))
            sched[k].pop()
            veh[k] = saved
            open_[i] = True

    search(0, 0, -1)
    schedule = [[(keep[i], p) for i, p in seq] for seq in best["schedule"]]
    return OracleResult(int(best["cost"]), not exhausted, nodes, schedule)


def episode_requests(trace) -> list[Request]:
    """Every request that arrived during a simulated episode."""
    return [r for rec in trace.records for r in rec.arrivals]


def trace_orders(trace) -> list[list[int]]:
    """Per-agent pickup order of a trace, as indices into ``episode_requests(trace)``."""
    index = {id(r): i for i, r in enumerate(episode_requests(trace))}
    m = len(trace.records[0].controls) if trace.records else 0
    orders = [[] for _ in range(m)]
    for _, r, ell in trace.pickups:
        orders[ell].append(index[id(r)])
    return orders
