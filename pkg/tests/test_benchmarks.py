import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from taxiplay.benchmarks import (InstantaneousAssignmentPolicy, TSSPolicy, ble_matching, episode_requests,
                                 first_stage_matchings, instantaneous_assignment_control, optimal_matching,
                                 oracle_cost, plan_of, tss_control, tss_matching, trace_orders)
from taxiplay.demand import CategoricalDistribution, DemandModel, ScriptedArrivals, eta_distribution, table_model, uniform_nodes
from taxiplay.dynamics import Move, Pickup, Request, Stay, SystemState, add_arrivals, initial_state, run_episode
from taxiplay.graph import from_edges, grid_graph
from taxiplay.policies import GreedyPolicy

import dp_oracle


def line(n):
    return from_edges([(i, i + 1) for i in range(n - 1)] + [(i + 1, i) for i in range(n - 1)])


def point(n, node):
    p = np.zeros(n)
    p[node] = 1.0
    return CategoricalDistribution(tuple(range(n)), p)


def test_no_requests_all_stay(grid5):
    assert instantaneous_assignment_control(initial_state([0, 5]), grid5) == [Stay, Stay]


def test_ble_hand_example():
    g = line(10)
    # a1 at 2, a2 at 5; r1 at 3, r2 at 7: distances 1, 5, 2, 2
    s = add_arrivals(initial_state([2, 5]), [Request(3, 0, 1), Request(7, 0, 1)])
    assert ble_matching(s, g) == {0: 0, 1: 1}
    assert instantaneous_assignment_control(s, g) == [Move(3), Move(6)]


def test_ble_differs_from_optimal_matching():
    g = line(10)
    # the closest pair first strands the other agent: 1 + 9 against 4 + 4
    s = add_arrivals(initial_state([5, 0]), [Request(4, 9, 1), Request(9, 0, 1)])
    assert ble_matching(s, g) == {0: 0, 1: 1}
    assert optimal_matching(s, g) == {0: 1, 1: 0}
    assert instantaneous_assignment_control(s, g, hungarian=True) == [Move(6), Move(1)]


def test_colocated_pickup(line3):
    s = add_arrivals(initial_state([1]), [Request(1, 2, 1)])
    assert instantaneous_assignment_control(s, line3) == [Pickup]


def test_busy_agents_excluded(line3):
    s = SystemState(1, (0, 2), (2, 0), (Request(1, 0, 1),), (2, None))
    assert ble_matching(s, line3) == {1: 0}
    assert instantaneous_assignment_control(s, line3) == [Move(1), Move(1)]


def test_plan_routes_follow_next_hop(grid5):
    s = add_arrivals(initial_state([0, 24]), [Request(12, 0, 1)])
    plan = plan_of(s, grid5, ble_matching(s, grid5))
    route = plan.routes[plan.targets.index(0)]
    assert route[-1] == 12 and len(route) == grid5.dist[route[0], 12] + 1
    assert all(grid5.next_hop[a, 12] == b for a, b in zip(route, route[1:]))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_matchings_never_share_requests(seed):
    g = grid_graph(4, 4)
    rng = np.random.default_rng(seed)
    m = int(rng.integers(1, 5))
    reqs = [Request(int(p), int((p + 1) % 16), 1) for p in rng.integers(0, 16, int(rng.integers(0, 6)))]
    s = add_arrivals(initial_state(rng.integers(0, 16, m)), reqs)
    for match in (ble_matching(s, g), optimal_matching(s, g)):
        assert len(set(match.values())) == len(match) == min(m, len(reqs))
    assert ble_matching(s, g) == ble_matching(s, g)


def test_first_stage_enumeration_counts():
    g = line(10)
    s = add_arrivals(initial_state([0, 9]), [Request(k, 0 if k else 1, 1) for k in (2, 4, 6)])
    assert len(first_stage_matchings(s, g)) == 6      # 3 * 2 ordered assignments
    big = add_arrivals(initial_state(list(range(7))), [Request(k, 9, 1) for k in range(7)] + [Request(8, 0, 1)])
    cands = first_stage_matchings(big, g)
    assert cands and all(len(c) == 7 for c in cands)
    assert all(len(set(c.values())) == 7 for c in cands)


def test_tss_without_future_demand_is_min_cost_matching(grid5):
    quiet = DemandModel(eta_distribution([1.0]), uniform_nodes(25), uniform_nodes(25))
    rng = np.random.default_rng(3)
    for _ in range(20):
        reqs = [Request(int(p), int((p + 3) % 25), 1) for p in rng.integers(0, 25, int(rng.integers(1, 5)))]
        s = add_arrivals(initial_state(rng.integers(0, 25, 3)), reqs)
        d = lambda m: sum(grid5.dist[s.locations[a], s.outstanding[i].pickup] for a, i in m.items())
        counts, pu, _ = quiet.sample_batch(np.random.default_rng(0), 10, 2, 1)
        match = tss_matching(s, grid5, counts[:, 0], pu[:, 0, :])
        assert d(match) == d(optimal_matching(s, grid5))
        assert len(match) == min(3, len(reqs))


def test_tss_two_agent_hand_example():
    g = line(5)
    # agents at 1 and 3, one request at 2; next minute one request appears at node 0 for sure
    dm = DemandModel(eta_distribution([0.0, 1.0]), point(5, 0), point(5, 4))
    s = add_arrivals(initial_state([1, 3]), [Request(2, 4, 1)])
    # agent 0 takes it: 1 + d(3, 0) = 4; agent 1 takes it: 1 + d(1, 0) = 2
    assert tss_control(s, g, dm, sample_sets=5) == [Stay, Move(2)]
    # the myopic rule breaks the distance tie by agent index instead
    assert instantaneous_assignment_control(s, g) == [Move(2), Stay]


def test_tss_deterministic(grid5):
    dm = table_model("high", 25)
    s = add_arrivals(initial_state([0, 12, 24]), [Request(6, 1, 1), Request(18, 2, 1)])
    a = tss_control(s, grid5, dm, 50, seed=4)
    assert a == tss_control(s, grid5, dm, 50, seed=4)
    with pytest.raises(ValueError):
        tss_control(s, grid5, dm, 0)


# --- oracle -------------------------------------------------------------------------

def test_oracle_no_requests(grid5):
    assert oracle_cost(initial_state([0]), [], grid5, 10).cost == 0


def test_oracle_distance_three(grid5):
    res = oracle_cost(initial_state([0]), [Request(3, 0, 1)], grid5, 10)
    assert (res.cost, res.exact) == (3, True)
    assert res.schedule == [[(0, 4)]]


def test_oracle_unservable_request_waits_to_horizon(grid5):
    # too far to reach before the horizon: it waits every remaining minute
    assert oracle_cost(initial_state([0]), [Request(24, 0, 2)], grid5, 5).cost == 4
    # arrivals past the horizon are ignored
    assert oracle_cost(initial_state([0]), [Request(24, 0, 6)], grid5, 5).cost == 0


def test_oracle_prepositions(line3):
    # future request known: the vehicle can be waiting when it appears
    assert oracle_cost(initial_state([0]), [Request(2, 0, 3)], line3, 5).cost == 0


def test_oracle_budget_marks_inexact(grid5):
    rng = np.random.default_rng(1)
    reqs = [Request(int(p), int((p + 7) % 25), int(k)) for p, k in zip(rng.integers(0, 25, 14), rng.integers(1, 6, 14))]
    res = oracle_cost(initial_state([0, 24]), reqs, grid5, 12, node_budget=50)
    assert not res.exact
    full = oracle_cost(initial_state([0, 24]), reqs, grid5, 12)
    assert full.exact and full.cost <= res.cost


def tiny_instances(count, seed):
    rng = np.random.default_rng(seed)
    graphs = [line(3), from_edges([(0, 1), (1, 2), (2, 0)]), from_edges([(0, 1), (1, 2), (2, 3), (3, 0), (1, 0)])]
    out = []
    while len(out) < count:
        g = graphs[int(rng.integers(len(graphs)))]
        horizon = int(rng.integers(2, 5))
        m = int(rng.integers(1, 3))
        reqs = []
        for _ in range(int(rng.integers(1, 4))):
            p, d = rng.choice(g.n, size=2, replace=False)
            reqs.append(Request(int(p), int(d), int(rng.integers(1, horizon + 1))))
        out.append((g, horizon, tuple(int(v) for v in rng.integers(0, g.n, m)), reqs))
    return out


def brute_force(g, horizon, locs, reqs):
    by = {}
    for r in reqs:
        by.setdefault(r.arrival, []).append(r)
    J, _ = dp_oracle.solve(g, {k: tuple(v) for k, v in by.items()}, horizon)
    return J(add_arrivals(initial_state(locs), by.get(1, [])))


def test_oracle_matches_brute_force():
    for g, horizon, locs, reqs in tiny_instances(80, seed=11):
        res = oracle_cost(initial_state(locs), reqs, g, horizon)
        assert res.exact
        assert res.cost == brute_force(g, horizon, locs, reqs), (locs, reqs, horizon)


def test_oracle_dominates_policies_and_accepts_warm_starts(grid5):
    dm = table_model("high", 25)
    pols = [GreedyPolicy(grid5), InstantaneousAssignmentPolicy(grid5), TSSPolicy(grid5, dm, 20)]
    for seed in range(4):
        s0 = initial_state([0, 12, 24])
        runs = [run_episode(s0, p, dm, 12, grid5, seed=seed) for p in pols]
        reqs = episode_requests(runs[0][1])
        assert all(episode_requests(t) == reqs for _, t in runs)
        warm = [trace_orders(t) for _, t in runs]
        res = oracle_cost(s0, reqs, grid5, 12, warm_starts=warm)
        assert all(res.cost <= c for c, _ in runs)
        # a warm start replays a policy's own schedule, so it can only help
        assert res.cost <= oracle_cost(s0, reqs, grid5, 12, node_budget=1, warm_starts=warm).cost


def test_oracle_schedule_is_consistent(grid5):
    rng = np.random.default_rng(8)
    reqs = [Request(int(p), int((p + 11) % 25), int(k)) for p, k in zip(rng.integers(0, 25, 8), rng.integers(1, 8, 8))]
    res = oracle_cost(initial_state([3, 20]), reqs, grid5, 15)
    served = [i for seq in res.schedule for i, _ in seq]
    assert len(served) == len(set(served))
    waits = sum(p - reqs[i].arrival for seq in res.schedule for i, p in seq)
    unserved = sum(16 - r.arrival for i, r in enumerate(reqs) if i not in served)
    assert waits + unserved == res.cost
