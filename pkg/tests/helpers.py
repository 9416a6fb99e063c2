"""Shared test utilities: a random feasible policy and per-episode invariant checks."""

import numpy as np

from taxiplay.benchmarks import episode_requests
from taxiplay.dynamics import PICKUP
from taxiplay.harness import audit_trace
from taxiplay.policies import Policy, available_controls


class RandomPolicy(Policy):
    """Uniform choice among each agent's feasible controls (seeded per episode)."""

    name = "random"
    deterministic = False

    def reset(self, horizon=None, seed=0):
        super().reset(horizon, seed)
        self.rng = np.random.default_rng([seed, 424242])

    def agent_control(self, s, ell, preceding):
        cands = available_controls(s, ell, self.g, preceding)
        return cands[int(self.rng.integers(len(cands)))]


def check_invariants(trace, g):
    """Recursion identity, conservation, busy-path decrement and dual accounting."""
    prev_out = 0
    for rec in trace.records:
        s = rec.state
        s.check(g)
        eta = len(rec.arrivals)
        psi = rec.serviced
        assert psi == sum(u.kind == PICKUP for u in rec.controls)
        assert rec.cost == prev_out + eta - psi, f"recursion broken at minute {rec.minute}"
        assert len(s.outstanding) == prev_out + eta
        prev_out = rec.cost
    for a, b in zip(trace.records, trace.records[1:]):
        for ell in range(a.state.m):
            if a.state.timers[ell] > 0:
                before = g.dist[a.state.locations[ell], a.state.busy_targets[ell]]
                tgt = a.state.busy_targets[ell]
                after = g.dist[b.state.locations[ell], tgt]
                assert after == before - 1, f"busy agent {ell} did not close in at minute {b.minute}"
    arrived = len(episode_requests(trace))
    assert arrived == len(trace.pickups) + trace.records[-1].cost
    report = audit_trace(trace)
    assert report.simulator_total == trace.total_cost
    return report
