"""Exact finite-horizon dynamic programming for tiny instances with known arrivals."""

from functools import lru_cache

from taxiplay.dynamics import add_arrivals, apply_controls
from taxiplay.policies import available_controls


def joint_controls(s, g):
    """Every feasible joint control (no request claimed twice)."""
    out = []

    def extend(prefix):
        if len(prefix) == s.m:
            out.append(tuple(prefix))
            return
        for u in available_controls(s, len(prefix), g, prefix):
            extend(prefix + [u])

    extend([])
    return out


def solve(g, arrivals_by_minute, horizon):
    """Returns (J, Q): J(state) is the optimal cost-to-go from a minute-k state (its
    minute-k arrivals already present); Q(state, joint) the cost of ``joint`` then optimal."""

    @lru_cache(maxsize=None)
    def J(s):
        return min(Q(s, u) for u in joint_controls(s, g))

    @lru_cache(maxsize=None)
    def Q(s, u):
        u = tuple(u)
        mid, _ = apply_controls(s, list(u), g)
        cost = len(mid.outstanding)
        if s.minute >= horizon:
            return cost
        nxt = add_arrivals(mid, tuple(arrivals_by_minute.get(s.minute + 1, ())))
        return cost + J(nxt)

    return J, Q
