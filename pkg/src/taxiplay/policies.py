"""Policy interface, greedy base policy, one-agent-at-a-time rollout and online play."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import batchsim
from .dynamics import (MOVE, PICKUP, Control, Move, Pickup, Stay, SystemState, control_set,
                       preference_rank)
from .graph import StreetGraph


class Policy:
    """Agents decide in index order; each sees the controls already fixed for earlier agents."""

    name = "policy"
    deterministic = True

    def __init__(self, g: StreetGraph):
        self.g = g
        self.horizon = None
        self.seed = 0

    def reset(self, horizon=None, seed: int = 0) -> None:
        self.horizon = horizon
        self.seed = seed

    def agent_control(self, s: SystemState, ell: int, preceding: Sequence[Control]) -> Control:
        raise NotImplementedError

    def joint_control(self, s: SystemState) -> list[Control]:
        chosen: list[Control] = []
        for ell in range(s.m):
            chosen.append(self.agent_control(s, ell, chosen))
        return chosen

    def complete(self, s: SystemState, prefix: Sequence[Control]) -> list[Control]:
        """Extend a prefix of fixed controls to a joint control using this policy."""
        chosen = list(prefix)
        for ell in range(len(prefix), s.m):
            chosen.append(self.agent_control(s, ell, chosen))
        return chosen

    def batch_policy(self):
        """Vectorized twin used inside rollout simulations, or None."""
        return None


def claimed_requests(s: SystemState, preceding: Sequence[Control]) -> set[int]:
    """Indices of outstanding requests consumed by earlier agents' pickups."""
    taken: set[int] = set()
    for j, u in enumerate(preceding):
        if u.kind == PICKUP and s.timers[j] == 0:
            idx = next((i for i in s.requests_at(s.locations[j]) if i not in taken), None)
            if idx is not None:
                taken.add(idx)
    return taken


def available_controls(s: SystemState, ell: int, g: StreetGraph, preceding: Sequence[Control] = ()) -> list[Control]:
    """``control_set`` without a Pickup whose requests earlier agents already took."""
    cands = control_set(s, ell, g)
    if cands[0].kind == PICKUP:
        taken = claimed_requests(s, preceding)
        if all(i in taken for i in s.requests_at(s.locations[ell])):
            cands = cands[1:]
    return cands


def greedy_control(s: SystemState, ell: int, g: StreetGraph, preceding: Sequence[Control] = ()) -> Control:
    """Pick up if a request waits here, else head for the nearest one, else stay.

    Requests already claimed by earlier agents' pickups this minute are skipped;
    there is no other coordination.
    """
    v = s.locations[ell]
    if s.timers[ell] > 0:
        return Move(g.next_hop[v, s.busy_targets[ell]])
    taken = claimed_requests(s, preceding)
    open_ = [(i, r) for i, r in enumerate(s.outstanding) if i not in taken]
    if any(r.pickup == v for _, r in open_):
        return Pickup
    if not open_:
        return Stay
    _, r = min(open_, key=lambda ir: (g.dist[v, ir[1].pickup], ir[1].arrival, ir[1].pickup))
    return Move(g.next_hop[v, r.pickup])


class GreedyPolicy(Policy):
    name = "greedy"

    def agent_control(self, s, ell, preceding):
        return greedy_control(s, ell, self.g, preceding)

    def batch_policy(self):
        return batchsim.GreedyBatchPolicy()


@dataclass
class RolloutConfig:
    trajectories_per_leaf: int = 5000
    truncation: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.trajectories_per_leaf < 1 or self.truncation < 1:
            raise ValueError("trajectories_per_leaf and truncation must be positive")


@dataclass
class LeafStats:
    """Instrumentation: candidate controls evaluated and simulations run."""

    decisions: int = 0
    leaf_evaluations: int = 0
    simulated_rows: int = 0
    last_decision: int = 0
    last_streams: tuple = ()


def decision_rng(seed: int, minute: int, ell: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(minute), int(ell), 7919])


def evaluate_candidates(s: SystemState, ell: int, candidates: Sequence[Control], preceding: Sequence[Control],
                        base: Policy, arrivals, cfg: RolloutConfig, horizon, seed: int,
                        stats: LeafStats | None = None) -> np.ndarray:
    """Monte-Carlo Q-factor estimates for each candidate control of agent ``ell``.

    Each candidate fixes the joint control (preceding, candidate, base completion),
    then follows the base policy for up to ``cfg.truncation`` minutes and adds the
    outstanding count at truncation. All candidates share the same arrival paths.
    """
    g = base.g
    remaining = cfg.truncation if horizon is None else max(0, min(cfg.truncation, horizon - s.minute))
    terminal = horizon is None or s.minute + cfg.truncation < horizon
    minutes = remaining + (1 if terminal else 0)
    deterministic = getattr(arrivals, "deterministic", False)
    k = 1 if deterministic else cfg.trajectories_per_leaf
    rng = decision_rng(seed, s.minute, ell)
    future = arrivals.sample_batch(rng, k, s.minute + 1, minutes) if minutes else None
    c = len(candidates)
    if future is not None:
        future = tuple(np.tile(a, (c,) + (1,) * (a.ndim - 1)) for a in future)
    b = batchsim.build(s, g, c * k, future)
    kinds, tgts = [], []
    for u in candidates:
        joint = base.complete(s, list(preceding) + [u])
        kd, tg = batchsim.encode_controls(joint)
        kinds.append(np.tile(kd, (k, 1)))
        tgts.append(np.tile(tg, (k, 1)))
    total = batchsim.step(b, np.concatenate(kinds), np.concatenate(tgts)).astype(float)
    cont = base.batch_policy()
    for _ in range(remaining):
        kd, tg = cont.controls(b)
        total += batchsim.step(b, kd, tg)
    if terminal:
        total += b.outstanding()
    if stats is not None:
        stats.leaf_evaluations += c
        stats.simulated_rows += c * k
        stats.last_streams = (seed, s.minute, ell)
    return total.reshape(c, k).mean(axis=1)


def pick_best(candidates: Sequence[Control], q: np.ndarray, tol: float = 1e-9) -> Control:
    best = q.min()
    tied = [u for u, v in zip(candidates, q) if v <= best + tol]
    return min(tied, key=preference_rank)


class RolloutPolicy(Policy):
    """One-agent-at-a-time rollout over a base policy."""

    name = "rollout"

    def __init__(self, g: StreetGraph, base: Policy, cfg: RolloutConfig, arrivals):
        super().__init__(g)
        if base.batch_policy() is None:
            raise ValueError(f"base policy {base.name} has no vectorized form")
        self.base = base
        self.cfg = cfg
        self.arrivals = arrivals
        self.stats = LeafStats()

    def reset(self, horizon=None, seed: int = 0) -> None:
        super().reset(horizon, seed)
        self.base.reset(horizon, seed)

    def q_factors(self, s, ell, preceding):
        cands = available_controls(s, ell, self.g, preceding)
        q = evaluate_candidates(s, ell, cands, preceding, self.base, self.arrivals, self.cfg,
                                self.horizon, self.cfg.seed * 1_000_003 + self.seed, self.stats)
        return cands, q

    def agent_control(self, s, ell, preceding):
        cands = available_controls(s, ell, self.g, preceding)
        if len(cands) == 1:
            self.stats.leaf_evaluations += 1
            return cands[0]
        _, q = self.q_factors(s, ell, preceding)
        return pick_best(cands, q)

    def joint_control(self, s):
        before = self.stats.leaf_evaluations
        out = super().joint_control(s)
        self.stats.decisions += 1
        self.stats.last_decision = self.stats.leaf_evaluations - before
        return out


def rollout_policy(g: StreetGraph, base: Policy, cfg: RolloutConfig, arrivals) -> RolloutPolicy:
    return RolloutPolicy(g, base, cfg, arrivals)


def online_play_policy(g: StreetGraph, approx: Policy, cfg: RolloutConfig, arrivals) -> RolloutPolicy:
    """Rollout whose base policy (successor agents and continuation) is the trained approximator."""
    pol = RolloutPolicy(g, approx, cfg, arrivals)
    pol.name = "online-play"
    return pol
