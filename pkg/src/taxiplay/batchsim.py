"""Vectorized simulation of many trajectories from a common root state.

Rows are independent copies of the fleet. Requests live in fixed slots:
the root's outstanding list first (in arrival order), then one block of
``width`` slots per future minute. A slot is *visible* once its arrival
minute has come and it has not been picked up, so slot order is arrival order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import MOVE, PICKUP, STAY, Control, SystemState, as_arrays
from .graph import StreetGraph

K_MOVE, K_STAY, K_PICKUP = 0, 1, 2
_KIND_CODE = {MOVE: K_MOVE, STAY: K_STAY, PICKUP: K_PICKUP}
NEVER = np.iinfo(np.int64).max // 4


@dataclass
class Batch:
    g: StreetGraph
    minute: int
    loc: np.ndarray      # [K, m]
    timer: np.ndarray    # [K, m]
    target: np.ndarray   # [K, m], -1 when free
    pick: np.ndarray     # [K, R]
    drop: np.ndarray     # [K, R]
    arr: np.ndarray      # [K, R] arrival minute, NEVER for padding
    alive: np.ndarray    # [K, R] not yet picked up

    @property
    def rows(self) -> int:
        return self.loc.shape[0]

    @property
    def m(self) -> int:
        return self.loc.shape[1]

    def visible(self) -> np.ndarray:
        return self.alive & (self.arr <= self.minute)

    def outstanding(self) -> np.ndarray:
        return self.visible().sum(axis=1)


def build(s: SystemState, g: StreetGraph, rows: int, future=None) -> Batch:
    """Copy ``s`` into ``rows`` rows; ``future`` = (counts[rows,T], pu[rows,T,W], do[rows,T,W])
    for minutes ``s.minute+1 .. s.minute+T``."""
    loc, timer, target = as_arrays(s)
    root = sorted(s.outstanding, key=lambda r: r.arrival)
    r0 = len(root)
    base_pick = np.array([r.pickup for r in root], dtype=np.int64)
    base_drop = np.array([r.dropoff for r in root], dtype=np.int64)
    base_arr = np.array([r.arrival for r in root], dtype=np.int64)
    if future is None:
        counts = np.zeros((rows, 0), dtype=np.int64)
        pu = do = np.zeros((rows, 0, 0), dtype=np.int64)
    else:
        counts, pu, do = future
    t, w = pu.shape[1], pu.shape[2]
    r = r0 + t * w
    pick = np.zeros((rows, r), dtype=np.int64)
    drop = np.zeros((rows, r), dtype=np.int64)
    arr = np.full((rows, r), NEVER, dtype=np.int64)
    alive = np.zeros((rows, r), dtype=bool)
    pick[:, :r0], drop[:, :r0], arr[:, :r0], alive[:, :r0] = base_pick, base_drop, base_arr, True
    if t and w:
        pick[:, r0:] = pu.reshape(rows, -1)
        drop[:, r0:] = do.reshape(rows, -1)
        minutes = s.minute + 1 + np.repeat(np.arange(t), w)
        used = (np.arange(w)[None, None, :] < counts[:, :, None]).reshape(rows, -1)
        arr[:, r0:] = np.where(used, minutes[None, :], NEVER)
        alive[:, r0:] = used
    return Batch(g, s.minute, np.tile(loc, (rows, 1)), np.tile(timer, (rows, 1)),
                 np.tile(target, (rows, 1)), pick, drop, arr, alive)


def encode_controls(controls) -> tuple[np.ndarray, np.ndarray]:
    kind = np.array([_KIND_CODE[u.kind] for u in controls], dtype=np.int64)
    tgt = np.array([-1 if u.target is None else u.target for u in controls], dtype=np.int64)
    return kind, tgt


def decode_control(kind: int, tgt: int) -> Control:
    if kind == K_PICKUP:
        return Control(PICKUP)
    if kind == K_STAY:
        return Control(STAY)
    return Control(MOVE, int(tgt))


def oldest_at(b: Batch, nodes: np.ndarray, avail: np.ndarray) -> np.ndarray:
    """First available slot whose pickup is at ``nodes[row]``; -1 if none."""
    if avail.shape[1] == 0:
        return np.full(len(nodes), -1, dtype=np.int64)
    hit = avail & (b.pick == nodes[:, None])
    slot = hit.argmax(axis=1)
    return np.where(hit.any(axis=1), slot, -1)


def step(b: Batch, kind: np.ndarray, tgt: np.ndarray) -> np.ndarray:
    """Apply controls ``kind/tgt [K, m]`` in place; returns post-control outstanding counts
    and advances the minute."""
    g = b.g
    rows = np.arange(b.rows)
    busy = b.timer > 0
    avail = b.visible()
    for ell in range(b.m):
        want = (kind[:, ell] == K_PICKUP) & ~busy[:, ell]
        if not want.any():
            continue
        slot = oldest_at(b, b.loc[:, ell], avail)
        if (want & (slot < 0)).any():
            raise ValueError(f"infeasible pickup for agent {ell} in batch at minute {b.minute}")
        r = rows[want]
        s = slot[want]
        avail[r, s] = False
        b.alive[r, s] = False
        b.target[r, ell] = b.drop[r, s]
        b.timer[r, ell] = g.dist[b.pick[r, s], b.drop[r, s]]
    # busy agents advance one hop
    if busy.any():
        hop = g.next_hop[b.loc, np.where(busy, b.target, b.loc)]
        b.loc = np.where(busy, hop, b.loc)
        b.timer = np.where(busy, b.timer - 1, b.timer)
        b.target = np.where(busy & (b.timer == 0), -1, b.target)
    moving = (kind == K_MOVE) & ~busy
    b.loc = np.where(moving, tgt, b.loc)
    cost = avail.sum(axis=1)
    b.minute += 1
    return cost


# --- batched greedy -------------------------------------------------------------

def greedy_agent(b: Batch, ell: int, avail: np.ndarray, claim: bool = True):
    """Greedy control of agent ``ell`` for all rows given unclaimed visible slots ``avail``.

    Pickups claim their slot in ``avail`` (in place) when ``claim`` is set.
    Nearest request by hop distance; ties by arrival, then pickup node.
    """
    g = b.g
    k = b.rows
    rows = np.arange(k)
    loc = b.loc[:, ell]
    busy = b.timer[:, ell] > 0
    kind = np.full(k, K_STAY, dtype=np.int64)
    tgt = np.full(k, -1, dtype=np.int64)
    if busy.any():
        kind[busy] = K_MOVE
        tgt[busy] = g.next_hop[loc[busy], b.target[busy, ell]]
    free = ~busy
    here = oldest_at(b, loc, avail)
    pk = free & (here >= 0)
    kind[pk] = K_PICKUP
    if claim and pk.any():
        avail[rows[pk], here[pk]] = False
    rest = free & ~pk & avail.any(axis=1)
    if rest.any():
        r = rows[rest]
        av = avail[r]
        pick = b.pick[r]
        n = g.n
        d = np.take(g.dist, loc[r, None] * n + pick)
        arr = np.where(av, b.arr[r], 0)
        key = (d * (arr.max(initial=0) + 2) + arr) * n + pick
        best = np.where(av, key, NEVER).argmin(axis=1)
        kind[r] = K_MOVE
        tgt[r] = g.next_hop[loc[r], pick[np.arange(r.size), best]]
    return kind, tgt


def greedy_controls(b: Batch, kind=None, tgt=None, start: int = 0):
    """Greedy for agents ``start..m-1`` given fixed controls of agents before ``start``."""
    avail = b.visible()
    if kind is None:
        kind = np.full((b.rows, b.m), K_STAY, dtype=np.int64)
        tgt = np.full((b.rows, b.m), -1, dtype=np.int64)
    else:
        kind, tgt = kind.copy(), tgt.copy()
    _claim_prefix(b, kind, avail, start)
    for ell in range(start, b.m):
        kind[:, ell], tgt[:, ell] = greedy_agent(b, ell, avail)
    return kind, tgt


def _claim_prefix(b: Batch, kind: np.ndarray, avail: np.ndarray, upto: int) -> None:
    rows = np.arange(b.rows)
    for ell in range(upto):
        pk = (kind[:, ell] == K_PICKUP) & (b.timer[:, ell] == 0)
        if pk.any():
            slot = oldest_at(b, b.loc[:, ell], avail)
            avail[rows[pk], slot[pk]] = False


class GreedyBatchPolicy:
    def controls(self, b: Batch):
        return greedy_controls(b)
