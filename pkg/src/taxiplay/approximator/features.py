"""Node/global feature encoding of a fleet state from one agent's point of view.

Node features (n x (m + 2)): one presence column per agent, a flag for nodes
that another agent is about to move to, and the number of waiting requests.
Global features (m): remaining trip minutes of every agent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import batchsim
from ..dynamics import Control, SystemState
from ..graph import StreetGraph


@dataclass(frozen=True, eq=False)
class FeatureEncoding:
    node_features: np.ndarray    # [n, m + 2]
    global_features: np.ndarray  # [m]
    agent_node: int


def encode_batch(b: batchsim.Batch, ell: int, kind: np.ndarray, tgt: np.ndarray):
    """Features for agent ``ell`` in every row; ``kind/tgt`` hold the other agents' tentative controls."""
    k, m, n = b.rows, b.m, b.g.n
    rows = np.arange(k)
    x = np.zeros((k, n, m + 2))
    for j in range(m):
        x[rows, b.loc[:, j], j] = 1.0
        if j != ell:
            mv = kind[:, j] == batchsim.K_MOVE
            x[rows[mv], tgt[mv, j], m] = 1.0
    vis = b.visible()
    if vis.shape[1]:
        flat = (rows[:, None] * n + b.pick)[vis]
        x[:, :, m + 1] = np.bincount(flat, minlength=k * n).reshape(k, n)
    return x, b.loc[:, ell].copy(), b.timer.astype(float)


def encode(s: SystemState, ell: int, others: Sequence[Control], g: StreetGraph) -> FeatureEncoding:
    """``others[j]`` is agent j's tentative control (entry ``ell`` is ignored)."""
    b = batchsim.build(s, g, 1)
    kind, tgt = batchsim.encode_controls(others)
    x, a, tau = encode_batch(b, ell, kind[None, :], tgt[None, :])
    return FeatureEncoding(x[0], tau[0], int(a[0]))


def move_mask(g: StreetGraph) -> np.ndarray:
    """Row v marks the nodes reachable in one control from v: its neighbors and v itself."""
    mask = np.eye(g.n, dtype=bool)
    for i, j in g.edges:
        mask[i, j] = True
    return mask
