"""Trained two-network policy approximation and its weight-file format."""

from __future__ import annotations

import hashlib
import json
from typing import BinaryIO, Sequence

import numpy as np

from .. import batchsim
from ..dynamics import Control, SystemState
from ..graph import StreetGraph
from ..policies import Policy
from .features import encode_batch, move_mask
from .gcn import GraphConvNet

WEIGHTS_MAGIC = "taxiplay-weights"
WEIGHTS_VERSION = 1


class WeightsError(ValueError):
    pass


def decide_batch(pickup_net: GraphConvNet, move_net: GraphConvNet, mask: np.ndarray, b: batchsim.Batch,
                 kind: np.ndarray, tgt: np.ndarray, start: int = 0, stop: int | None = None,
                 counter: dict | None = None):
    """Fill in approximator controls for agents ``start..stop-1`` (in order) in every row.

    Agents before ``start`` keep their controls in ``kind/tgt``. For the features of
    agent ``ell`` the agents after it use greedy controls.
    """
    stop = b.m if stop is None else stop
    kind, tgt = kind.copy(), tgt.copy()
    rows = np.arange(b.rows)
    for ell in range(start, stop):
        # greedy completion from ell onward supplies the successors' tentative controls
        gk, gt = batchsim.greedy_controls(b, kind, tgt, start=ell)
        avail = b.visible()
        batchsim._claim_prefix(b, kind, avail, ell)
        busy = b.timer[:, ell] > 0
        loc = b.loc[:, ell]
        ck = np.full(b.rows, batchsim.K_STAY, dtype=np.int64)
        ct = np.full(b.rows, -1, dtype=np.int64)
        if busy.any():
            ck[busy] = batchsim.K_MOVE
            ct[busy] = b.g.next_hop[loc[busy], b.target[busy, ell]]
        free = rows[~busy]
        if free.size:
            sub = batchsim.Batch(b.g, b.minute, b.loc[free], b.timer[free], b.target[free], b.pick[free],
                                 b.drop[free], b.arr[free], b.alive[free])
            x, a, tau = encode_batch(sub, ell, gk[free], gt[free])
            can_pick = batchsim.oldest_at(sub, a, avail[free]) >= 0
            take = np.zeros(free.size, dtype=bool)
            if can_pick.any():
                idx = np.flatnonzero(can_pick)
                pl = pickup_net.forward(x[idx], a[idx], tau[idx])
                take[idx] = pl[:, 1] > pl[:, 0]
                if counter is not None:
                    counter["pickup"] = counter.get("pickup", 0) + idx.size
            mv = np.flatnonzero(~take)
            if mv.size:
                cand, ok = candidate_nodes(mask)
                nodes = cand[a[mv]]
                ml = move_net.forward(x[mv], a[mv], tau[mv], nodes=nodes)
                ml = np.where(ok[a[mv]], ml, -np.inf)
                dest = nodes[np.arange(mv.size), ml.argmax(axis=1)]
                ck[free[mv]] = np.where(dest == a[mv], batchsim.K_STAY, batchsim.K_MOVE)
                ct[free[mv]] = np.where(dest == a[mv], -1, dest)
                if counter is not None:
                    counter["move"] = counter.get("move", 0) + mv.size
            ck[free[take]] = batchsim.K_PICKUP
        kind[:, ell], tgt[:, ell] = ck, ct
    return kind, tgt


def candidate_nodes(mask: np.ndarray):
    """Per node, its allowed destinations in increasing order, padded; plus a validity mask."""
    width = int(mask.sum(axis=1).max())
    cand = np.zeros((mask.shape[0], width), dtype=np.int64)
    ok = np.zeros((mask.shape[0], width), dtype=bool)
    for v in range(mask.shape[0]):
        nodes = np.flatnonzero(mask[v])
        cand[v, :nodes.size] = nodes
        cand[v, nodes.size:] = nodes[0]
        ok[v, :nodes.size] = True
    return cand, ok


class ApproximatorBatchPolicy:
    def __init__(self, ap: "ApproximatorPolicy"):
        self.ap = ap

    def controls(self, b: batchsim.Batch):
        kind = np.full((b.rows, b.m), batchsim.K_STAY, dtype=np.int64)
        tgt = np.full((b.rows, b.m), -1, dtype=np.int64)
        return decide_batch(self.ap.pickup_net, self.ap.move_net, self.ap.mask, b, kind, tgt,
                            counter=self.ap.counter)


class ApproximatorPolicy(Policy):
    """Pickup net decides first; otherwise the masked argmax of the move net.

    A pickup is only considered when a request actually waits at the agent's node;
    busy agents take their forced move without touching the networks.
    """

    name = "gnn"

    def __init__(self, g: StreetGraph, pickup_net: GraphConvNet, move_net: GraphConvNet, label: str = ""):
        super().__init__(g)
        n = g.n
        for net in (pickup_net, move_net):
            if net.a_hat.shape != (n, n):
                raise WeightsError(f"network built for {net.a_hat.shape[0]} nodes, graph has {n}")
        self.pickup_net = pickup_net
        self.move_net = move_net
        self.label = label
        self.mask = move_mask(g)
        self.counter: dict = {}

    @property
    def n_agents(self) -> int:
        return self.pickup_net.n_agents

    def agent_control(self, s: SystemState, ell: int, preceding: Sequence[Control]) -> Control:
        if s.m != self.n_agents:
            raise ValueError(f"approximator trained for {self.n_agents} agents, state has {s.m}")
        b = batchsim.build(s, self.g, 1)
        kind = np.full((1, s.m), batchsim.K_STAY, dtype=np.int64)
        tgt = np.full((1, s.m), -1, dtype=np.int64)
        if preceding:
            pk, pt = batchsim.encode_controls(preceding)
            kind[0, :ell], tgt[0, :ell] = pk[:ell], pt[:ell]
        kind, tgt = decide_batch(self.pickup_net, self.move_net, self.mask, b, kind, tgt,
                                 start=ell, stop=ell + 1, counter=self.counter)
        return batchsim.decode_control(int(kind[0, ell]), int(tgt[0, ell]))

    def batch_policy(self):
        return ApproximatorBatchPolicy(self)


# --- weight files ---------------------------------------------------------------

def graph_digest(g: StreetGraph) -> str:
    return hashlib.sha256(repr(sorted(g.edges)).encode()).hexdigest()[:16]


def save_weights(ap: ApproximatorPolicy, stream: BinaryIO) -> None:
    """One JSON header line, then all parameters as little-endian float64."""
    header = {
        "format": WEIGHTS_MAGIC, "version": WEIGHTS_VERSION, "nodes": ap.g.n, "agents": ap.n_agents,
        "graph": graph_digest(ap.g), "label": ap.label, "hidden": ap.pickup_net.hidden,
        "pickup": [[k, list(s)] for k, s in ap.pickup_net.layer_shapes()],
        "move": [[k, list(s)] for k, s in ap.move_net.layer_shapes()],
    }
    stream.write((json.dumps(header) + "\n").encode())
    flat = np.concatenate([ap.pickup_net.flat(), ap.move_net.flat()]).astype("<f8")
    stream.write(flat.tobytes())


def load_weights(stream: BinaryIO, g: StreetGraph) -> ApproximatorPolicy:
    line = stream.readline()
    try:
        header = json.loads(line.decode())
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise WeightsError("not a weights file (bad header)") from None
    if header.get("format") != WEIGHTS_MAGIC:
        raise WeightsError("not a weights file")
    if header.get("version") != WEIGHTS_VERSION:
        raise WeightsError(f"unsupported weights version {header.get('version')}")
    if header["nodes"] != g.n or header["graph"] != graph_digest(g):
        raise WeightsError(f"weights were trained on a different graph ({header['nodes']} nodes)")
    adj = g.adjacency_matrix()
    nets = [GraphConvNet.build(k, adj, header["agents"], hidden=header["hidden"]) for k in ("pickup", "move")]
    for net in nets:
        if [[k, list(s)] for k, s in net.layer_shapes()] != header[net.kind]:
            raise WeightsError(f"{net.kind} layer shapes do not match the header")
    flat = np.frombuffer(stream.read(), dtype="<f8")
    split = nets[0].param_count()
    if flat.size != split + nets[1].param_count():
        raise WeightsError(f"expected {split + nets[1].param_count()} parameters, found {flat.size}")
    nets[0].set_flat(flat[:split])
    nets[1].set_flat(flat[split:])
    return ApproximatorPolicy(g, nets[0], nets[1], header.get("label", ""))
