"""Rollout-labelled training data and supervised training of the two networks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .. import batchsim
from ..dynamics import PICKUP, STAY, add_arrivals, initial_state, transition
from ..demand import minute_rng
from ..graph import StreetGraph
from ..policies import GreedyPolicy, RolloutConfig, RolloutPolicy, claimed_requests
from .features import encode_batch, move_mask
from .gcn import Adam, GraphConvNet, loss_and_grads
from .policy import ApproximatorPolicy

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainingSet:
    x: np.ndarray            # [S, n, m + 2]
    agent_node: np.ndarray   # [S]
    tau: np.ndarray          # [S, m]
    agent: np.ndarray        # [S] deciding agent index
    can_pickup: np.ndarray   # [S] bool
    pickup: np.ndarray       # [S] 0/1 label
    move: np.ndarray         # [S] destination node, -1 for pickup labels

    def __len__(self):
        return len(self.agent)

    def subset(self, idx) -> "TrainingSet":
        return TrainingSet(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))

    def save(self, path) -> None:
        np.savez_compressed(path, **{f: getattr(self, f) for f in self.__dataclass_fields__})

    @classmethod
    def load(cls, path) -> "TrainingSet":
        with np.load(path) as z:
            return cls(**{f: z[f] for f in cls.__dataclass_fields__})

    @classmethod
    def concat(cls, parts) -> "TrainingSet":
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in cls.__dataclass_fields__))


def state_features(s, ell, preceding, g: StreetGraph):
    """Features of agent ``ell`` with earlier agents fixed and later agents greedy."""
    b = batchsim.build(s, g, 1)
    kind = np.full((1, s.m), batchsim.K_STAY, dtype=np.int64)
    tgt = np.full((1, s.m), -1, dtype=np.int64)
    if preceding:
        pk, pt = batchsim.encode_controls(preceding)
        kind[0, :ell], tgt[0, :ell] = pk[:ell], pt[:ell]
    gk, gt = batchsim.greedy_controls(b, kind, tgt, start=ell)
    x, a, tau = encode_batch(b, ell, gk, gt)
    return x[0], int(a[0]), tau[0]


def random_state(dm, g: StreetGraph, m: int, rng: np.random.Generator, seed: int, warmup_max: int):
    """Uniform agent locations, then a random number of greedy minutes under ``dm``."""
    s = initial_state(rng.integers(0, g.n, size=m))
    s = add_arrivals(s, dm.sample_minute(minute_rng(seed, 1), 1))
    greedy = GreedyPolicy(g)
    for k in range(1, int(rng.integers(0, warmup_max + 1)) + 1):
        s = transition(s, greedy.joint_control(s), dm.sample_minute(minute_rng(seed, k + 1), k + 1), g)
    return s


def generate_training_set(dm, g: StreetGraph, cfg: RolloutConfig, count: int, m: int, seed: int = 0,
                          warmup_max: int = 20, base=None) -> TrainingSet:
    """At least ``count`` (features, rollout control) samples for free agents."""
    base = base or GreedyPolicy(g)
    xs, nodes, taus, agents, canp, pick, move = [], [], [], [], [], [], []
    i = 0
    while len(agents) < count:
        sseed = seed * 7_368_787 + i
        rng = np.random.default_rng([seed, i, 17])
        s = random_state(dm, g, m, rng, sseed, warmup_max)
        roll = RolloutPolicy(g, base, cfg, dm)
        roll.reset(horizon=None, seed=sseed)
        chosen = []
        for ell in range(m):
            u = roll.agent_control(s, ell, chosen)
            if s.timers[ell] == 0:
                x, a, tau = state_features(s, ell, chosen, g)
                xs.append(x)
                nodes.append(a)
                taus.append(tau)
                agents.append(ell)
                canp.append(_pickup_open(s, ell, chosen))
                pick.append(int(u.kind == PICKUP))
                move.append(-1 if u.kind == PICKUP else (a if u.kind == STAY else u.target))
            chosen.append(u)
        i += 1
    n = g.n
    return TrainingSet(np.array(xs).reshape(-1, n, m + 2), np.array(nodes, dtype=np.int64),
                       np.array(taus).reshape(-1, m), np.array(agents, dtype=np.int64),
                       np.array(canp, dtype=bool), np.array(pick, dtype=np.int64), np.array(move, dtype=np.int64))


def _pickup_open(s, ell, preceding) -> bool:
    taken = claimed_requests(s, preceding)
    return any(i not in taken for i in s.requests_at(s.locations[ell]))


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr_pickup: float = 0.005
    lr_move: float = 0.002
    l2: float = 1e-5
    hidden: int = 32
    seed: int = 0


@dataclass
class TrainResult:
    policy: ApproximatorPolicy
    pickup_loss: list = field(default_factory=list)
    move_loss: list = field(default_factory=list)


def fit(net: GraphConvNet, x, a, tau, labels, mask, lr: float, cfg: TrainConfig, rng) -> list:
    opt = Adam(net.params, lr)
    curve = []
    size = len(labels)
    if size == 0:
        return curve
    for epoch in range(cfg.epochs):
        order = rng.permutation(size)
        total = 0.0
        for start in range(0, size, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(net, x[idx], a[idx], tau[idx], labels[idx],
                                         None if mask is None else mask[idx], cfg.l2)
            if not np.isfinite(loss):
                raise TrainingError(f"{net.kind} net: non-finite loss at epoch {epoch}, batch at {start}")
            opt.step(net.params, grads)
            total += loss * len(idx)
        curve.append(total / size)
        log.debug("%s epoch %d loss %.5f", net.kind, epoch, curve[-1])
    return curve


def train(data: TrainingSet, g: StreetGraph, cfg: TrainConfig = TrainConfig(), label: str = "") -> TrainResult:
    if len(data) == 0:
        raise TrainingError("empty training set")
    m = data.tau.shape[1]
    adj = g.adjacency_matrix()
    pnet = GraphConvNet.build("pickup", adj, m, seed=cfg.seed, hidden=cfg.hidden)
    mnet = GraphConvNet.build("move", adj, m, seed=cfg.seed + 1, hidden=cfg.hidden)
    rng = np.random.default_rng(cfg.seed)
    p = np.flatnonzero(data.can_pickup)
    pl = fit(pnet, data.x[p], data.agent_node[p], data.tau[p], data.pickup[p], None, cfg.lr_pickup, cfg, rng)
    mv = np.flatnonzero(data.move >= 0)
    mask = move_mask(g)[data.agent_node[mv]]
    ml = fit(mnet, data.x[mv], data.agent_node[mv], data.tau[mv], data.move[mv], mask, cfg.lr_move, cfg, rng)
    return TrainResult(ApproximatorPolicy(g, pnet, mnet, label), pl, ml)


def predict(ap: ApproximatorPolicy, data: TrainingSet) -> tuple[np.ndarray, np.ndarray]:
    """(pickup decision, move destination) for every sample."""
    take = np.zeros(len(data), dtype=bool)
    p = np.flatnonzero(data.can_pickup)
    if p.size:
        lg = ap.pickup_net.forward(data.x[p], data.agent_node[p], data.tau[p])
        take[p] = lg[:, 1] > lg[:, 0]
    ml = ap.move_net.forward(data.x, data.agent_node, data.tau)
    ml = np.where(ap.mask[data.agent_node], ml, -np.inf)
    return take, ml.argmax(axis=1)


def agreement(ap: ApproximatorPolicy, data: TrainingSet) -> float:
    """Fraction of samples where the approximator reproduces the rollout control."""
    take, dest = predict(ap, data)
    want_pick = data.pickup.astype(bool)
    ok = np.where(want_pick, take, ~take & (dest == data.move))
    return float(ok.mean())
