"""Graph-convolution policy networks with hand-written reverse-mode gradients.

Both networks take a batch of node-feature tensors ``X[B, n, F]``, the index of
the deciding agent's node ``a[B]`` and the timer vector ``tau[B, m]``.

* pickup net: 3 conv layers, then the agent-node embedding concatenated with
  ``tau`` goes through 3 dense layers to 2 logits (no-pickup, pickup).
* move net: 2 conv layers, then for every node ``i`` the vector
  ``[h_i, h_agent, tau]`` goes through 4 weight-shared dense layers to one
  logit, giving ``n`` logits.

Convolution is ``relu(A_hat @ H @ W + b)`` with
``A_hat = D^-1/2 (A + I) D^-1/2`` built from out-degrees.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HIDDEN = 32


def normalized_adjacency(adj: np.ndarray) -> np.ndarray:
    a = adj + np.eye(adj.shape[0])
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return d[:, None] * a * d[None, :]


_TINY = np.finfo(float).tiny


def flush_subnormal(a: np.ndarray) -> np.ndarray:
    """Zero out subnormal entries in place; they make matmuls orders of magnitude slower."""
    a[np.abs(a) < _TINY] = 0.0
    return a


def _init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class GraphConvNet:
    """Shared machinery: parameter dict, conv stack, dense stack."""

    kind: str  # "pickup" | "move"
    a_hat: np.ndarray
    n_features: int
    n_agents: int
    params: dict = field(default_factory=dict)
    hidden: int = HIDDEN

    @classmethod
    def build(cls, kind: str, adj: np.ndarray, n_agents: int, seed: int = 0, hidden: int = HIDDEN):
        rng = np.random.default_rng(seed)
        net = cls(kind, normalized_adjacency(adj), n_agents + 2, n_agents, {}, hidden)
        for name, shape in net.layer_shapes():
            fan_in = shape[0] if name.startswith("W") else None
            if fan_in is not None:
                net.params[name] = _init(rng, fan_in, shape)
            else:
                net.params[name] = np.zeros(shape)
        return net

    @property
    def n_conv(self) -> int:
        return 3 if self.kind == "pickup" else 2

    @property
    def n_dense(self) -> int:
        return 3 if self.kind == "pickup" else 4

    def layer_shapes(self) -> list:
        h, m = self.hidden, self.n_agents
        shapes = []
        f_in = self.n_features
        for i in range(self.n_conv):
            shapes += [(f"Wc{i}", (f_in, h)), (f"bc{i}", (h,))]
            f_in = h
        f_in = h + m if self.kind == "pickup" else 2 * h + m
        out = 2 if self.kind == "pickup" else 1
        for i in range(self.n_dense):
            f_out = out if i == self.n_dense - 1 else h
            shapes += [(f"Wd{i}", (f_in, f_out)), (f"bd{i}", (f_out,))]
            f_in = f_out
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layer_shapes())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k, _ in self.layer_shapes()])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.param_count():
            raise ValueError(f"expected {self.param_count()} parameters, got {vec.size}")
        pos = 0
        for k, s in self.layer_shapes():
            size = int(np.prod(s))
            self.params[k] = flush_subnormal(vec[pos:pos + size].reshape(s).copy())
            pos += size

    # -- forward / backward ------------------------------------------------

    def conv_stack(self, x: np.ndarray):
        caches = []
        h = x
        for i in range(self.n_conv):
            p = np.matmul(self.a_hat, h)
            z = p @ self.params[f"Wc{i}"] + self.params[f"bc{i}"]
            caches.append((p, z))
            h = np.maximum(z, 0.0)
        return h, caches

    def forward(self, x: np.ndarray, agent_node: np.ndarray, tau: np.ndarray, keep: bool = False,
                nodes: np.ndarray | None = None):
        """Logits ``[B, 2]`` (pickup) or ``[B, n]`` (move).

        For the move net ``nodes [B, K]`` restricts the per-node readout to those nodes
        and returns ``[B, K]`` logits (inference only).
        """
        x = np.asarray(x, dtype=float)
        if x.ndim != 3 or x.shape[1:] != (self.a_hat.shape[0], self.n_features):
            raise ValueError(f"feature shape {x.shape} does not match net built for "
                             f"n={self.a_hat.shape[0]}, features={self.n_features}")
        b = x.shape[0]
        rows = np.arange(b)
        h, conv_caches = self.conv_stack(x)
        if nodes is not None:
            if keep or self.kind != "move":
                raise ValueError("node restriction is only available for move-net inference")
            h_agent = h[rows, agent_node]
        tau = np.asarray(tau, dtype=float)
        if self.kind == "pickup":
            z = np.concatenate([h[rows, agent_node], tau], axis=1)
        else:
            if nodes is not None:
                h = h[rows[:, None], nodes]
            n = h.shape[1]
            ha = np.broadcast_to(h_agent[:, None, :], h.shape) if nodes is not None else \
                np.broadcast_to(h[rows, agent_node][:, None, :], h.shape)
            tb = np.broadcast_to(tau[:, None, :], (b, n, tau.shape[1]))
            z = np.concatenate([h, ha, tb], axis=2)
        dense_caches = []
        for i in range(self.n_dense):
            pre = z @ self.params[f"Wd{i}"] + self.params[f"bd{i}"]
            dense_caches.append((z, pre))
            z = np.maximum(pre, 0.0) if i < self.n_dense - 1 else pre
        logits = z if self.kind == "pickup" else z[..., 0]
        if keep:
            return logits, (x, agent_node, tau, h, conv_caches, dense_caches)
        return logits

    def backward(self, dlogits: np.ndarray, cache) -> dict:
        x, agent_node, tau, h, conv_caches, dense_caches = cache
        grads = {}
        b = x.shape[0]
        rows = np.arange(b)
        dz = dlogits if self.kind == "pickup" else dlogits[..., None]
        for i in reversed(range(self.n_dense)):
            zin, pre = dense_caches[i]
            if i < self.n_dense - 1:
                dz = dz * (pre > 0)
            flat_in = zin.reshape(-1, zin.shape[-1])
            flat_dz = dz.reshape(-1, dz.shape[-1])
            grads[f"Wd{i}"] = flat_in.T @ flat_dz
            grads[f"bd{i}"] = flat_dz.sum(axis=0)
            dz = dz @ self.params[f"Wd{i}"].T
        hid = h.shape[-1]
        dh = np.zeros_like(h)
        if self.kind == "pickup":
            np.add.at(dh, (rows, agent_node), dz[:, :hid])
        else:
            dh += dz[..., :hid]
            np.add.at(dh, (rows, agent_node), dz[..., hid:2 * hid].sum(axis=1))
        for i in reversed(range(self.n_conv)):
            p, z = conv_caches[i]
            dzc = dh * (z > 0)
            grads[f"Wc{i}"] = p.reshape(-1, p.shape[-1]).T @ dzc.reshape(-1, dzc.shape[-1])
            grads[f"bc{i}"] = dzc.sum(axis=(0, 1))
            dp = dzc @ self.params[f"Wc{i}"].T
            dh = np.matmul(self.a_hat.T, dp)
        return grads


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    top = logits.max(axis=-1, keepdims=True)
    shifted = logits - top
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray | None = None):
    """Mean cross-entropy and its gradient w.r.t. logits (masked entries get zero)."""
    logp = masked_log_softmax(logits, mask)
    b = logits.shape[0]
    rows = np.arange(b)
    chosen = logp[rows, labels]
    if not np.isfinite(chosen).all():
        raise ValueError("label falls outside the feasibility mask")
    loss = -chosen.mean()
    prob = np.exp(logp)
    grad = prob
    grad[rows, labels] -= 1.0
    return loss, grad / b


def l2_penalty(net: GraphConvNet, factor: float):
    loss = 0.0
    grads = {}
    for k, v in net.params.items():
        if k.startswith("W"):
            loss += 0.5 * factor * float((v * v).sum())
            grads[k] = factor * v
    return loss, grads


def loss_and_grads(net: GraphConvNet, x, agent_node, tau, labels, mask=None, l2: float = 0.0):
    logits, cache = net.forward(x, agent_node, tau, keep=True)
    loss, dlogits = cross_entropy(logits, labels, mask)
    grads = net.backward(dlogits, cache)
    if l2:
        reg, rgrads = l2_penalty(net, l2)
        loss += reg
        for k, g in rgrads.items():
            grads[k] = grads[k] + g
    return loss, grads


class Adam:
    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            flush_subnormal(params[k])
            flush_subnormal(self.m[k])
            flush_subnormal(self.v[k])
