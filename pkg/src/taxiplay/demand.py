"""Categorical demand models: estimation from request logs, sampling, text serialization."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

from .dynamics import Request

DEFAULT_MAX_COUNT = 6
MAX_RESAMPLE = 100


class DemandError(ValueError):
    pass


def minute_rng(seed: int, minute: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(minute)])


@dataclass(frozen=True, eq=False)
class CategoricalDistribution:
    support: tuple
    probs: np.ndarray

    def __post_init__(self):
        support = tuple(int(a) for a in self.support)
        probs = np.asarray(self.probs, dtype=float)
        if not support:
            raise DemandError("empty support")
        if len(support) != len(probs):
            raise DemandError(f"support has {len(support)} atoms but {len(probs)} probabilities")
        if any(b <= a for a, b in zip(support, support[1:])):
            raise DemandError("support atoms must be distinct and sorted")
        if (probs < 0).any() or not np.isfinite(probs).all():
            raise DemandError("probabilities must be finite and nonnegative")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise DemandError(f"probabilities sum to {probs.sum():.12g}, not 1")
        probs = probs.copy()
        probs.setflags(write=False)
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "probs", probs)

    def __eq__(self, other):
        return (isinstance(other, CategoricalDistribution) and self.support == other.support
                and np.array_equal(self.probs, other.probs))

    def __len__(self):
        return len(self.support)

    def prob(self, atom: int) -> float:
        try:
            return float(self.probs[self.support.index(atom)])
        except ValueError:
            return 0.0

    def mean(self) -> float:
        return float(np.dot(self.support, self.probs))

    def sample(self, rng: np.random.Generator, size=None):
        idx = rng.choice(len(self.support), size=size, p=self.probs)
        return np.asarray(self.support)[idx]

    @classmethod
    def from_counts(cls, counts: dict) -> "CategoricalDistribution":
        atoms = sorted(counts)
        total = sum(counts.values())
        return cls(tuple(atoms), np.array([counts[a] for a in atoms], dtype=float) / total)


@dataclass(frozen=True, eq=False)
class DemandModel:
    eta: CategoricalDistribution
    pickup: CategoricalDistribution
    dropoff: CategoricalDistribution
    label: str = ""

    def __post_init__(self):
        if self.pickup.support != self.dropoff.support:
            raise DemandError("pickup and dropoff distributions must share the node support")
        if self.eta.support[0] < 0:
            raise DemandError("request counts must be nonnegative")
        nonzero = [a for a, p in zip(self.pickup.support, self.pickup.probs) if p > 0]
        if len(set(nonzero) | {a for a, p in zip(self.dropoff.support, self.dropoff.probs) if p > 0}) < 2:
            raise DemandError("need at least two nodes with positive probability")

    @property
    def max_count(self) -> int:
        return max(a for a, p in zip(self.eta.support, self.eta.probs) if p > 0) if self.eta.probs.any() else 0

    def __eq__(self, other):
        return (isinstance(other, DemandModel) and self.label == other.label and self.eta == other.eta
                and self.pickup == other.pickup and self.dropoff == other.dropoff)

    def sample_minute(self, rng: np.random.Generator, minute: int) -> list[Request]:
        return sample_minute(self, rng, minute)

    def sample_batch(self, rng: np.random.Generator, trajectories: int, start_minute: int, minutes: int):
        """Vectorized arrivals for ``trajectories`` x ``minutes`` (the model is stationary,
        so ``start_minute`` only matters for scripted sources).

        Returns (counts[K, T], pickups[K, T, B], dropoffs[K, T, B]) where slots
        beyond counts are padding.
        """
        b = max(self.max_count, 1)
        counts = self.eta.sample(rng, size=(trajectories, minutes)).astype(np.int64)
        nodes = np.asarray(self.pickup.support)
        pu = nodes[rng.choice(len(nodes), size=(trajectories, minutes, b), p=self.pickup.probs)]
        do = nodes[rng.choice(len(nodes), size=(trajectories, minutes, b), p=self.dropoff.probs)]
        clash = pu == do
        for _ in range(MAX_RESAMPLE):
            if not clash.any():
                break
            do[clash] = nodes[rng.choice(len(nodes), size=int(clash.sum()), p=self.dropoff.probs)]
            clash = pu == do
        else:
            raise DemandError("could not draw a dropoff different from the pickup")
        return counts, pu, do


def sample_minute(dm: DemandModel, rng: np.random.Generator, minute: int) -> list[Request]:
    count = int(dm.eta.sample(rng))
    out = []
    for _ in range(count):
        rho = int(dm.pickup.sample(rng))
        for _ in range(MAX_RESAMPLE):
            delta = int(dm.dropoff.sample(rng))
            if delta != rho:
                break
        else:
            raise DemandError(f"could not draw a dropoff different from pickup {rho}")
        out.append(Request(rho, delta, minute))
    return out


class ScriptedArrivals:
    """Fixed per-minute request lists; stands in for a DemandModel in simulation."""

    deterministic = True

    def __init__(self, by_minute: dict):
        self.by_minute = {int(k): tuple(v) for k, v in by_minute.items()}

    @classmethod
    def from_requests(cls, requests: Iterable[Request]) -> "ScriptedArrivals":
        by = {}
        for r in requests:
            by.setdefault(r.arrival, []).append(r)
        return cls(by)

    @property
    def max_count(self) -> int:
        return max((len(v) for v in self.by_minute.values()), default=0)

    def requests(self) -> list[Request]:
        return [r for k in sorted(self.by_minute) for r in self.by_minute[k]]

    def sample_minute(self, rng, minute: int) -> list[Request]:
        return list(self.by_minute.get(minute, ()))

    def sample_batch(self, rng, trajectories: int, start_minute: int, minutes: int):
        w = max(self.max_count, 1)
        counts = np.zeros((trajectories, minutes), dtype=np.int64)
        pu = np.zeros((trajectories, minutes, w), dtype=np.int64)
        do = np.ones((trajectories, minutes, w), dtype=np.int64)
        for t in range(minutes):
            reqs = self.by_minute.get(start_minute + t, ())
            counts[:, t] = len(reqs)
            for j, r in enumerate(reqs):
                pu[:, t, j], do[:, t, j] = r.pickup, r.dropoff
        return counts, pu, do


# Per-minute request-count distributions for three demand levels (counts 0..6).
TABLE_ETA = {
    "low": (0.95, 0.05, 0, 0, 0, 0, 0),
    "medium": (0.85, 0.15, 0, 0, 0, 0, 0),
    "high": (0.82, 0.06, 0.06, 0.02, 0.02, 0, 0.02),
}


def eta_distribution(probs: Sequence[float]) -> CategoricalDistribution:
    return CategoricalDistribution(tuple(range(len(probs))), np.asarray(probs, dtype=float))


def uniform_nodes(n: int) -> CategoricalDistribution:
    return CategoricalDistribution(tuple(range(n)), np.full(n, 1.0 / n))


def table_model(label: str, n: int, pickup=None, dropoff=None) -> DemandModel:
    """One of the three reference demand levels with uniform (or given) locations."""
    return DemandModel(eta_distribution(TABLE_ETA[label]), pickup or uniform_nodes(n),
                       dropoff or uniform_nodes(n), label)


# --- request logs -----------------------------------------------------------

@dataclass
class RequestLog:
    entries: list  # (minute, pickup, dropoff)

    def __post_init__(self):
        self.entries = sorted((int(k), int(p), int(d)) for k, p, d in self.entries)
        for k, _, _ in self.entries:
            if k < 1:
                raise DemandError(f"request minute {k} < 1")

    def __len__(self):
        return len(self.entries)

    def window(self, start: int, length: int) -> "RequestLog":
        """Entries in minutes start..start+length-1, rebased to 1..length."""
        return RequestLog([(k - start + 1, p, d) for k, p, d in self.entries if start <= k < start + length])

    @classmethod
    def from_requests(cls, requests: Iterable[Request]) -> "RequestLog":
        return cls([(r.arrival, r.pickup, r.dropoff) for r in requests])


def load_request_log(stream: TextIO) -> RequestLog:
    entries = []
    for lineno, row in enumerate(csv.reader(stream), 1):
        if not row or row[0].strip().startswith("#"):
            continue
        if len(row) != 3:
            raise DemandError(f"line {lineno}: expected minute,pickup,dropoff")
        try:
            entries.append(tuple(int(x) for x in row))
        except ValueError:
            if lineno == 1:
                continue  # header
            raise DemandError(f"line {lineno}: non-integer field in {row}") from None
    return RequestLog(entries)


def save_request_log(log: RequestLog, stream: TextIO) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(("minute", "pickup", "dropoff"))
    w.writerows(log.entries)


def estimate_eta(log: RequestLog, horizon_minutes: int, max_count: int = DEFAULT_MAX_COUNT) -> CategoricalDistribution:
    if horizon_minutes < 1:
        raise DemandError("horizon must be at least one minute")
    per_minute = np.zeros(horizon_minutes + 1, dtype=np.int64)
    for k, _, _ in log.entries:
        if k > horizon_minutes:
            raise DemandError(f"log entry at minute {k} beyond horizon {horizon_minutes}")
        per_minute[k] += 1
    per_minute = per_minute[1:]
    if per_minute.max(initial=0) > max_count:
        k = int(np.argmax(per_minute > max_count)) + 1
        raise DemandError(f"minute {k} has {per_minute[k - 1]} arrivals, more than max_count={max_count}")
    hist = np.bincount(per_minute, minlength=max_count + 1)
    return CategoricalDistribution(tuple(range(max_count + 1)), hist / horizon_minutes)


def estimate_location_dist(log: RequestLog, n: int, which: str) -> CategoricalDistribution:
    """Smoothed node frequencies: (s_y + 1/n) / (1 + sum s)."""
    col = {"pickup": 1, "dropoff": 2}[which]
    s = np.zeros(n)
    for entry in log.entries:
        y = entry[col]
        if not 0 <= y < n:
            raise DemandError(f"log references node {y} outside 0..{n - 1}")
        s[y] += 1
    return CategoricalDistribution(tuple(range(n)), (s + 1.0 / n) / (1.0 + s.sum()))


def estimate_model(log: RequestLog, n: int, horizon_minutes: int, max_count: int = DEFAULT_MAX_COUNT,
                   label: str = "") -> DemandModel:
    return DemandModel(estimate_eta(log, horizon_minutes, max_count),
                       estimate_location_dist(log, n, "pickup"),
                       estimate_location_dist(log, n, "dropoff"), label)


# --- model files --------------------------------------------------------------

_SECTIONS = ("ETA", "PICKUP", "DROPOFF")


def save_model(dm: DemandModel, stream: TextIO) -> None:
    stream.write(f"LABEL {dm.label}\n")
    for name, dist in zip(_SECTIONS, (dm.eta, dm.pickup, dm.dropoff)):
        stream.write(f"{name}\n")
        for a, p in zip(dist.support, dist.probs):
            stream.write(f"{a} {float(p)!r}\n")


def load_model(stream: TextIO) -> DemandModel:
    label = ""
    sections: dict = {}
    current = None
    for lineno, raw in enumerate(stream, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("LABEL"):
            label = line[5:].strip()
        elif line in _SECTIONS:
            current = sections.setdefault(line, [])
        else:
            if current is None:
                raise DemandError(f"line {lineno}: data before any section header")
            parts = line.split()
            if len(parts) != 2:
                raise DemandError(f"line {lineno}: expected 'atom probability'")
            try:
                current.append((int(parts[0]), float(parts[1])))
            except ValueError:
                raise DemandError(f"line {lineno}: malformed entry {line!r}") from None
    missing = [s for s in _SECTIONS if not sections.get(s)]
    if missing:
        raise DemandError(f"missing or empty sections: {', '.join(missing)}")
    dists = [CategoricalDistribution(tuple(a for a, _ in sections[s]), np.array([p for _, p in sections[s]]))
             for s in _SECTIONS]
    return DemandModel(*dists, label=label)


def model_to_text(dm: DemandModel) -> str:
    buf = io.StringIO()
    save_model(dm, buf)
    return buf.getvalue()
