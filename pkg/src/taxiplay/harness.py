"""Experiment orchestration: configuration, paired policy evaluation, normalization,
switching runs, trace auditing and report files."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from .ambiguity import AmbiguitySet, LibraryEntry, load_manifest, select_model, wasserstein1
from .benchmarks import (InstantaneousAssignmentPolicy, TSSPolicy, episode_requests, oracle_cost,
                         trace_orders)
from .demand import DemandModel, RequestLog, estimate_eta, load_model, table_model
from .dynamics import Trace, initial_state, run_episode
from .graph import StreetGraph, grid_graph, load_graph
from .policies import GreedyPolicy, Policy, RolloutConfig, online_play_policy, rollout_policy

log = logging.getLogger(__name__)

POLICY_NAMES = ("greedy", "rollout", "gnn", "online-play", "inst-assign", "tss", "oracle")


class ConfigError(ValueError):
    pass


# --- configuration --------------------------------------------------------------

@dataclass
class ExperimentConfig:
    graph: str = "grid:5x5"
    demand: str = "table:medium"
    policies: tuple = ("greedy", "rollout", "inst-assign", "tss", "oracle")
    horizon: int = 60
    agents: int = 3
    episodes: int = 50
    seed: int = 0
    trajectories: int = 128
    truncation: int = 5
    tss_samples: int = 100
    hungarian: bool = False
    weights: str = ""
    library: str = ""
    active: str = ""
    q: float = 0.54
    samples: int = 5000
    diameter: float = 0.0
    log_base: float = 10.0
    check_interval: int = 60
    oracle_budget: int = 2_000_000
    output: str = "results"

    def __post_init__(self):
        if isinstance(self.policies, str):
            self.policies = tuple(p.strip() for p in self.policies.split(",") if p.strip())
        unknown = [p for p in self.policies if p not in POLICY_NAMES]
        if unknown:
            raise ConfigError(f"unknown policies {unknown}; choose from {', '.join(POLICY_NAMES)}")
        if self.horizon < 1 or self.agents < 1 or self.episodes < 1:
            raise ConfigError("horizon, agents and episodes must all be at least 1")

    def rollout(self) -> RolloutConfig:
        return RolloutConfig(self.trajectories, self.truncation, self.seed)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})


def _coerce(raw: str, kind):
    if kind in (bool, "bool"):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    for caster, names in ((int, ("int",)), (float, ("float",))):
        if kind is caster or kind in names:
            return caster(raw)
    return raw


def load_config(stream: TextIO) -> ExperimentConfig:
    """``key = value`` lines; ``#`` starts a comment."""
    fields = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
    values = {}
    for lineno, line in enumerate(stream, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, raw = (x.strip() for x in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in fields:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(raw, fields[key])
        except ValueError as exc:
            raise ConfigError(f"config line {lineno}: {exc}") from None
    return ExperimentConfig(**values)


def resolve_graph(spec: str) -> StreetGraph:
    """``grid:RxC`` or a path to an edge-list file."""
    if spec.startswith("grid:"):
        r, c = spec[5:].lower().split("x")
        return grid_graph(int(r), int(c))
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"graph file {spec} does not exist")
    with path.open() as f:
        return load_graph(f)


def resolve_demand(spec: str, n: int) -> DemandModel:
    """``table:low|medium|high`` (uniform locations) or a path to a model file."""
    if spec.startswith("table:"):
        return table_model(spec[6:], n)
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"demand model file {spec} does not exist")
    with path.open() as f:
        dm = load_model(f)
    if len(dm.pickup.support) != n:
        raise ConfigError(f"demand model covers {len(dm.pickup.support)} nodes, graph has {n}")
    return dm


def load_approximator(path: str, g: StreetGraph):
    from .approximator.policy import load_weights

    if not path:
        raise ConfigError("an approximator policy was requested but no weights file is configured")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"weights file {path} does not exist")
    with p.open("rb") as f:
        return load_weights(f, g)


def make_policy(name: str, cfg: ExperimentConfig, g: StreetGraph, dm: DemandModel, approx=None) -> Policy:
    if name == "greedy":
        return GreedyPolicy(g)
    if name == "rollout":
        return rollout_policy(g, GreedyPolicy(g), cfg.rollout(), dm)
    if name in ("gnn", "online-play"):
        if approx is None:
            approx = load_approximator(cfg.weights, g)
        return approx if name == "gnn" else online_play_policy(g, approx, cfg.rollout(), dm)
    if name == "inst-assign":
        return InstantaneousAssignmentPolicy(g, cfg.hungarian)
    if name == "tss":
        return TSSPolicy(g, dm, cfg.tss_samples, cfg.seed)
    raise ConfigError(f"{name!r} is not a control policy")


# --- evaluation -----------------------------------------------------------------

def starting_states(g: StreetGraph, m: int, episodes: int, seed: int):
    """Uniform agent locations, all free, nothing outstanding."""
    rng = np.random.default_rng([int(seed), 991])
    return [initial_state(rng.integers(0, g.n, size=m)) for _ in range(episodes)]


def episode_seeds(seed: int, episodes: int) -> list[int]:
    return [int(seed) * 100_003 + e for e in range(episodes)]


def _realization(trace: Trace) -> tuple:
    return tuple((r.arrival, r.pickup, r.dropoff) for r in episode_requests(trace))


@dataclass
class ResultTable:
    """Per-policy episode costs (minutes) with min-max normalization of the means."""

    policies: list
    costs: np.ndarray                 # [policies, episodes]
    oracle_exact: list = field(default_factory=list)

    def index(self, name: str) -> int:
        return self.policies.index(name)

    @property
    def means(self) -> np.ndarray:
        return self.costs.mean(axis=1)

    @property
    def std_errors(self) -> np.ndarray:
        e = self.costs.shape[1]
        if e < 2:
            return np.full(len(self.policies), math.nan)
        return self.costs.std(axis=1, ddof=1) / math.sqrt(e)

    @property
    def bounds(self) -> tuple[float, float]:
        return float(self.means.min()), float(self.means.max())

    @property
    def normalizable(self) -> bool:
        lo, hi = self.bounds
        return len(self.policies) > 1 and hi > lo

    def normalized(self) -> np.ndarray | None:
        """(mean - min) / (max - min); None when fewer than two distinct means exist."""
        if not self.normalizable:
            return None
        lo, hi = self.bounds
        return (self.means - lo) / (hi - lo)

    def mean(self, name: str) -> float:
        return float(self.means[self.index(name)])

    def paired_gap(self, worse: str, better: str) -> tuple[float, float]:
        """Mean of per-episode differences ``worse - better`` and its standard error."""
        d = self.costs[self.index(worse)] - self.costs[self.index(better)]
        se = d.std(ddof=1) / math.sqrt(d.size) if d.size > 1 else math.nan
        return float(d.mean()), float(se)

    def to_csv(self, stream: TextIO) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(("policy", "mean_minutes", "std_error", "normalized", "min_minutes", "max_minutes"))
        norm = self.normalized()
        lo, hi = self.bounds
        for i, p in enumerate(self.policies):
            w.writerow((p, f"{self.means[i]:.6f}", f"{self.std_errors[i]:.6f}",
                        "undefined" if norm is None else f"{norm[i]:.6f}", f"{lo:.6f}", f"{hi:.6f}"))

    def episodes_to_csv(self, stream: TextIO) -> None:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(("episode",) + tuple(self.policies))
        for e in range(self.costs.shape[1]):
            w.writerow((e,) + tuple(int(c) for c in self.costs[:, e]))

    def to_text(self, title: str = "") -> str:
        norm = self.normalized()
        lines = [title] if title else []
        lines.append(f"{'policy':<14}{'normalized':>12}{'mean (min)':>13}{'s.e.':>9}")
        for i, p in enumerate(self.policies):
            nv = "undefined" if norm is None else f"{norm[i]:.2f}"
            lines.append(f"{p:<14}{nv:>12}{self.means[i]:>13.2f}{self.std_errors[i]:>9.2f}")
        lo, hi = self.bounds
        lines.append(f"{'min/max (min)':<14}{lo:>12.2f}{hi:>13.2f}")
        if self.oracle_exact:
            lines.append(f"oracle certified optimal on {sum(self.oracle_exact)}/{len(self.oracle_exact)} episodes")
        if norm is None:
            lines.append("normalization undefined: fewer than two distinct policy means")
        return "\n".join(lines) + "\n"


def run_experiment(cfg: ExperimentConfig, g: StreetGraph | None = None, dm: DemandModel | None = None,
                   approx=None, policies: dict | None = None) -> ResultTable:
    """Every policy plays the same starting states and the same arrival streams.

    ``policies`` may map names to ready-made policy objects; other names are built from
    ``cfg``. The oracle, if listed, is solved on each realized request sequence.
    """
    g = g or resolve_graph(cfg.graph)
    dm = dm or resolve_demand(cfg.demand, g.n)
    starts = starting_states(g, cfg.agents, cfg.episodes, cfg.seed)
    seeds = episode_seeds(cfg.seed, cfg.episodes)
    names = list(cfg.policies)
    control = [p for p in names if p != "oracle"]
    costs = np.zeros((len(names), cfg.episodes))
    realized: list = [None] * cfg.episodes
    warm: list = [[] for _ in range(cfg.episodes)]
    for name in control:
        pol = (policies or {}).get(name) or make_policy(name, cfg, g, dm, approx)
        row = names.index(name)
        for e, (s0, sd) in enumerate(zip(starts, seeds)):
            cost, trace = run_episode(s0, pol, dm, cfg.horizon, g, seed=sd)
            costs[row, e] = cost
            real = _realization(trace)
            if realized[e] is None:
                realized[e] = (real, episode_requests(trace))
            elif realized[e][0] != real:
                raise RuntimeError(f"episode {e}: policy {name} saw a different arrival stream")
            warm[e].append(trace_orders(trace))
        log.info("%s: mean %.3f", name, costs[row].mean())
    exact = []
    if "oracle" in names:
        row = names.index("oracle")
        for e, (s0, sd) in enumerate(zip(starts, seeds)):
            if realized[e] is None:
                reqs = sample_requests(dm, cfg.horizon, sd)
            else:
                reqs = realized[e][1]
            res = oracle_cost(s0, reqs, g, cfg.horizon, cfg.oracle_budget, warm[e])
            costs[row, e] = res.cost
            exact.append(res.exact)
    return ResultTable(names, costs, exact)


def sample_requests(dm, horizon: int, seed: int):
    from .demand import minute_rng

    return [r for k in range(1, horizon + 1) for r in dm.sample_minute(minute_rng(seed, k), k)]


# --- approximator switching -----------------------------------------------------

@dataclass
class SwitchEvent:
    minute: int
    previous: str
    chosen: str
    distance: float
    switched: bool


class SwitchingPolicy(Policy):
    """Online play whose base approximator follows ``select_model`` on the trailing window."""

    def __init__(self, g: StreetGraph, library: Sequence[LibraryEntry], active: int, cfg: RolloutConfig,
                 arrivals, interval: int = 60, max_count: int = 6):
        super().__init__(g)
        self.library = list(library)
        self.initial = active
        self.active = active
        self.interval = interval
        self.max_count = max_count
        self.inner = online_play_policy(g, self.library[active].policy, cfg, arrivals)
        self.name = "online-play (switching)"
        self.seen: list = []
        self.events: list[SwitchEvent] = []
        self._last_minute = -1

    def reset(self, horizon=None, seed: int = 0) -> None:
        super().reset(horizon, seed)
        self.active = self.initial
        self.inner.base = self.library[self.active].policy
        self.inner.reset(horizon, seed)
        self.seen, self.events, self._last_minute = [], [], -1

    def _observe(self, s) -> None:
        if s.minute != self._last_minute:
            self.seen.extend((r.arrival, r.pickup, r.dropoff) for r in s.outstanding if r.arrival == s.minute)
            self._last_minute = s.minute
            k = s.minute
            if k > self.interval and (k - 1) % self.interval == 0:
                self._check(k)

    def _check(self, k: int) -> None:
        window = RequestLog(self.seen).window(k - self.interval, self.interval)
        current = estimate_eta(window, self.interval, self.max_count)
        before = self.active
        idx, switched = select_model(self.library, current, before)
        dist = wasserstein1(current, self.library[before].region.reference)
        self.events.append(SwitchEvent(k, self.library[before].label, self.library[idx].label, dist, switched))
        if idx != before:
            self.active = idx
            self.inner.base = self.library[idx].policy
            self.inner.base.reset(self.horizon, self.seed)

    def joint_control(self, s):
        self._observe(s)
        return self.inner.joint_control(s)

    def agent_control(self, s, ell, preceding):
        self._observe(s)
        return self.inner.agent_control(s, ell, preceding)


@dataclass
class SwitchingResult:
    table: ResultTable
    events: list            # per episode: list[SwitchEvent]

    def relative_improvement(self, baseline: str = "online-play (fixed)") -> float:
        base = self.table.mean(baseline)
        return (base - self.table.mean("online-play (switching)")) / base if base else math.nan

    def first_switch_minutes(self) -> list:
        return [next((ev.minute for ev in evs if ev.switched), None) for evs in self.events]


def build_library(cfg: ExperimentConfig, g: StreetGraph, manifest: str | None = None) -> list[LibraryEntry]:
    from .approximator.policy import load_weights

    path = Path(manifest or cfg.library)
    if not path.exists():
        raise ConfigError(f"library manifest {path} does not exist")
    with path.open() as f:
        items = load_manifest(f, path.parent)
    entries = []
    for it in items:
        with it.model_path.open() as f:
            dm = load_model(f)
        with it.weights_path.open("rb") as f:
            ap = load_weights(f, g)
        entries.append(library_entry(dm, ap, cfg))
    return entries


def library_entry(dm: DemandModel, ap, cfg: ExperimentConfig) -> LibraryEntry:
    region = AmbiguitySet.build(dm.eta, cfg.q, cfg.samples, cfg.diameter or None, cfg.log_base)
    return LibraryEntry(dm, ap, region)


def run_switching_experiment(cfg: ExperimentConfig, library: Sequence[LibraryEntry], eval_dm: DemandModel,
                             g: StreetGraph | None = None, active: int = 0,
                             include_rollout: bool = True) -> SwitchingResult:
    """Online play with and without switching (plus rollout) on paired realizations of ``eval_dm``."""
    g = g or resolve_graph(cfg.graph)
    rcfg = cfg.rollout()
    switching = SwitchingPolicy(g, library, active, rcfg, eval_dm, cfg.check_interval, eval_dm.eta.support[-1])
    fixed = online_play_policy(g, library[active].policy, rcfg, eval_dm)
    fixed.name = "online-play (fixed)"
    pols = {"online-play (switching)": switching, "online-play (fixed)": fixed}
    if include_rollout:
        pols["rollout"] = rollout_policy(g, GreedyPolicy(g), rcfg, eval_dm)
    names = list(pols)
    starts = starting_states(g, cfg.agents, cfg.episodes, cfg.seed)
    seeds = episode_seeds(cfg.seed, cfg.episodes)
    costs = np.zeros((len(names), cfg.episodes))
    events = []
    for row, name in enumerate(names):
        for e, (s0, sd) in enumerate(zip(starts, seeds)):
            costs[row, e], _ = run_episode(s0, pols[name], eval_dm, cfg.horizon, g, seed=sd)
            if name == "online-play (switching)":
                events.append(list(switching.events))
    return SwitchingResult(ResultTable(names, costs), events)


# --- trace files and auditing ---------------------------------------------------

@dataclass
class TraceSummary:
    horizon: int
    costs: dict                 # minute -> simulator stage cost
    requests: list              # (arrival, pickup minute or None)


class AuditError(AssertionError):
    pass


@dataclass
class AuditReport:
    horizon: int
    requests: int
    served: int
    simulator_total: int
    wait_total: int

    def to_text(self) -> str:
        return (f"horizon {self.horizon}: {self.requests} requests, {self.served} picked up\n"
                f"simulator cost {self.simulator_total} = request waits {self.wait_total}\n")


def summarize(trace: Trace) -> TraceSummary:
    picked = {id(r): k for k, r, _ in trace.pickups}
    reqs = [(r.arrival, picked.get(id(r))) for r in episode_requests(trace)]
    return TraceSummary(trace.horizon, {rec.minute: rec.cost for rec in trace.records}, reqs)


def audit_trace(trace: Trace | TraceSummary) -> AuditReport:
    """Recompute the episode cost from per-request arrival/pickup minutes and compare."""
    t = summarize(trace) if isinstance(trace, Trace) else trace
    n_plus = t.horizon + 1
    for k in range(1, t.horizon + 1):
        if k not in t.costs:
            raise AuditError(f"minute {k}: no simulator record")
        count = sum(1 for a, p in t.requests if a <= k and (p is None or p > k))
        if count != t.costs[k]:
            raise AuditError(f"minute {k}: simulator counts {t.costs[k]} outstanding, request log gives {count}")
    waits = sum(min(n_plus if p is None else p, n_plus) - a for a, p in t.requests)
    total = sum(t.costs.values())
    if waits != total:
        raise AuditError(f"total mismatch: simulator {total}, request waits {waits}")
    served = sum(p is not None for _, p in t.requests)
    return AuditReport(t.horizon, len(t.requests), served, total, waits)


def save_trace(trace: Trace, stream: TextIO) -> None:
    """Tagged CSV: ``H`` horizon, ``M`` minute records, ``R`` requests."""
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(("H", trace.horizon))
    for rec in trace.records:
        s = rec.state
        w.writerow(("M", rec.minute, rec.cost, rec.serviced, " ".join(map(str, s.locations)),
                    " ".join(map(str, s.timers)), " ".join(repr(u) for u in rec.controls)))
    picked = {id(r): (k, ell) for k, r, ell in trace.pickups}
    for r in episode_requests(trace):
        k, ell = picked.get(id(r), ("", ""))
        w.writerow(("R", r.arrival, r.pickup, r.dropoff, k, ell))


def load_trace(stream: TextIO) -> TraceSummary:
    horizon, costs, reqs = None, {}, []
    for lineno, row in enumerate(csv.reader(stream), 1):
        if not row:
            continue
        try:
            if row[0] == "H":
                horizon = int(row[1])
            elif row[0] == "M":
                costs[int(row[1])] = int(row[2])
            elif row[0] == "R":
                reqs.append((int(row[1]), int(row[4]) if row[4] else None))
            else:
                raise AuditError(f"trace line {lineno}: unknown record tag {row[0]!r}")
        except (IndexError, ValueError):
            raise AuditError(f"trace line {lineno}: malformed record") from None
    if horizon is None:
        raise AuditError("trace has no horizon record")
    return TraceSummary(horizon, costs, reqs)


# --- report files ----------------------------------------------------------------

def write_report(table: ResultTable, outdir: str | Path, stem: str = "results", title: str = "") -> list[Path]:
    """CSV summary, per-episode CSV, text table and two PNG figures."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    p = out / f"{stem}.csv"
    with p.open("w") as f:
        table.to_csv(f)
    paths.append(p)
    p = out / f"{stem}_episodes.csv"
    with p.open("w") as f:
        table.episodes_to_csv(f)
    paths.append(p)
    p = out / f"{stem}.txt"
    p.write_text(table.to_text(title))
    paths.append(p)
    paths += write_figures(table, out, stem, title)
    return paths


def write_figures(table: ResultTable, out: Path, stem: str, title: str = "") -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    norm = table.normalized()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    values = norm if norm is not None else table.means
    ax.bar(table.policies, values, yerr=None if norm is not None else table.std_errors, color="#4c72b0")
    ax.set_ylabel("normalized mean cost" if norm is not None else "mean cost (minutes)")
    ax.set_title(title or "policy comparison")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    p = out / f"{stem}_summary.png"
    fig.savefig(p, metadata={"Software": None})
    plt.close(fig)
    paths.append(p)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.boxplot([table.costs[i] for i in range(len(table.policies))])
    ax.set_xticks(range(1, len(table.policies) + 1), table.policies, rotation=30)
    ax.set_ylabel("episode cost (minutes)")
    ax.set_title("per-episode waiting minutes")
    fig.tight_layout()
    p = out / f"{stem}_episodes.png"
    fig.savefig(p, metadata={"Software": None})
    plt.close(fig)
    paths.append(p)
    return paths


def format_events(events: Sequence[SwitchEvent]) -> str:
    buf = io.StringIO()
    for ev in events:
        flag = "switch" if ev.switched else "keep"
        buf.write(f"minute {ev.minute}: {ev.previous} -> {ev.chosen} ({flag}, distance {ev.distance:.4f})\n")
    return buf.getvalue()
