"""Acceptance criteria 1-11, one PASS/FAIL line each (also listed in the terminal summary).

Every experiment uses the harness default seed 0; nothing is re-run with other seeds.
Trained approximators come from ``acceptance_artifacts`` (built on first use, then cached).
"""

import math

import numpy as np
import pytest

import acceptance_artifacts as artifacts
from helpers import RandomPolicy, check_invariants
from taxiplay import harness
from taxiplay.ambiguity import q_valid_radius, wasserstein1, wasserstein1_lp, AmbiguitySet
from taxiplay.benchmarks import oracle_cost
from taxiplay.demand import TABLE_ETA, CategoricalDistribution, DemandModel, eta_distribution, table_model
from taxiplay.dynamics import add_arrivals, control_set, initial_state, run_episode
from taxiplay.graph import from_edges, grid_graph
from taxiplay.harness import ExperimentConfig, run_experiment, run_switching_experiment
from taxiplay.policies import GreedyPolicy, RolloutConfig, RolloutPolicy, available_controls

pytestmark = pytest.mark.slow

RESULTS = []
SEED = 0
GRID = grid_graph(5, 5)
# criteria 1-3 share one paired run: 5x5 grid, m=2, N=30, Medium demand, 50 episodes, (128, t=5)
PAIRED = dict(graph="grid:5x5", agents=2, horizon=30, episodes=50, trajectories=128, truncation=5, seed=SEED)
GAP_SE_1, GAP_SE_2, GAP_SE_6, GAP_SE_7 = 2.0, 2.0, 1.0, 1.0
W_TOL, LP_TOL, RADIUS_TOL, GRAD_STEP, GRAD_TOL = 1e-12, 1e-9, 1e-6, 1e-5, 1e-4
OUT_OF_REGION = 0.15


def report(n, ok, detail):
    RESULTS.append(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    print(RESULTS[-1])
    assert ok, detail


def load(label):
    return harness.load_approximator(str(artifacts.ensure(label)), GRID)


@pytest.fixture(scope="module")
def medium_run():
    cfg = ExperimentConfig(demand="table:medium",
                           policies=("greedy", "rollout", "gnn", "online-play", "inst-assign", "tss", "oracle"),
                           **PAIRED)
    return cfg, run_experiment(cfg, GRID, approx=load("medium"))


def test_criterion_1_rollout_beats_greedy(medium_run):
    _, t = medium_run
    d, se = t.paired_gap("greedy", "rollout")
    ok = t.mean("rollout") < t.mean("greedy") and d > GAP_SE_1 * se
    report(1, ok, f"greedy {t.mean('greedy'):.2f} vs rollout {t.mean('rollout'):.2f} min, "
                  f"gap {d:.2f} = {d / se:.2f} paired s.e. (need > {GAP_SE_1})")


def test_criterion_2_online_play_in_distribution(medium_run):
    _, t = medium_run
    d, se = t.paired_gap("greedy", "online-play")
    ok = t.mean("online-play") <= t.mean("rollout") and t.mean("online-play") < t.mean("greedy") and d > GAP_SE_2 * se
    report(2, ok, f"online play {t.mean('online-play'):.2f}, rollout {t.mean('rollout'):.2f}, "
                  f"greedy {t.mean('greedy'):.2f} min; gap to greedy {d / se:.2f} paired s.e. (need > {GAP_SE_2})")


def test_criterion_3_oracle_dominance(medium_run):
    cfg, t = medium_run
    o = t.costs[t.index("oracle")]
    dominated = bool((o <= t.costs).all())
    sizes = [len(harness.sample_requests(table_model("medium", 25), cfg.horizon, s))
             for s in harness.episode_seeds(cfg.seed, cfg.episodes)]
    # a busier second set so that certification is also exercised near the 12-request limit
    hi_cfg = ExperimentConfig(demand="table:high", policies=("greedy", "inst-assign", "tss", "rollout", "oracle"),
                              oracle_budget=500_000, **{**PAIRED, "horizon": 20})
    hi = run_experiment(hi_cfg, GRID)
    dominated &= bool((hi.costs[hi.index("oracle")] <= hi.costs).all())
    hi_sizes = [len(harness.sample_requests(table_model("high", 25), hi_cfg.horizon, s))
                for s in harness.episode_seeds(hi_cfg.seed, hi_cfg.episodes)]
    small = [ex for n, ex in zip(sizes + hi_sizes, t.oracle_exact + hi.oracle_exact) if n <= 12]
    certified = all(small)
    report(3, dominated and certified,
           f"oracle <= every policy on all {2 * cfg.episodes} episodes: {dominated}; "
           f"certified exact on {sum(small)}/{len(small)} instances with <= 12 requests "
           f"(largest instance {max(sizes + hi_sizes)} requests)")


def test_criterion_4_wasserstein():
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for _ in range(1000):
        pair = []
        for _ in range(2):
            k = int(rng.integers(1, 8))
            support = tuple(sorted(rng.choice(10, size=k, replace=False).tolist()))
            pair.append(CategoricalDistribution(support, rng.dirichlet(np.ones(k))))
        worst = max(worst, abs(wasserstein1(*pair) - wasserstein1_lp(*pair)))
    lm = wasserstein1(eta_distribution(TABLE_ETA["low"]), eta_distribution(TABLE_ETA["medium"]))
    ok = worst <= LP_TOL and abs(lm - 0.10) <= W_TOL
    report(4, ok, f"max |closed form - LP| over 1000 pairs {worst:.2e} (tol {LP_TOL}); "
                  f"Low vs Medium = {lm!r} (0.10 within {W_TOL})")


def test_criterion_5_radius():
    ell10, elle = -math.log10(1 - 0.54), -math.log(1 - 0.54)
    direct10 = 6.75 * (ell10 / 5000 + 2 * math.sqrt(ell10 / 5000))
    directe = 6.75 * (elle / 5000 + 2 * math.sqrt(elle / 5000))
    r10, re = q_valid_radius(0.54, 5000, 6), q_valid_radius(0.54, 5000, 6, math.e)
    readme = (artifacts.Path(__file__).resolve().parent.parent / "README.md").read_text()
    documented = "0.114" in readme
    ok = (abs(r10 - direct10) <= RADIUS_TOL and abs(re - directe) <= RADIUS_TOL
          and abs(r10 - 0.1113) < 5e-5 and abs(re - 0.1693) < 5e-5 and documented)
    report(5, ok, f"base-10 {r10:.6f}, natural {re:.6f}; README records the 0.114 claim: {documented}")


@pytest.fixture(scope="module")
def low_library():
    manifest = artifacts.manifest(("low", "high"))
    artifacts.ensure("low"), artifacts.ensure("high")
    return harness.build_library(ExperimentConfig(), GRID, str(manifest))


def test_criterion_6_switching_recovery(low_library):
    high = table_model("high", 25)
    cfg = ExperimentConfig(demand="table:high", check_interval=60, **{**PAIRED, "horizon": 90, "episodes": 30})
    res = run_switching_experiment(cfg, low_library, high, GRID, active=0, include_rollout=False)
    first = res.first_switch_minutes()
    d0 = wasserstein1(low_library[0].region.reference, high.eta)
    to_high = all(evs and evs[0].switched and evs[0].chosen == "high" for evs in res.events)
    t = res.table
    d, se = t.paired_gap("online-play (fixed)", "online-play (switching)")
    ok = all(m == 61 for m in first) and to_high and d > GAP_SE_6 * se
    report(6, ok, f"reference distance {d0:.2f} > theta {low_library[0].region.radius:.3f}; switched to high "
                  f"at minute 61 in {sum(m == 61 for m in first)}/{len(first)} episodes; fixed "
                  f"{t.mean('online-play (fixed)'):.2f} vs switching {t.mean('online-play (switching)'):.2f} min, "
                  f"gap {d:.2f} = {d / se:.2f} paired s.e. ({100 * res.relative_improvement():.1f}% relative)")


def test_criterion_7_out_of_region():
    low = load("low")
    high = table_model("high", 25)
    dist = wasserstein1(eta_distribution(TABLE_ETA["low"]), high.eta)
    cfg = ExperimentConfig(demand="table:high", policies=("rollout", "online-play"), **PAIRED)
    t = run_experiment(cfg, GRID, approx=low)
    d, se = t.paired_gap("online-play", "rollout")  # positive: rollout better
    ok = dist >= OUT_OF_REGION and (t.mean("rollout") <= t.mean("online-play") or -d < GAP_SE_7 * se)
    report(7, ok, f"distance {dist:.2f} >= {OUT_OF_REGION}; rollout {t.mean('rollout'):.2f} vs low-trained "
                  f"online play {t.mean('online-play'):.2f} min (online-play advantage {-d / se:.2f} s.e.)")


def test_criterion_8_gradients():
    from taxiplay.approximator.features import move_mask
    from taxiplay.approximator.gcn import GraphConvNet, loss_and_grads

    g = from_edges([(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (2, 0), (4, 2)])
    rng = np.random.default_rng(SEED)
    worst, count = 0.0, 0
    for kind in ("pickup", "move"):
        net = GraphConvNet.build(kind, g.adjacency_matrix(), 2, seed=3, hidden=8)
        for k in net.params:
            net.params[k] = net.params[k] + rng.normal(0, 0.3, net.params[k].shape)
        x, a = rng.random((6, 5, 4)), rng.integers(0, 5, 6)
        tau = rng.integers(0, 4, (6, 2)).astype(float)
        mask = None if kind == "pickup" else move_mask(g)[a]
        labels = rng.integers(0, 2, 6) if kind == "pickup" else a
        _, grads = loss_and_grads(net, x, a, tau, labels, mask, l2=1e-5)
        for k, p in net.params.items():
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + GRAD_STEP
                hi, _ = loss_and_grads(net, x, a, tau, labels, mask, l2=1e-5)
                p[idx] = old - GRAD_STEP
                lo, _ = loss_and_grads(net, x, a, tau, labels, mask, l2=1e-5)
                p[idx] = old
                fd = (hi - lo) / (2 * GRAD_STEP)
                worst = max(worst, abs(fd - grads[k][idx]) / max(abs(fd), abs(grads[k][idx]), 1e-6))
                count += 1
    report(8, worst < GRAD_TOL, f"{count} parameters, max relative error {worst:.2e} (tol {GRAD_TOL})")


def test_criterion_9_dp_equivalence():
    from test_policies import micro_instances, rollout_matches_dp

    insts = micro_instances(20, seed=SEED)
    assert all(g.n <= 3 and h <= 3 for g, h, _, _ in insts)
    agree = sum(rollout_matches_dp(*inst) for inst in insts)
    report(9, agree == 20, f"rollout equals the DP control on every visited state in {agree}/20 micro-instances")


def fuzz_case(rng):
    n = int(rng.integers(2, 8))
    edges = {(i, (i + 1) % n) for i in range(n)}
    for _ in range(int(rng.integers(0, 2 * n))):
        a, b = rng.integers(0, n, 2)
        if a != b:
            edges.add((int(a), int(b)))
    g = from_edges(sorted(edges))
    eta = rng.dirichlet(np.ones(int(rng.integers(2, 5))))
    loc = CategoricalDistribution(tuple(range(n)), 0.5 * rng.dirichlet(np.ones(n)) + 0.5 / n)
    return g, DemandModel(eta_distribution(eta), loc, loc), int(rng.integers(1, 4)), int(rng.integers(1, 13))


def test_criterion_10_dynamics_invariants():
    rng = np.random.default_rng(SEED)
    bad = 0
    for e in range(10_000):
        g, dm, m, horizon = fuzz_case(rng)
        pol = RandomPolicy(g) if e % 2 else GreedyPolicy(g)
        try:
            _, trace = run_episode(initial_state(rng.integers(0, g.n, m)), pol, dm, horizon, g, seed=e)
            check_invariants(trace, g)
        except AssertionError:
            bad += 1
    report(10, bad == 0, f"recursion, conservation, busy-path decrement and audit held on {10_000 - bad}/10000 "
                         f"fuzzed episodes (random and greedy policies)")


def test_criterion_11_linear_scaling():
    dm = table_model("high", 25)
    rng = np.random.default_rng(SEED)
    lines, ok = [], True
    for m in (1, 2, 3, 4):
        pol = RolloutPolicy(GRID, GreedyPolicy(GRID), RolloutConfig(8, 2), dm)
        pol.reset(horizon=30, seed=m)
        for _ in range(10):
            locs = rng.choice(25, size=m, replace=False)
            s = add_arrivals(initial_state(locs), dm.sample_minute(rng, 1))
            joint = pol.joint_control(s)
            sizes = [len(control_set(s, ell, GRID)) for ell in range(m)]
            # distinct locations: no request can be claimed twice, so the sets are the full control sets
            assert all(len(available_controls(s, ell, GRID, joint[:ell])) == sizes[ell] for ell in range(m))
            ok &= pol.stats.last_decision == sum(sizes)
            ok &= m == 1 or pol.stats.last_decision < math.prod(sizes)
        lines.append(f"m={m}: {pol.stats.last_decision} leaves (sum {sum(sizes)}, product {math.prod(sizes)})")
    report(11, ok, "; ".join(lines))
