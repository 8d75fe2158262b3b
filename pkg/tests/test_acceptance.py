"""Acceptance criteria 1-9; a pass/fail line per criterion is printed in the terminal summary."""

import hashlib
import itertools
import json
import math
from pathlib import Path

import numpy as np
import pytest

from helpers import KIND_SHAPES, layer_gradient_error, oracle_optimum, random_plan
from shieldkit import attacks, data, engine
from shieldkit.cli import main
from shieldkit.criticality import criticality_scores
from shieldkit.engine import build_graph, default_graph
from shieldkit.placement import (HardwareProfile, TensorCost, chain_units, plan_exact, plan_relaxed, synthetic_profile,
                                 validate_plan)
from shieldkit.privacy import Histogram, jsd
from shieldkit.secure_sim import PadSource, keygen, mask, native_logits, run_secure_inference, trace_cost, unmask

SLACK = 0.02
MONO_SLACK = 0.03
MONO_SEEDS = (0, 1, 2, 3, 4)


def tree_hashes(root: Path):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    """The default pipeline, run twice into separate directories."""
    a, b = tmp_path_factory.mktemp("run_a"), tmp_path_factory.mktemp("run_b")
    codes = [main(["run-all", "-o", str(a), "-q"]), main(["run-all", "-o", str(b), "-q"])]
    return a, b, codes


@pytest.mark.criterion(1)
def test_criterion_1_gradients(detail):
    rng = np.random.default_rng(1)
    worst = {kind: max(layer_gradient_error(kind, rng) for _ in range(50)) for kind in KIND_SHAPES}
    detail("worst relative error " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()))
    assert max(worst.values()) <= 1e-6


@pytest.mark.criterion(2)
def test_criterion_2_jsd(detail):
    def h(m):
        return Histogram(np.arange(len(m) + 1.0), np.asarray(m, float))

    hand = jsd(h([1, 0]), h([0.5, 0.5]))
    rng = np.random.default_rng(2)
    ok_range = ok_sym = ok_ident = True
    for _ in range(1000):
        n = int(rng.integers(2, 65))
        p, q = rng.dirichlet(np.ones(n) * 0.3), rng.dirichlet(np.ones(n) * 0.3)
        d = jsd(h(p), h(q))
        ok_range &= 0.0 <= d <= 1.0
        ok_sym &= d == jsd(h(q), h(p))
        ok_ident &= jsd(h(p), h(p)) == 0.0
    disjoint = jsd(h([1, 0]), h([0, 1]))
    detail(f"jsd([1,0],[.5,.5])={hand:.6f}, disjoint={disjoint:.6f}")
    assert abs(hand - 0.3113) <= 1e-4
    assert abs(disjoint - 1.0) <= 1e-12
    assert ok_range and ok_sym and ok_ident


@pytest.mark.criterion(3)
def test_criterion_3_transparency(detail):
    g = default_graph(4, seed=0)
    prof = synthetic_profile(g, seed=0)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(16, 1, 16, 16))
    native = native_logits(g, x)
    worst = 0.0
    for i in range(100):
        plan = random_plan(rng, g, prof)
        run = run_secure_inference(g, plan, keygen(plan, g, i), plan.masked, prof, x, PadSource(i))
        worst = max(worst, float(np.max(np.abs(run.logits - native)) / np.max(np.abs(native))))
        assert run.audit.clean
    # OTP round trip
    exact = True
    pads = PadSource(99)
    for _ in range(200):
        f = np.round(rng.normal(size=(8, 8)) * 2**20) / 2**20
        p = pads.draw("f", f)
        exact &= np.array_equal(unmask(mask(f, p), p), f)
    # nonce freshness over a thousand masked inferences
    masked_plan = None
    while masked_plan is None or not any(masked_plan.input_masked(t) for t in masked_plan.options):
        masked_plan = random_plan(rng, g, prof)
    source = PadSource(7)
    keys = keygen(masked_plan, g, 7)
    for _ in range(1000):
        run_secure_inference(g, masked_plan, keys, masked_plan.masked, prof, x[:1], source)
    fresh = len(source._seen) == source.nonce
    detail(f"worst relative logit error {worst:.2e} over 100 plans; OTP exact={exact}; "
           f"{source.nonce} pads over 1000 inferences, all distinct={fresh}")
    assert worst <= 1e-6 and exact and fresh


def random_dense_chain(rng, n):
    layers, width = [], int(rng.integers(2, 6))
    if rng.random() < 0.3:
        layers.append({"id": "lead", "kind": "relu"})
    for i in range(n):
        out = 3 if i == n - 1 else int(rng.integers(2, 6))
        layers.append({"id": f"t{i}", "kind": "dense", "out_features": out})
        for j in range(int(rng.integers(0, 3)) if i < n - 1 else 0):
            layers.append({"id": f"r{i}_{j}", "kind": "relu"})
    g = build_graph(layers, (width,), 3, seed=int(rng.integers(1 << 30)))
    tensors = []
    for t in g.linear_ids:
        gpu = None if rng.random() < 0.2 else float(rng.uniform(0.1, 3))
        tensors.append(TensorCost(t, float(rng.uniform(0.1, 3)), float(rng.uniform(0.1, 4)), gpu,
                                  float(rng.uniform(0, 1)), float(rng.uniform(0, 1)), int(rng.integers(0, 200))))
    prof = HardwareProfile(tensors, float(rng.uniform(0, 2)), 150)
    critical = {t for t in g.linear_ids if rng.random() < 0.5}
    masked = {t for t in g.linear_ids if rng.random() < 0.4}
    return g, prof, critical, masked


@pytest.mark.criterion(4)
def test_criterion_4_placement(detail):
    rng = np.random.default_rng(4)
    mismatches = gap_breaks = identity_breaks = invalid = 0
    for trial in range(100):
        n = 1 + trial % 10
        g, prof, critical, masked = random_dense_chain(rng, n)
        units = chain_units(g)
        exact = plan_exact(prof, critical, masked, units)
        relaxed = plan_relaxed(prof, critical, masked, units)
        brute = oracle_optimum(prof, units, critical, masked)
        mismatches += not math.isclose(exact.predicted_latency, brute, rel_tol=1e-12, abs_tol=1e-12)
        gap_breaks += relaxed.predicted_latency - exact.predicted_latency > prof.t_switch * (len(units) - 1) + 1e-12
        invalid += bool(validate_plan(exact, critical, masked, prof)) + bool(validate_plan(relaxed, critical, masked, prof))
        x = rng.normal(size=(2,) + g.input_shape)
        for plan in (exact, relaxed):
            run = run_secure_inference(g, plan, keygen(plan, g, trial), plan.masked, prof, x, PadSource(trial))
            identity_breaks += trace_cost(run.trace) != plan.predicted_latency
    detail(f"100 profiles, chains 1-10: DP!=brute {mismatches}, gap-bound breaks {gap_breaks}, "
           f"trace/prediction mismatches {identity_breaks}, invalid plans {invalid}")
    assert mismatches == gap_breaks == identity_breaks == invalid == 0


@pytest.mark.criterion(5)
def test_criterion_5_null_transition(small_setup, detail):
    g, bundle, res = small_setup
    victim = res.victim.apply(g)
    probes = bundle.x["query"][:16]
    rep = criticality_scores(victim, res.victim.apply(g), res.replay, probes)
    values = {e.tensor_id: (e.transition, e.score) for e in rep.entries}
    detail("transition/score per tensor " + ", ".join(f"{t}={v[0]:g}/{v[1]:g}" for t, v in values.items()))
    assert all(t == 0.0 and s == 0.0 for t, s in values.values())


@pytest.mark.criterion(6)
def test_criterion_6_end_to_end_defense(pipeline_runs, detail):
    a, _, codes = pipeline_runs
    assert codes[0] == 0
    rows = {r["name"]: r for r in json.loads((a / "defense.json").read_text())["rows"]}
    sel, full = rows["selective"], rows["all-shield"]
    detail(f"MS selective {sel['ms_accuracy']:.4f} vs all-shield {full['ms_accuracy']:.4f}; "
           f"MIA selective {sel['mia_accuracy']:.4f} (plan exposure {sel['mia_accuracy_plan']:.4f}) vs mask-all "
           f"{full['mia_accuracy']:.4f}; leaked fraction {sel['leaked_fraction']:.4f}")
    assert sel["ms_accuracy"] <= full["ms_accuracy"] + SLACK
    assert sel["mia_accuracy"] <= full["mia_accuracy"] + SLACK
    assert sel["mia_accuracy_plan"] <= full["mia_accuracy"] + SLACK
    assert 0.0 < sel["leaked_fraction"] < 1.0


@pytest.mark.criterion(7)
def test_criterion_7_selection_efficiency(pipeline_runs, detail):
    a, _, codes = pipeline_runs
    assert codes[0] == 0
    sel = json.loads((a / "selection.json").read_text())
    ours, baseline = sel["selection"]["param_count"], sel["intrinsic_only"]["param_count"]
    detail(f"selected {ours} vs intrinsic-only {baseline} parameters (ratio {ours / baseline:.4f}) "
           f"at threshold {sel['threshold']:.4f}")
    assert ours <= baseline


def monotonicity(seed):
    bundle = data.generate_synthetic_dataset(seed)
    g = default_graph(4, seed=None)
    setup = data.make_public_and_victim(seed, g, bundle)
    ids = g.linear_ids
    subsets = [frozenset(c) for r in range(len(ids) + 1) for c in itertools.combinations(ids, r)]
    ms = attacks.MSSimulator(g, setup.public, setup.victim, bundle, seed=seed)
    ms_acc = {s: ms(set(ids) - s).accuracy for s in subsets}
    ms_worst = max(ms_acc[a] - ms_acc[b] for a in subsets for b in subsets if a <= b)
    mia_worst = 0.0
    for shield in ([], ids):
        sim = attacks.MIASimulator(g, ms(shield).surrogate, setup.victim, bundle, seed=seed)
        acc = {s: sim.run(s).accuracy for s in subsets}
        mia_worst = max(mia_worst, max(acc[a] - acc[b] for a in subsets for b in subsets if a <= b))
    return ms_worst, mia_worst


@pytest.mark.criterion(8)
def test_criterion_8_monotonicity(detail):
    results = {seed: monotonicity(seed) for seed in MONO_SEEDS}
    ms_worst = max(r[0] for r in results.values())
    mia_worst = max(r[1] for r in results.values())
    detail(f"worst violation over seeds {list(MONO_SEEDS)}: MS {ms_worst:.4f}, MIA {mia_worst:.4f} "
           f"(slack {MONO_SLACK})")
    assert ms_worst <= MONO_SLACK and mia_worst <= MONO_SLACK


@pytest.mark.criterion(9)
def test_criterion_9_determinism(pipeline_runs, detail):
    a, b, codes = pipeline_runs
    assert codes == [0, 0]
    ha, hb = tree_hashes(a), tree_hashes(b)
    differing = sorted(k for k in ha.keys() | hb.keys() if ha.get(k) != hb.get(k))
    detail(f"{len(ha)} artifacts hash-compared, {len(differing)} differ {differing[:5]}")
    assert not differing
