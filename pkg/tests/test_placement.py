import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import oracle_objective, oracle_optimum, random_problem
from shieldkit.engine import default_graph
from shieldkit.placement import (HardwareProfile, Option, PlacementError, PlacementPlan, TensorCost, Unit,
                                 build_plan, chain_units, option_cost, plan_brute_force, plan_exact, plan_relaxed,
                                 predicted_latency, switch_count, synthetic_profile, tensor_flops, validate_plan)


def one(tid="t", mem=0, tee=1.0, gpu=2.0, cpu=5.0, deobf=0.5, mask=1.0, memory=100, ts=0.0):
    return HardwareProfile([TensorCost(tid, cpu, tee, gpu, deobf, mask, mem)], ts, memory)


def test_option_cost_table():
    p = one()
    assert option_cost("t", Option.TEE_CPU, p) == 1.0
    assert option_cost("t", Option.REE_GPU_OBF, p, feature_is_masked=True) == 3.5
    assert option_cost("t", Option.REE_GPU_OBF, p, feature_is_masked=False) == 2.5
    assert option_cost("t", Option.REE_CPU_OBF, p, True) == 6.5
    assert option_cost("t", Option.REE_CPU, p) == 5.0 and option_cost("t", Option.REE_GPU, p) == 2.0
    with pytest.raises(PlacementError):
        option_cost("t", Option.TEE_CPU, p, critical=False)
    with pytest.raises(PlacementError):
        option_cost("t", Option.REE_GPU, p, critical=True)
    with pytest.raises(PlacementError):
        option_cost("missing", Option.REE_CPU, p)


def test_relaxed_examples():
    assert plan_relaxed(one(), {"t"}, {"t"}).options["t"] is Option.TEE_CPU
    assert plan_relaxed(one(mem=200), {"t"}).options["t"] is Option.REE_GPU_OBF
    assert plan_relaxed(one(), set()).options["t"] is Option.REE_GPU
    p = HardwareProfile([TensorCost("t", 1.0, 1.0, None, None, None, mem=200)], 0.0, 100)
    with pytest.raises(PlacementError):
        plan_relaxed(p, {"t"})
    with pytest.raises(PlacementError):
        plan_relaxed(one(), {"unknown"})


def test_relaxed_matches_per_tensor_argmin_on_three_chain():
    rng = np.random.default_rng(4)
    for _ in range(20):
        profile, units, critical, masked = random_problem(rng, 3, t_switch=0.0)
        plan = plan_relaxed(profile, critical, masked, units)
        assert math.isclose(plan.predicted_latency, oracle_optimum(profile, units, critical, masked), abs_tol=1e-12)


def test_exact_colocates_under_huge_switch_cost():
    # per-tensor argmins alternate: a is cheapest in the TEE, b cheapest obfuscated in the REE
    tensors = [TensorCost("a", 9.0, 1.0, None, 0.0, 0.0), TensorCost("b", 0.5, 2.0, None, 0.0, 0.0)]
    huge = HardwareProfile(tensors, 1e3, 100)
    relaxed = plan_relaxed(huge, {"a", "b"})
    exact = plan_exact(huge, {"a", "b"})
    assert [relaxed.options[t] for t in "ab"] == [Option.TEE_CPU, Option.REE_CPU_OBF]
    assert [exact.options[t] for t in "ab"] == [Option.TEE_CPU, Option.TEE_CPU]
    assert switch_count(relaxed) == 1 and switch_count(exact) == 0
    assert exact.predicted_latency == 3.0 == plan_brute_force(huge, {"a", "b"}).predicted_latency
    cheap = HardwareProfile(tensors, 0.0, 100)
    assert plan_exact(cheap, {"a", "b"}).predicted_latency == plan_relaxed(cheap, {"a", "b"}).predicted_latency == 1.5


def test_dp_equals_brute_force_over_random_profiles():
    rng = np.random.default_rng(2024)
    for trial in range(100):
        n = 1 + trial % 10
        profile, units, critical, masked = random_problem(rng, n)
        exact = plan_exact(profile, critical, masked, units)
        brute = oracle_optimum(profile, units, critical, masked)
        assert math.isclose(exact.predicted_latency, brute, rel_tol=1e-12, abs_tol=1e-12), trial
        assert validate_plan(exact, critical, masked, profile) == []


def test_predicted_latency_matches_rule_oracle():
    rng = np.random.default_rng(7)
    for _ in range(50):
        profile, units, critical, masked = random_problem(rng, int(rng.integers(1, 7)))
        plan = plan_relaxed(profile, critical, masked, units)
        assert math.isclose(plan.predicted_latency,
                            oracle_objective(profile, units, critical, masked, plan.options), abs_tol=1e-12)
        assert predicted_latency(plan, profile) == plan.predicted_latency


def test_all_ree_plan_has_no_switches():
    g = default_graph(4, seed=None)
    prof = synthetic_profile(g)
    plan = plan_exact(prof, (), (), chain_units(g))
    assert switch_count(plan) == 0
    assert plan.predicted_latency == math.fsum(option_cost(t, o, prof) for t, o in plan.options.items())


def test_validate_plan_flags_rule_breaks():
    g = default_graph(4, seed=None)
    prof = synthetic_profile(g)
    units = chain_units(g)
    critical = {"conv1", "fc1"}
    plan = plan_exact(prof, critical, {"conv1"}, units)
    assert validate_plan(plan, critical, {"conv1"}, prof) == []
    opts = dict(plan.options)
    opts["fc2"] = Option.TEE_CPU
    bad = build_plan(opts, units, prof, critical, ())
    assert [v.rule for v in validate_plan(bad, critical, (), prof)] == ["non-critical-in-ree"]
    opts = {t: Option.REE_CPU for t in g.linear_ids}
    opts["conv1"] = Option.REE_CPU_OBF
    obf = build_plan(opts, units, prof, {"conv1"}, ())
    obf.worlds["relu1"] = "REE"
    violations = validate_plan(obf, {"conv1"}, (), prof)
    assert [(v.rule, v.unit) for v in violations] == [("nonlinear-after-obfuscated", "relu1")]
    small = HardwareProfile(prof.tensors, prof.t_switch, tee_memory=1)
    tee = build_plan({t: Option.TEE_CPU for t in g.linear_ids}, units, small, g.linear_ids, ())
    assert {v.rule for v in validate_plan(tee, g.linear_ids, (), small)} == {"memory"}


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 7))
def test_solver_invariants(seed, n):
    rng = np.random.default_rng(seed)
    profile, units, critical, masked = random_problem(rng, n)
    exact = plan_exact(profile, critical, masked, units)
    relaxed = plan_relaxed(profile, critical, masked, units)
    n_units = len(units)
    assert exact.predicted_latency <= relaxed.predicted_latency + 1e-12
    assert relaxed.predicted_latency - exact.predicted_latency <= profile.t_switch * (n_units - 1) + 1e-12
    assert validate_plan(exact, critical, masked, profile) == []
    assert validate_plan(relaxed, critical, masked, profile) == []


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.floats(0.0, 5.0),
       st.sampled_from(["t_ree_cpu", "t_tee_cpu", "t_ree_gpu", "t_deobf", "t_mask"]))
def test_raising_any_cost_never_lowers_the_optimum(seed, n, bump, field):
    rng = np.random.default_rng(seed)
    profile, units, critical, masked = random_problem(rng, n)
    base = plan_exact(profile, critical, masked, units).predicted_latency
    k = int(rng.integers(0, n))
    tensors = [TensorCost(**vars(t)) for t in profile.tensors]
    if getattr(tensors[k], field) is not None:
        setattr(tensors[k], field, getattr(tensors[k], field) + bump)
    raised = HardwareProfile(tensors, profile.t_switch, profile.tee_memory)
    assert plan_exact(raised, critical, masked, units).predicted_latency >= base - 1e-12


def test_profile_and_plan_round_trip(tmp_path):
    g = default_graph(4, seed=None)
    prof = synthetic_profile(g, seed=3)
    prof.save(tmp_path / "p.json")
    back = HardwareProfile.load(tmp_path / "p.json")
    assert back.to_dict() == prof.to_dict()
    plan = plan_exact(prof, {"conv2", "fc2"}, {"conv1"}, chain_units(g))
    again = PlacementPlan.from_dict(plan.to_dict())
    assert again.to_dict() == plan.to_dict()
    with pytest.raises(ValueError):
        HardwareProfile.from_dict({"format": "other"})
    with pytest.raises(ValueError):
        TensorCost("x", -1.0, 1.0)


def test_synthetic_profile_prefers_cpu_for_small_work():
    g = default_graph(4, seed=None)
    flops = tensor_flops(g)
    assert flops["fc2"] == 32 * 4 and flops["conv1"] == 8 * 16 * 16 * 9
    prof = synthetic_profile(g, seed=0)
    assert prof["fc2"].t_ree_gpu > prof["fc2"].t_ree_cpu
    big = synthetic_profile(g, seed=0, scale=1000.0)
    assert big["conv2"].t_ree_gpu < big["conv2"].t_ree_cpu
    assert synthetic_profile(g, seed=1).to_dict() == synthetic_profile(g, seed=1).to_dict()
