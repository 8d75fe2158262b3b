"""Latency-aware placement of linear tensors across the TEE/REE boundary.

Every linear tensor gets one of five execution options. Non-critical tensors
run in the REE in plaintext; critical ones run in the TEE or, obfuscated, in
the REE. Non-linear units have no option of their own: their world is derived
from the neighbouring linear tensors. Latency is the sum of per-option costs
plus ``t_switch`` for each world change along the executed sequence.

Two notes on the cost table. The masking term of an obfuscated option is
charged only when the feature entering the tensor is in the masked set (the
classic table charges it unconditionally; plans record ``mask_charging`` so
the difference is visible). The memory limit applies per tensor and binds
only the TEE option.
"""

from __future__ import annotations

import enum
import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .engine import ModelGraph

TEE, REE = "TEE", "REE"


class Option(enum.IntEnum):
    REE_CPU = 0
    REE_GPU = 1
    REE_CPU_OBF = 2
    REE_GPU_OBF = 3
    TEE_CPU = 4

    @property
    def world(self) -> str:
        return TEE if self is Option.TEE_CPU else REE

    @property
    def obfuscated(self) -> bool:
        return self in (Option.REE_CPU_OBF, Option.REE_GPU_OBF)

    @property
    def shielded(self) -> bool:
        return self.obfuscated or self is Option.TEE_CPU


PLAIN_OPTIONS = (Option.REE_CPU, Option.REE_GPU)
SHIELD_OPTIONS = (Option.REE_CPU_OBF, Option.REE_GPU_OBF, Option.TEE_CPU)


class PlacementError(ValueError):
    pass


class Unit(NamedTuple):
    id: str
    linear: bool


def chain_units(graph: ModelGraph) -> List[Unit]:
    return [Unit(n.id, n.linear) for n in graph.nodes]


# --------------------------------------------------------------------------
# hardware profile


@dataclass
class TensorCost:
    id: str
    t_ree_cpu: float
    t_tee_cpu: float
    t_ree_gpu: Optional[float] = None
    t_deobf: Optional[float] = None
    t_mask: Optional[float] = None
    mem: int = 0
    flops: int = 0

    def __post_init__(self):
        for name in ("t_ree_cpu", "t_tee_cpu", "t_ree_gpu", "t_deobf", "t_mask"):
            v = getattr(self, name)
            if v is not None and not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{self.id}: {name} must be a finite time >= 0")
        if self.mem < 0:
            raise ValueError(f"{self.id}: mem must be >= 0")


@dataclass
class HardwareProfile:
    tensors: List[TensorCost]
    t_switch: float
    tee_memory: int
    name: str = "profile"

    def __post_init__(self):
        if self.tee_memory <= 0:
            raise ValueError("tee_memory must be > 0")
        if not self.t_switch >= 0:
            raise ValueError("t_switch must be >= 0")
        self._index = {t.id: t for t in self.tensors}

    def __getitem__(self, tensor_id: str) -> TensorCost:
        try:
            return self._index[tensor_id]
        except KeyError:
            raise PlacementError(f"profile has no entry for tensor {tensor_id!r}") from None

    @property
    def ids(self) -> List[str]:
        return [t.id for t in self.tensors]

    def to_dict(self) -> dict:
        return {"format": "shieldkit.profile", "version": 1, "name": self.name, "t_switch": self.t_switch,
                "tee_memory": self.tee_memory, "tensors": [dict(vars(t)) for t in self.tensors]}

    @classmethod
    def from_dict(cls, doc: dict) -> "HardwareProfile":
        if doc.get("format") != "shieldkit.profile":
            raise ValueError("not a hardware profile document")
        return cls([TensorCost(**t) for t in doc["tensors"]], float(doc["t_switch"]), int(doc["tee_memory"]),
                   doc.get("name", "profile"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "HardwareProfile":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _components(cost: TensorCost, option: Option, masked: bool) -> Tuple[Tuple[str, float], ...]:
    """Priced pieces of one option, as (trace category, seconds)."""
    if option is Option.TEE_CPU:
        return (("cal", cost.t_tee_cpu),)
    compute = cost.t_ree_cpu if option in (Option.REE_CPU, Option.REE_CPU_OBF) else cost.t_ree_gpu
    if compute is None:
        raise PlacementError(f"{cost.id}: option {option.name} needs a GPU time in the profile")
    if not option.obfuscated:
        return (("cal", compute),)
    if cost.t_deobf is None:
        raise PlacementError(f"{cost.id}: option {option.name} needs a deobfuscation time in the profile")
    parts = (("cal", compute), ("deobf", cost.t_deobf))
    if masked:
        if cost.t_mask is None:
            raise PlacementError(f"{cost.id}: masked input needs a masking time in the profile")
        parts += (("mask", cost.t_mask),)
    return parts


def option_cost(tensor_id: str, option: Option, profile: HardwareProfile, feature_is_masked: bool = False,
                critical: Optional[bool] = None) -> float:
    option = Option(option)
    if critical is not None and option not in (SHIELD_OPTIONS if critical else PLAIN_OPTIONS):
        kind = "critical" if critical else "non-critical"
        raise PlacementError(f"{tensor_id}: option {option.name} is illegal for a {kind} tensor")
    return math.fsum(v for _, v in _components(profile[tensor_id], option, feature_is_masked))


# --------------------------------------------------------------------------
# plan structure


@dataclass
class PlacementPlan:
    options: Dict[str, Option]
    worlds: Dict[str, str]  # every unit, linear ones included
    sequence: List[str]
    critical: FrozenSet[str]
    masked: FrozenSet[str]
    predicted_latency: float = 0.0
    metadata: dict = field(default_factory=dict)

    def input_feature(self, tensor_id: str) -> Optional[str]:
        """Id of the feature entering a linear tensor (the previous linear tensor's output)."""
        prev = None
        for uid in self.sequence:
            if uid == tensor_id:
                return prev
            if uid in self.options:
                prev = uid
        raise KeyError(tensor_id)

    def input_masked(self, tensor_id: str) -> bool:
        feat = self.input_feature(tensor_id)
        return feat is not None and feat in self.masked and self.options[tensor_id].obfuscated

    @property
    def boundary(self) -> List[str]:
        """Features whose path from producer to consumer crosses worlds."""
        out, current, prev_world = [], None, None
        crossed = False
        for uid in self.sequence:
            w = self.worlds[uid]
            if uid in self.options:
                if current is not None and (crossed or w != prev_world):
                    out.append(current)
                current, crossed = uid, False
            elif current is not None and w != prev_world:
                crossed = True
            prev_world = w
        return out

    @property
    def leaked(self) -> List[str]:
        return [t for t, o in self.options.items() if not o.shielded]

    def to_dict(self) -> dict:
        return {"options": {k: v.name for k, v in self.options.items()}, "worlds": dict(self.worlds),
                "sequence": list(self.sequence), "critical": sorted(self.critical), "masked": sorted(self.masked),
                "predicted_latency": self.predicted_latency, "boundary": self.boundary, "metadata": self.metadata}

    @classmethod
    def from_dict(cls, doc: dict) -> "PlacementPlan":
        return cls({k: Option[v] for k, v in doc["options"].items()}, dict(doc["worlds"]), list(doc["sequence"]),
                   frozenset(doc["critical"]), frozenset(doc["masked"]), float(doc["predicted_latency"]),
                   dict(doc.get("metadata", {})))


def _segments(units: Sequence[Unit]) -> Tuple[List[str], List[str], List[List[str]]]:
    """Split a chain into (leading non-linears, linear ids, trailing non-linears per linear)."""
    lead, linear, segs = [], [], []
    for u in units:
        if u.linear:
            linear.append(u.id)
            segs.append([])
        elif linear:
            segs[-1].append(u.id)
        else:
            lead.append(u.id)
    return lead, linear, segs


def _segment_world(opt: Option, next_opt: Optional[Option], next_input_masked: bool) -> str:
    # after a TEE or obfuscated tensor the output lives (deobfuscated) in the TEE;
    # a masked feature headed into an obfuscated tensor is masked there too
    if opt.shielded:
        return TEE
    if next_opt is not None and next_opt.obfuscated and next_input_masked:
        return TEE
    return REE


def _switches(worlds: Sequence[str]) -> int:
    return sum(1 for a, b in zip(worlds, worlds[1:]) if a != b)


def build_plan(options: Dict[str, Option], units: Sequence[Unit], profile: HardwareProfile,
               critical: Iterable[str], masked: Iterable[str], metadata: Optional[dict] = None) -> PlacementPlan:
    """Derive non-linear worlds for a full option assignment and price it."""
    lead, linear, segs = _segments(units)
    masked = frozenset(masked)
    worlds = {u: REE for u in lead}
    for i, tid in enumerate(linear):
        opt = Option(options[tid])
        worlds[tid] = opt.world
        nxt = Option(options[linear[i + 1]]) if i + 1 < len(linear) else None
        seg_world = _segment_world(opt, nxt, tid in masked)
        for u in segs[i]:
            worlds[u] = seg_world
    plan = PlacementPlan({t: Option(options[t]) for t in linear}, worlds, [u.id for u in units],
                         frozenset(critical), masked, 0.0, dict(metadata or {}))
    plan.predicted_latency = predicted_latency(plan, profile)
    return plan


def priced_items(plan: PlacementPlan, profile: HardwareProfile) -> List[Tuple[str, str, float]]:
    """(unit id, category, seconds) in execution order -- the accounting basis."""
    items = []
    prev = None
    for uid in plan.sequence:
        w = plan.worlds[uid]
        if prev is not None and w != prev:
            items.append((uid, "switch", profile.t_switch))
        if uid in plan.options:
            for cat, v in _components(profile[uid], plan.options[uid], plan.input_masked(uid)):
                items.append((uid, cat, v))
        prev = w
    return items


def predicted_latency(plan: PlacementPlan, profile: HardwareProfile) -> float:
    """Sum of option costs plus ``t_switch`` per world change (exactly rounded sum)."""
    return math.fsum(v for _, _, v in priced_items(plan, profile))


def switch_count(plan: PlacementPlan) -> int:
    return _switches([plan.worlds[u] for u in plan.sequence])


# --------------------------------------------------------------------------
# solvers


def legal_options(cost: TensorCost, critical: bool, profile: HardwareProfile, input_masked: bool = False) -> List[Option]:
    out = []
    for opt in (SHIELD_OPTIONS if critical else PLAIN_OPTIONS):
        if opt is Option.TEE_CPU and cost.mem > profile.tee_memory:
            continue
        try:
            _components(cost, opt, input_masked)
        except PlacementError:
            continue
        out.append(opt)
    if not out:
        raise PlacementError(f"{cost.id}: no feasible execution option "
                             f"({'critical' if critical else 'non-critical'}, mem={cost.mem}, M={profile.tee_memory})")
    return sorted(out)


def _problem(profile: HardwareProfile, critical, masked, units):
    critical, masked = frozenset(critical), frozenset(masked)
    if units is None:
        units = [Unit(t, True) for t in profile.ids]
    units = list(units)
    _, linear, _ = _segments(units)
    unknown = (critical | masked) - set(linear)
    if unknown:
        raise PlacementError(f"unknown tensors in critical/masked sets: {sorted(unknown)}")
    inputs = [None] + linear[:-1]
    masked_in = [inp is not None and inp in masked for inp in inputs]
    legal = [legal_options(profile[t], t in critical, profile, masked_in[i]) for i, t in enumerate(linear)]
    return critical, masked, units, linear, masked_in, legal


def plan_relaxed(profile: HardwareProfile, critical: Iterable[str], masked: Iterable[str] = (),
                 units: Optional[Sequence[Unit]] = None) -> PlacementPlan:
    """Per-tensor argmin of option cost, switch time ignored while choosing."""
    critical, masked, units, linear, masked_in, legal = _problem(profile, critical, masked, units)
    options = {}
    for i, tid in enumerate(linear):
        costs = [option_cost(tid, o, profile, masked_in[i] and o.obfuscated) for o in legal[i]]
        options[tid] = legal[i][int(np.argmin(costs))]  # argmin keeps the lowest index on ties
    return build_plan(options, units, profile, critical, masked, {"solver": "relaxed", "mask_charging": "selective"})


def plan_exact(profile: HardwareProfile, critical: Iterable[str], masked: Iterable[str] = (),
               units: Optional[Sequence[Unit]] = None) -> PlacementPlan:
    """Globally optimal plan by dynamic programming over (tensor, option).

    Ties go to the lexicographically smallest option vector.
    """
    critical, masked, units, linear, masked_in, legal = _problem(profile, critical, masked, units)
    lead, _, segs = _segments(units)
    n = len(linear)
    if n == 0:
        return build_plan({}, units, profile, critical, masked, {"solver": "exact"})
    ts = profile.t_switch

    def node_cost(i, o):
        return option_cost(linear[i], o, profile, masked_in[i] and o.obfuscated)

    def hop(i, o, nxt):
        """Switches from linear i (option o) through its trailing non-linears to linear i+1."""
        seg_w = _segment_world(o, nxt, linear[i] in masked)
        path = [o.world] + ([seg_w] if segs[i] else []) + ([nxt.world] if nxt is not None else [])
        return _switches(path) * ts

    # cost-to-go, computed backwards so the forward pass can break ties by option index
    togo: List[Dict[Option, float]] = [dict() for _ in range(n)]
    for o in legal[n - 1]:
        togo[n - 1][o] = node_cost(n - 1, o) + hop(n - 1, o, None)
    for i in range(n - 2, -1, -1):
        for o in legal[i]:
            togo[i][o] = node_cost(i, o) + min(hop(i, o, nx) + togo[i + 1][nx] for nx in legal[i + 1])

    def entry(o):
        return (ts if lead and o.world != REE else 0.0) + togo[0][o]

    best = min(entry(o) for o in legal[0])
    choice = [next(o for o in legal[0] if entry(o) == best)]
    for i in range(1, n):
        prev = choice[-1]
        vals = {nx: hop(i - 1, prev, nx) + togo[i][nx] for nx in legal[i]}
        low = min(vals.values())
        choice.append(next(nx for nx in legal[i] if vals[nx] == low))
    plan = build_plan(dict(zip(linear, choice)), units, profile, critical, masked,
                      {"solver": "exact", "mask_charging": "selective", "objective": best})
    return plan


def plan_brute_force(profile: HardwareProfile, critical: Iterable[str], masked: Iterable[str] = (),
                     units: Optional[Sequence[Unit]] = None) -> PlacementPlan:
    """Exhaustive search over all legal assignments (small chains only)."""
    critical, masked, units, linear, masked_in, legal = _problem(profile, critical, masked, units)
    best = None
    for combo in itertools.product(*legal):
        plan = build_plan(dict(zip(linear, combo)), units, profile, critical, masked, {"solver": "brute-force"})
        if best is None or plan.predicted_latency < best.predicted_latency:
            best = plan
    return best


# --------------------------------------------------------------------------
# validation


@dataclass
class Violation:
    rule: str
    unit: str
    message: str


def validate_plan(plan: PlacementPlan, critical: Iterable[str], masked: Iterable[str],
                  profile: HardwareProfile) -> List[Violation]:
    critical, masked = frozenset(critical), frozenset(masked)
    out: List[Violation] = []
    linear_seq = [u for u in plan.sequence if u in plan.options]
    for tid in profile.ids:
        if tid not in plan.options:
            out.append(Violation("correctness", tid, "linear tensor has no option"))
    for tid, opt in plan.options.items():
        if tid not in profile.ids:
            out.append(Violation("correctness", tid, "option for a tensor absent from the profile"))
            continue
        cost = profile[tid]
        if opt is Option.TEE_CPU and cost.mem > profile.tee_memory:
            out.append(Violation("memory", tid, f"needs {cost.mem} bytes, TEE has {profile.tee_memory}"))
        if tid in critical and opt not in SHIELD_OPTIONS:
            out.append(Violation("critical-shielded", tid, f"critical tensor placed {opt.name}"))
        if tid not in critical and opt not in PLAIN_OPTIONS:
            out.append(Violation("non-critical-in-ree", tid, f"non-critical tensor placed {opt.name}"))
        if plan.worlds.get(tid) != opt.world:
            out.append(Violation("world", tid, f"world {plan.worlds.get(tid)} disagrees with {opt.name}"))
        try:
            _components(cost, opt, plan.input_masked(tid))
        except PlacementError as exc:
            out.append(Violation("profile", tid, str(exc)))
    # non-linear units after an obfuscated tensor, and around masked crossings, sit in the TEE
    prev_linear = None
    for idx, uid in enumerate(plan.sequence):
        if uid in plan.options:
            prev_linear = uid
            continue
        if prev_linear is not None and plan.options[prev_linear].obfuscated and plan.worlds.get(uid) != TEE:
            out.append(Violation("nonlinear-after-obfuscated", uid, f"follows obfuscated {prev_linear} but runs in REE"))
        nxt = next((u for u in plan.sequence[idx + 1:] if u in plan.options), None)
        if (prev_linear is not None and prev_linear in masked and nxt is not None
                and plan.options[nxt].obfuscated and plan.worlds.get(uid) != TEE):
            out.append(Violation("mask-in-tee", uid, f"masked feature {prev_linear} must be (un)masked in the TEE"))
    if linear_seq != [t for t in profile.ids if t in plan.options]:
        out.append(Violation("correctness", "-", "plan order disagrees with profile order"))
    return out


# --------------------------------------------------------------------------
# synthetic profiles


def tensor_flops(graph: ModelGraph) -> Dict[str, int]:
    """Multiply-accumulates per sample for each linear tensor."""
    shapes = graph.shapes()
    out = {}
    for n in graph.nodes:
        if n.kind == "conv2d":
            c, h, w = shapes[n.id]
            k = n.hyper.get("kernel", 3)
            out[n.id] = c * h * w * n.hyper["in_channels"] * k * k
        elif n.kind == "dense":
            out[n.id] = n.hyper["in_features"] * n.hyper["out_features"]
    return out


@dataclass
class DeviceModel:
    """Throughputs (MAC/s) and fixed overheads (s) of a simulated board."""

    cpu_rate: float = 2.0e8
    gpu_rate: float = 2.0e9
    gpu_launch: float = 4.0e-4
    tee_slowdown: float = 1.25
    deobf_rate: float = 1.0e9
    mask_rate: float = 4.0e8
    t_switch: float = 5.0e-5
    tee_memory: int = 64 * 1024 * 1024
    jitter: float = 0.1
    has_gpu: bool = True


def synthetic_profile(graph: ModelGraph, seed: int = 0, device: Optional[DeviceModel] = None,
                      scale: float = 1.0, name: str = "synthetic") -> HardwareProfile:
    """Seeded profile where the GPU only pays off above a FLOP threshold.

    ``scale`` multiplies every tensor's work, standing in for larger inputs.
    """
    device = device or DeviceModel()
    rng = np.random.default_rng(seed)
    shapes = graph.shapes()
    flops = tensor_flops(graph)
    prev_out = int(np.prod(graph.input_shape))
    tensors = []
    for n in graph.nodes:
        out_size = int(np.prod(shapes[n.id]))
        if not n.linear:
            prev_out = out_size
            continue
        work = flops[n.id] * scale

        def j():
            return float(rng.uniform(1 - device.jitter, 1 + device.jitter))

        cpu = work / device.cpu_rate * j()
        out_dim = n.hyper.get("out_channels", n.hyper.get("out_features"))
        tensors.append(TensorCost(
            id=n.id,
            t_ree_cpu=cpu,
            t_tee_cpu=cpu * device.tee_slowdown * j(),
            t_ree_gpu=(device.gpu_launch + work / device.gpu_rate) * j() if device.has_gpu else None,
            t_deobf=out_size * out_dim * scale / device.deobf_rate * j(),
            t_mask=2 * (prev_out + out_size) * scale / device.mask_rate * j(),
            mem=8 * (n.param_count + int((prev_out + out_size) * scale)),
            flops=int(work),
        ))
        prev_out = out_size
    return HardwareProfile(tensors, device.t_switch, device.tee_memory, name)
