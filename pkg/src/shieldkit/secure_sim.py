"""Two-world execution of a placement plan.

Critical tensors placed in the REE are obfuscated on the output side
(``W_obf = R @ W``, ``b_obf = R @ b``) and the TEE undoes the mixing with
``R^-1``. A masked feature headed into an obfuscated tensor is padded in the
TEE; because the tensor is linear the TEE removes the pad's contribution
``W @ p`` after deobfuscation.

Masking works on a fixed-point grid (multiples of ``2**-FRAC_BITS``) so that
``unmask(mask(x, p), p) == x`` holds bit-for-bit: every value involved is an
exact float64.

Time is simulated. Every event is priced from the hardware profile, so the
trace of a run reconciles exactly with the plan's predicted latency.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from . import engine
from .engine import LayerNode, ModelGraph
from .placement import REE, TEE, HardwareProfile, Option, PlacementPlan, priced_items, validate_plan

FRAC_BITS = 32
GRID = 2.0 ** -FRAC_BITS
# |x| + |pad| must stay below 2**(53 - FRAC_BITS) for sums on the grid to be exact
EXACT_LIMIT = 2.0 ** (53 - FRAC_BITS)
PAD_SCALE = 64.0
MAX_COND = 1e3
MAX_RESAMPLES = 16
CATEGORIES = ("cal", "comm", "mask", "deobf", "switch")
BREAKDOWN_COLUMNS = {"Cal.": ("cal",), "Comm.": ("comm", "switch"), "Mask.": ("mask",), "Deobf.": ("deobf",)}


class SecureSimError(RuntimeError):
    pass


class PadReuseError(SecureSimError):
    """A one-time pad was used twice."""


class AuditViolation(SecureSimError):
    pass


# --------------------------------------------------------------------------
# obfuscation


@dataclass
class ObfuscationKey:
    tensor_id: str
    R: np.ndarray
    R_inv: np.ndarray
    seed: int

    def __post_init__(self):
        n = self.R.shape[0]
        if self.R.shape != (n, n) or self.R_inv.shape != (n, n):
            raise ValueError(f"{self.tensor_id}: key matrices must be square and matching")
        if np.max(np.abs(self.R @ self.R_inv - np.eye(n))) > 1e-9:
            raise ValueError(f"{self.tensor_id}: R_inv is not an inverse of R")

    @property
    def dim(self) -> int:
        return self.R.shape[0]


def output_dim(node: LayerNode) -> int:
    return int(node.params["weight"].shape[0])


def draw_key(tensor_id: str, dim: int, seed: int) -> ObfuscationKey:
    rng = engine.node_rng(seed, tensor_id)
    for _ in range(MAX_RESAMPLES):
        R = rng.standard_normal((dim, dim)) / math.sqrt(dim)
        if np.linalg.cond(R) > MAX_COND:
            continue
        R_inv = np.linalg.inv(R)
        if np.max(np.abs(R @ R_inv - np.eye(dim))) <= 1e-9:
            return ObfuscationKey(tensor_id, R, R_inv, seed)
    raise SecureSimError(f"{tensor_id}: no well-conditioned key after {MAX_RESAMPLES} draws")


def keygen(plan: PlacementPlan, graph: ModelGraph, seed: int) -> Dict[str, ObfuscationKey]:
    return {tid: draw_key(tid, output_dim(graph.node(tid)), seed)
            for tid, opt in plan.options.items() if opt.obfuscated}


def _mix(M: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Apply ``M`` along axis 0 of a weight/bias or axis 1 of an activation batch."""
    return np.tensordot(M, t, axes=(1, 0))


def obfuscate(weight: np.ndarray, bias: np.ndarray, key: ObfuscationKey) -> Tuple[np.ndarray, np.ndarray]:
    if weight.shape[0] != key.dim or bias.shape != (key.dim,):
        raise ValueError(f"{key.tensor_id}: key of dimension {key.dim} does not fit weight {weight.shape}")
    return _mix(key.R, weight), key.R @ bias


def deobfuscate_output(y_obf: np.ndarray, key: ObfuscationKey) -> np.ndarray:
    """``R^-1`` over the channel/unit axis of a batch (per spatial position for conv)."""
    if y_obf.shape[1] != key.dim:
        raise ValueError(f"{key.tensor_id}: output has {y_obf.shape[1]} channels, key has {key.dim}")
    return np.moveaxis(np.tensordot(key.R_inv, y_obf, axes=(1, 1)), 0, 1)


# --------------------------------------------------------------------------
# one-time pads


def to_grid(x: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(x, dtype=np.float64) / GRID) * GRID


@dataclass
class MaskPad:
    feature_id: str
    pad: np.ndarray
    nonce: int
    used: bool = False


class PadSource:
    """Seeded pad generator with a nonce audit.

    The generator is isolated here so a cryptographic source could replace it.
    """

    def __init__(self, seed: int = 0, scale: float = PAD_SCALE):
        self.seed = seed
        self.scale = scale
        self.nonce = 0
        self._seen: set = set()

    def draw(self, feature_id: str, like: np.ndarray) -> MaskPad:
        like = np.asarray(like)
        span = float(np.max(np.abs(like))) if like.size else 0.0
        # half-width: a power of two at least `scale` times the feature's magnitude
        width = 2.0 ** math.ceil(math.log2(max(span, 1.0) * self.scale))
        if span + width >= EXACT_LIMIT:
            raise SecureSimError(f"{feature_id}: feature magnitude {span:.3g} too large for exact masking")
        self.nonce += 1
        rng = np.random.default_rng([self.seed, zlib.crc32(feature_id.encode()), self.nonce])
        ticks = int(width / GRID)
        pad = rng.integers(-ticks, ticks, size=like.shape, endpoint=True).astype(np.float64) * GRID
        digest = hashlib.sha256(pad.tobytes()).digest()
        if digest in self._seen:
            raise PadReuseError(f"{feature_id}: pad repeated at nonce {self.nonce}")
        self._seen.add(digest)
        return MaskPad(feature_id, pad, self.nonce)


def mask(feature: np.ndarray, pad: MaskPad, strict: bool = True) -> np.ndarray:
    """Additive pad on the fixed-point grid; each pad may be used once."""
    if pad.used:
        raise PadReuseError(f"{pad.feature_id}: pad with nonce {pad.nonce} already used")
    if strict and not np.any(pad.pad):
        raise SecureSimError(f"{pad.feature_id}: all-zero pad rejected")
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != pad.pad.shape:
        raise ValueError(f"{pad.feature_id}: pad shape {pad.pad.shape} != feature shape {feature.shape}")
    x = to_grid(feature)
    if np.max(np.abs(x), initial=0.0) + np.max(np.abs(pad.pad), initial=0.0) >= EXACT_LIMIT:
        raise SecureSimError(f"{pad.feature_id}: values out of exact masking range")
    pad.used = True
    return x + pad.pad


def unmask(masked: np.ndarray, pad: MaskPad) -> np.ndarray:
    return masked - pad.pad


# --------------------------------------------------------------------------
# trace


@dataclass
class TraceEvent:
    unit_id: str
    world: str
    category: str
    seconds: float
    wall: Optional[float] = None

    def to_dict(self) -> dict:
        d = {"unit_id": self.unit_id, "world": self.world, "category": self.category, "seconds": self.seconds}
        if self.wall is not None:
            d["wall"] = self.wall
        return d


@dataclass
class ExecutionTrace:
    events: List[TraceEvent] = field(default_factory=list)

    def add(self, unit_id, world, category, seconds, wall=None):
        if category not in CATEGORIES:
            raise ValueError(f"unknown trace category {category!r}")
        self.events.append(TraceEvent(unit_id, world, category, float(seconds), wall))

    def of(self, category: str) -> List[TraceEvent]:
        return [e for e in self.events if e.category == category]

    def dumps(self) -> str:
        return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in self.events)

    @classmethod
    def loads(cls, text: str) -> "ExecutionTrace":
        tr = cls()
        for line in text.splitlines():
            if line.strip():
                d = json.loads(line)
                tr.add(d["unit_id"], d["world"], d["category"], d["seconds"], d.get("wall"))
        return tr

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "ExecutionTrace":
        return cls.loads(Path(path).read_text())


def trace_cost(trace: ExecutionTrace, profile: Optional[HardwareProfile] = None) -> float:
    """Total simulated seconds (exactly rounded sum, same as the plan's predicted latency)."""
    return math.fsum(e.seconds for e in trace.events)


def breakdown(trace: ExecutionTrace) -> Dict[str, float]:
    out = {col: math.fsum(e.seconds for e in trace.events if e.category in cats)
           for col, cats in BREAKDOWN_COLUMNS.items()}
    out["Total"] = trace_cost(trace)
    return out


# --------------------------------------------------------------------------
# REE world with an audit hook


@dataclass
class AuditReport:
    plaintext_params: set
    exposed_features: set
    violations: List[str]

    @property
    def clean(self) -> bool:
        return not self.violations


class ReeWorld:
    """Everything that is stored in or passes through the REE, for auditing."""

    def __init__(self):
        self.records: List[Tuple[str, str, np.ndarray]] = []
        self.plaintext_params: set = set()
        self.exposed_features: set = set()

    def put_param(self, tensor_id: str, name: str, arr: np.ndarray, plaintext: bool):
        self.records.append(("param", f"{tensor_id}/{name}", arr))
        if plaintext:
            self.plaintext_params.add(tensor_id)

    def put_feature(self, origin: str, arr: np.ndarray, plaintext: bool):
        self.records.append(("feature", origin, arr))
        if plaintext and origin != "input":
            self.exposed_features.add(origin)


class Auditor:
    """Holds TEE secrets and checks that none of them shows up in the REE."""

    def __init__(self):
        self.secrets: List[Tuple[str, np.ndarray]] = []

    def protect(self, label: str, arr: np.ndarray):
        if np.any(arr):  # an all-zero array carries nothing to hide
            self.secrets.append((label, np.array(arr, copy=True)))

    def check(self, world: ReeWorld) -> List[str]:
        out = []
        for label, secret in self.secrets:
            for kind, where, arr in world.records:
                if arr.shape == secret.shape and np.array_equal(arr, secret):
                    out.append(f"plaintext {label} found in REE {kind} {where}")
        return out


# --------------------------------------------------------------------------
# execution


@dataclass
class SecureRun:
    logits: np.ndarray
    trace: ExecutionTrace
    audit: AuditReport


def _linear(node: LayerNode, x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray]) -> np.ndarray:
    if node.kind == "conv2d":
        out, _ = engine.conv2d_forward(x, weight, bias, node.hyper.get("stride", 1), node.hyper.get("padding", 0))
        return out
    out = x @ weight.T
    return out + bias if bias is not None else out


def run_secure_inference(graph: ModelGraph, plan: PlacementPlan, keys: Dict[str, ObfuscationKey],
                         masked_set: Iterable[str], profile: HardwareProfile, x: np.ndarray,
                         pads: Optional[PadSource] = None, wallclock: bool = False,
                         strict_audit: bool = True) -> SecureRun:
    masked_set = frozenset(masked_set)
    if masked_set != plan.masked:
        raise SecureSimError("masked set disagrees with the plan")
    if plan.sequence != [n.id for n in graph.nodes]:
        raise SecureSimError("plan sequence does not match the graph")
    problems = validate_plan(plan, plan.critical, plan.masked, profile)
    if problems:
        raise SecureSimError(f"invalid plan: {problems[0].rule} at {problems[0].unit}: {problems[0].message}")
    missing = [t for t, o in plan.options.items() if o.obfuscated and t not in keys]
    if missing:
        raise SecureSimError(f"no obfuscation key for {missing}")
    pads = pads or PadSource()

    priced = priced_items(plan, profile)
    costs = {(u, c): s for u, c, s in priced if c != "switch"}
    switch_s = profile.t_switch
    trace, ree, auditor = ExecutionTrace(), ReeWorld(), Auditor()

    # parameter placement happens once, before any input arrives
    obf = {}
    for tid, opt in plan.options.items():
        node = graph.node(tid)
        if opt.obfuscated:
            obf[tid] = obfuscate(node.params["weight"], node.params["bias"], keys[tid])
            ree.put_param(tid, "weight", obf[tid][0], plaintext=False)
            ree.put_param(tid, "bias", obf[tid][1], plaintext=False)
        elif opt.world == REE:
            for name, arr in node.params.items():
                ree.put_param(tid, name, arr, plaintext=True)
        if opt.shielded:
            for name, arr in node.params.items():
                auditor.protect(f"{tid}/{name}", arr)

    h = np.asarray(x, dtype=np.float64)
    origin = "input"
    prev_world = None
    for node in graph.nodes:
        uid = node.id
        world = plan.worlds[uid]
        masking = node.linear and plan.options[uid].obfuscated and plan.input_masked(uid)
        if masking:
            # the pad is applied in the TEE before the feature leaves it; a feature the
            # plan already produced in plaintext REE is exposed regardless of the pad
            if origin not in ree.exposed_features:
                auditor.protect(f"feature {origin}", h)
            pad = pads.draw(origin, h)
            h_in = mask(h, pad)
            trace.add(uid, TEE, "mask", costs[(uid, "mask")])
        if prev_world is not None and world != prev_world:
            trace.add(uid, world, "switch", switch_s)
        t0 = time.perf_counter() if wallclock else None
        if not node.linear:
            h, _ = engine._forward_node(node, h)
            if world == REE:
                ree.put_feature(origin, h, plaintext=True)
            trace.add(uid, world, "cal", 0.0, None if t0 is None else time.perf_counter() - t0)
            prev_world = world
            continue

        opt = plan.options[uid]
        if opt is Option.TEE_CPU:
            h = _linear(node, h, node.params["weight"], node.params["bias"])
            trace.add(uid, TEE, "cal", costs[(uid, "cal")], None if t0 is None else time.perf_counter() - t0)
        elif not opt.obfuscated:
            ree.put_feature(origin, h, plaintext=True)
            h = _linear(node, h, node.params["weight"], node.params["bias"])
            ree.put_feature(uid, h, plaintext=True)
            trace.add(uid, REE, "cal", costs[(uid, "cal")], None if t0 is None else time.perf_counter() - t0)
        else:
            key = keys[uid]
            w_obf, b_obf = obf[uid]
            if not masking:
                h_in = h
            ree.put_feature(origin, h_in, plaintext=not masking)
            y_obf = _linear(node, h_in, w_obf, b_obf)
            ree.put_feature(uid, y_obf, plaintext=False)
            trace.add(uid, REE, "cal", costs[(uid, "cal")], None if t0 is None else time.perf_counter() - t0)
            h = deobfuscate_output(y_obf, key)
            if masking:
                h = h - _linear(node, pad.pad, node.params["weight"], None)
            trace.add(uid, TEE, "deobf", costs[(uid, "deobf")])
        origin = uid
        prev_world = world

    violations = auditor.check(ree)
    if ree.plaintext_params != set(plan.leaked):
        violations.append(f"plaintext parameters in REE {sorted(ree.plaintext_params)} != leaked set {sorted(plan.leaked)}")
    report = AuditReport(ree.plaintext_params, ree.exposed_features, violations)
    if strict_audit and violations:
        raise AuditViolation("; ".join(violations))
    return SecureRun(h, trace, report)


def native_logits(graph: ModelGraph, x: np.ndarray) -> np.ndarray:
    return engine.forward(graph, x, keep_caches=False).logits
