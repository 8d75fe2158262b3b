"""Attacker simulation: surrogate construction, model stealing, membership inference.

The attacker knows the architecture, holds the public checkpoint, copies every
linear tensor that runs in the REE in plaintext, and fine-tunes the result on
a small query set labelled by the victim. For membership inference it trains a
linear probe on the surrogate's loss/confidence plus summary statistics of the
victim features it can observe.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import engine
from .data import Checkpoint, DatasetBundle
from .engine import ModelGraph, TrainConfig
from .placement import HardwareProfile, Option, PlacementPlan, build_plan, chain_units

MS_EPOCHS = 100
MS_CONFIG = TrainConfig(lr=0.01, momentum=0.5, weight_decay=5e-4, batch_size=64)
PROBE_CONFIG = TrainConfig(lr=0.1, momentum=0.5, weight_decay=0.0, batch_size=64)
PROBE_EPOCHS = 200


# --------------------------------------------------------------------------
# leakage


@dataclass(frozen=True)
class LeakModel:
    leaked: FrozenSet[str]
    protected: FrozenSet[str]

    def __post_init__(self):
        if self.leaked & self.protected:
            raise ValueError(f"tensors both leaked and protected: {sorted(self.leaked & self.protected)}")

    @property
    def all(self) -> FrozenSet[str]:
        return self.leaked | self.protected

    @classmethod
    def from_shield(cls, linear_ids: Iterable[str], shield: Iterable[str]) -> "LeakModel":
        linear_ids, shield = frozenset(linear_ids), frozenset(shield)
        unknown = shield - linear_ids
        if unknown:
            raise ValueError(f"unknown tensors in shield set: {sorted(unknown)}")
        return cls(linear_ids - shield, shield)

    @classmethod
    def from_plan(cls, plan: PlacementPlan, pessimistic: bool = False) -> "LeakModel":
        """Plaintext REE tensors leak; with ``pessimistic`` obfuscated ones leak too."""
        leaked = {t for t, o in plan.options.items() if not o.shielded or (pessimistic and o.obfuscated)}
        return cls(frozenset(leaked), frozenset(plan.options) - frozenset(leaked))


def leaked_fraction(graph: ModelGraph, leak: LeakModel) -> float:
    total = sum(graph.param_count(t) for t in leak.all)
    return sum(graph.param_count(t) for t in leak.leaked) / total if total else 0.0


def build_surrogate(public: Checkpoint, victim: Checkpoint, leak: LeakModel) -> Checkpoint:
    if public.structure_hash != victim.structure_hash:
        raise ValueError("public and victim checkpoints have different structures")
    if not leak.all <= set(victim.params):
        raise ValueError(f"leak model names tensors absent from the checkpoint: {sorted(leak.all - set(victim.params))}")
    params = {}
    for node, table in public.params.items():
        src = victim.params[node] if node in leak.leaked else table
        params[node] = {k: v.copy() for k, v in src.items()}
    return Checkpoint(public.structure_hash, params, "surrogate")


# --------------------------------------------------------------------------
# model stealing


@dataclass
class MSResult:
    surrogate: Checkpoint
    initial_loss: float
    losses: List[float]
    accuracy: float
    epochs: int

    def __post_init__(self):
        if len(self.losses) != self.epochs:
            raise ValueError("loss trajectory length must equal epochs")


def pseudo_label(victim: ModelGraph, x: np.ndarray) -> np.ndarray:
    return engine.predict(victim, x).argmax(axis=1)


def model_stealing(surrogate: ModelGraph, victim: ModelGraph, query: np.ndarray, test: Tuple[np.ndarray, np.ndarray],
                   epochs: int = MS_EPOCHS, config: Optional[TrainConfig] = None, seed: int = 0) -> MSResult:
    """Fine-tune the surrogate on victim-labelled queries; accuracy on the test split.

    ``losses[e]`` is the surrogate's loss on the whole query set after epoch ``e``.
    """
    config = config or MS_CONFIG
    labels = pseudo_label(victim, query)

    def query_loss(g: ModelGraph) -> float:
        return engine.cross_entropy(engine.forward(g, query, keep_caches=False).logits, labels)[0]

    initial = query_loss(surrogate)
    losses: List[float] = []
    res = engine.train(surrogate, query, labels, epochs, config, seed=seed,
                       on_epoch=lambda e, g, _: losses.append(query_loss(g)))
    acc = engine.accuracy(res.graph, *test)
    return MSResult(Checkpoint.from_graph(res.graph, "surrogate"), initial, losses, acc, epochs)


class MSSimulator:
    """``simulate(shield_set, epochs)`` for tensor selection, memoized per argument pair."""

    def __init__(self, graph: ModelGraph, public: Checkpoint, victim: Checkpoint, bundle: DatasetBundle,
                 config: Optional[TrainConfig] = None, seed: int = 0):
        self.graph = graph
        self.public, self.victim = public, victim
        self.victim_graph = victim.apply(graph)
        self.query = bundle.x["query"]
        self.test = bundle.split("test")
        self.config = config or MS_CONFIG
        self.seed = seed
        self._cache: Dict[Tuple[FrozenSet[str], int], MSResult] = {}

    def run(self, leak: LeakModel, epochs: int) -> MSResult:
        key = (leak.leaked, epochs)
        if key not in self._cache:
            sur = build_surrogate(self.public, self.victim, leak).apply(self.graph)
            self._cache[key] = model_stealing(sur, self.victim_graph, self.query, self.test, epochs, self.config, self.seed)
        return self._cache[key]

    def __call__(self, shield: Iterable[str], epochs: int = MS_EPOCHS) -> MSResult:
        return self.run(LeakModel.from_shield(self.graph.linear_ids, shield), epochs)


# --------------------------------------------------------------------------
# membership inference


@dataclass
class MIAResult:
    accuracy: float
    features: List[str]
    n_eval: int
    train_accuracy: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")


def attack_features(surrogate: ModelGraph, victim: ModelGraph, x: np.ndarray, y: np.ndarray,
                    exposed: Sequence[str]) -> Tuple[np.ndarray, List[str]]:
    """Per-sample attacker features and their names."""
    logits = engine.forward(surrogate, x, keep_caches=False).logits
    cols = [engine.per_sample_loss(logits, y), engine.softmax(logits).max(axis=1)]
    names = ["surrogate_loss", "surrogate_confidence"]
    if exposed:
        acts = engine.forward(victim, x, keep_caches=False).activations
        for fid in exposed:
            a = acts[fid].reshape(len(x), -1)
            cols += [a.mean(axis=1), a.var(axis=1)]
            names += [f"{fid}_mean", f"{fid}_var"]
    return np.stack(cols, axis=1), names


def attack_splits(n_members: int, n_nonmembers: int, seed: int) -> Dict[str, np.ndarray]:
    """Disjoint index sets: the attacker's shadow split and a balanced evaluation split."""
    rng = np.random.default_rng(seed)
    non = rng.permutation(n_nonmembers)
    half = n_nonmembers // 2
    if n_members < 2 * half or half == 0:
        raise ValueError("need at least as many members as non-members, and two non-members")
    mem = rng.permutation(n_members)[:2 * half]
    return {"shadow_members": mem[:half], "shadow_nonmembers": non[:half],
            "eval_members": mem[half:2 * half], "eval_nonmembers": non[half:2 * half]}


def _probe(train_x, train_y, seed):
    mu, sd = train_x.mean(axis=0), train_x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    g = engine.build_graph([{"id": "probe", "kind": "dense", "out_features": 2}], (train_x.shape[1],), 2, seed=seed)
    res = engine.train(g, (train_x - mu) / sd, train_y, PROBE_EPOCHS, PROBE_CONFIG, seed=seed)
    return lambda z: engine.predict(res.graph, (z - mu) / sd).argmax(axis=1)


def _holdout_accuracy(tx: np.ndarray, ty: np.ndarray, cols: List[int], seed: int) -> float:
    """Two-fold accuracy of the probe on the attacker's own shadow split."""
    folds = np.array_split(np.random.default_rng(seed).permutation(len(ty)), 2)
    accs = []
    for k in range(2):
        train_idx, test_idx = folds[1 - k], folds[k]
        predict = _probe(tx[train_idx][:, cols], ty[train_idx], seed)
        accs.append(np.mean(predict(tx[test_idx][:, cols]) == ty[test_idx]))
    return float(np.mean(accs))


def mia_attack(surrogate: ModelGraph, victim: ModelGraph, exposed: Sequence[str],
               members: Tuple[np.ndarray, np.ndarray], nonmembers: Tuple[np.ndarray, np.ndarray],
               seed: int = 0) -> MIAResult:
    """Linear probe on surrogate loss/confidence plus stats of exposed victim features.

    Masked features are simply absent from ``exposed``; with nothing exposed
    the probe sees the surrogate signals alone. When features are exposed the
    attacker keeps them only if they improve held-out accuracy on its shadow
    split, so uninformative exposure cannot hurt it. ``features`` lists the
    columns the final probe used.
    """
    exposed = [f for f in victim.linear_ids if f in set(exposed)]
    fm, names = attack_features(surrogate, victim, *members, exposed)
    fn, _ = attack_features(surrogate, victim, *nonmembers, exposed)
    idx = attack_splits(len(fm), len(fn), seed)
    tx = np.concatenate([fm[idx["shadow_members"]], fn[idx["shadow_nonmembers"]]])
    ty = np.concatenate([np.ones(len(idx["shadow_members"]), np.int64), np.zeros(len(idx["shadow_nonmembers"]), np.int64)])
    ex = np.concatenate([fm[idx["eval_members"]], fn[idx["eval_nonmembers"]]])
    ey = np.concatenate([np.ones(len(idx["eval_members"]), np.int64), np.zeros(len(idx["eval_nonmembers"]), np.int64)])
    cols = [0, 1]
    if exposed:
        every = list(range(fm.shape[1]))
        if _holdout_accuracy(tx, ty, every, seed) > _holdout_accuracy(tx, ty, cols, seed):
            cols = every
    predict = _probe(tx[:, cols], ty, seed)
    return MIAResult(float(np.mean(predict(ex[:, cols]) == ey)), [names[c] for c in cols], len(ey),
                     float(np.mean(predict(tx[:, cols]) == ty)))


class MIASimulator:
    """``simulate(masked_set)`` for feature selection: every unmasked feature is exposed."""

    def __init__(self, graph: ModelGraph, surrogate: Checkpoint, victim: Checkpoint, bundle: DatasetBundle, seed: int = 0):
        self.features = graph.linear_ids
        self.surrogate = surrogate.apply(graph)
        self.victim = victim.apply(graph)
        self.members, self.nonmembers = bundle.split("members"), bundle.split("nonmembers")
        self.seed = seed
        self._cache: Dict[FrozenSet[str], MIAResult] = {}

    def run(self, exposed: Iterable[str]) -> MIAResult:
        key = frozenset(exposed)
        if key not in self._cache:
            self._cache[key] = mia_attack(self.surrogate, self.victim, sorted(key), self.members, self.nonmembers, self.seed)
        return self._cache[key]

    def __call__(self, masked: Iterable[str]) -> float:
        return self.run(set(self.features) - set(masked)).accuracy


def plan_exposure(plan: PlacementPlan) -> List[str]:
    """Features that reach the REE in plaintext when the plan executes."""
    linear = [u for u in plan.sequence if u in plan.options]
    out = []
    for i, tid in enumerate(linear):
        opt = plan.options[tid]
        seg_ree = any(plan.worlds[u] == "REE" for u in plan.sequence[plan.sequence.index(tid) + 1:
                                                                    (plan.sequence.index(linear[i + 1]) if i + 1 < len(linear) else None)])
        exposed = not opt.shielded or seg_ree
        if not exposed and i + 1 < len(linear):
            nxt = plan.options[linear[i + 1]]
            exposed = nxt.world == "REE" and not plan.input_masked(linear[i + 1])
        if exposed:
            out.append(tid)
    return out


# --------------------------------------------------------------------------
# defense report


@dataclass
class DefenseRow:
    name: str
    ms_accuracy: float
    mia_accuracy: float
    mia_accuracy_plan: float
    leaked_fraction: float
    predicted_latency: Optional[float]
    leaked: List[str]
    exposed: List[str]
    exposed_plan: List[str]

    def to_dict(self) -> dict:
        return dict(vars(self))


@dataclass
class DefenseReport:
    rows: List[DefenseRow]
    metadata: dict = field(default_factory=dict)

    def row(self, name: str) -> DefenseRow:
        return next(r for r in self.rows if r.name == name)

    def to_dict(self) -> dict:
        return {"rows": [r.to_dict() for r in self.rows], "metadata": self.metadata}

    @classmethod
    def from_dict(cls, doc: dict) -> "DefenseReport":
        return cls([DefenseRow(**r) for r in doc["rows"]], doc.get("metadata", {}))


def _baseline_plan(graph: ModelGraph, profile: HardwareProfile, shield_all: bool) -> Optional[PlacementPlan]:
    """No-shield: fastest plaintext option per tensor. All-shield: every tensor in the TEE."""
    options = {}
    for tid in graph.linear_ids:
        cost = profile[tid]
        if shield_all:
            if cost.mem > profile.tee_memory:
                return None
            options[tid] = Option.TEE_CPU
        else:
            plain = [(cost.t_ree_cpu, Option.REE_CPU)]
            if cost.t_ree_gpu is not None:
                plain.append((cost.t_ree_gpu, Option.REE_GPU))
            options[tid] = min(plain, key=lambda p: (p[0], p[1]))[1]
    critical = graph.linear_ids if shield_all else []
    return build_plan(options, chain_units(graph), profile, critical, [])


def evaluate_defense(plan: PlacementPlan, graph: ModelGraph, public: Checkpoint, victim: Checkpoint,
                     bundle: DatasetBundle, profile: HardwareProfile, seed: int = 0, ms_epochs: int = MS_EPOCHS,
                     pessimistic: bool = False, ms_config: Optional[TrainConfig] = None) -> DefenseReport:
    """MS/MIA accuracy, leaked-parameter fraction and latency for three configurations.

    ``mia_accuracy`` exposes every feature outside the masked set (the model
    used when choosing the mask); ``mia_accuracy_plan`` exposes exactly what
    reaches the REE in plaintext when the plan runs.
    """
    ms = MSSimulator(graph, public, victim, bundle, ms_config, seed)
    victim_graph = victim.apply(graph)
    members, nonmembers = bundle.split("members"), bundle.split("nonmembers")
    every = graph.linear_ids
    configs = [
        ("no-shield", LeakModel.from_shield(every, []), list(every), list(every), _baseline_plan(graph, profile, False)),
        ("all-shield", LeakModel.from_shield(every, every), [], [], _baseline_plan(graph, profile, True)),
        ("selective", LeakModel.from_plan(plan, pessimistic), [f for f in every if f not in plan.masked],
         plan_exposure(plan), plan),
    ]
    rows = []
    for name, leak, exposed, exposed_plan, p in configs:
        res = ms.run(leak, ms_epochs)
        sur = res.surrogate.apply(graph)
        mia = mia_attack(sur, victim_graph, exposed, members, nonmembers, seed)
        mia_plan = mia if exposed_plan == exposed else mia_attack(sur, victim_graph, exposed_plan, members, nonmembers, seed)
        rows.append(DefenseRow(name, res.accuracy, mia.accuracy, mia_plan.accuracy, leaked_fraction(graph, leak),
                               None if p is None else p.predicted_latency, sorted(leak.leaked), list(exposed),
                               list(exposed_plan)))
    return DefenseReport(rows, {"seed": seed, "ms_epochs": ms_epochs, "pessimistic": pessimistic})
