"""Tensor criticality: update-weighted gradient importance times attention transition.

A tensor's score is the product of two factors:

* intrinsic importance -- the per-weight average contribution of its updates
  to reducing the training loss, accumulated over the fine-tune replay;
* attention transition -- one minus the cosine similarity between the
  tensor's Grad-CAM map under the victim and under the public model.

:func:`select_critical_tensors` turns the ranking into a shield set using an
attack simulator and early-epoch convergence statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence

import numpy as np

from . import engine
from .data import ReplayLog
from .engine import EpochRecord, ModelGraph
from .errors import Unsatisfiable


def intrinsic_importance(replay: ReplayLog, tensor_id: str) -> float:
    """Sum over epochs of ``max(0, -(1/n) * sum_i g_i * dw_i)``."""
    total = 0.0
    for g, d in replay.tensor_pairs(tensor_id):
        # g.dw < 0 when the update lowers the loss
        total += max(0.0, -float(np.dot(g, d)) / g.size)
    return total


def one_shot_replay(victim: ModelGraph, public: ModelGraph, x: np.ndarray, y: np.ndarray) -> ReplayLog:
    """Single pseudo-epoch: ``dw = w_vic - w_pub`` and the victim's gradient on one batch."""
    _, grads = engine.backward(victim, x, y)
    pub = public.state()
    deltas = {nid: {k: v - pub[nid][k] for k, v in params.items()} for nid, params in victim.state().items()}
    return ReplayLog([EpochRecord(grads.param_grads, deltas)], one_shot=True)


# --------------------------------------------------------------------------
# Grad-CAM


@dataclass
class AttentionMap:
    tensor_id: str
    map: np.ndarray
    probe_id: int = 0

    @property
    def is_zero(self) -> bool:
        return not np.any(self.map)


def cam_from(activation: np.ndarray, gradient: np.ndarray) -> np.ndarray:
    """Grad-CAM map for one sample, L2-normalized unless all zero.

    ``activation``/``gradient`` are the tensor's output and the gradient of the
    predicted-class score w.r.t. it: ``(C, H, W)`` for conv tensors, ``(U,)``
    for dense ones. Dense tensors have no spatial axis, so their map is the
    per-unit ``|activation * gradient|``.
    """
    if activation.ndim == 3:
        alpha = gradient.mean(axis=(1, 2))
        cam = np.maximum(np.tensordot(alpha, activation, axes=1), 0.0).ravel()
    else:
        cam = np.abs(activation * gradient).ravel()
    norm = np.linalg.norm(cam)
    return cam / norm if norm > 0 else cam


def attention_maps(graph: ModelGraph, probes: np.ndarray, tensor_ids: Optional[Sequence[str]] = None) -> Dict[str, List[np.ndarray]]:
    """Maps for every requested linear tensor and every probe (one batched pass)."""
    tensor_ids = list(tensor_ids) if tensor_ids is not None else graph.linear_ids
    probes = np.asarray(probes, dtype=np.float64)
    fwd = engine.forward(graph, probes)
    pred = fwd.logits.argmax(axis=1)
    seed = np.zeros_like(fwd.logits)
    seed[np.arange(len(pred)), pred] = 1.0
    # samples are independent, so one batched pass yields per-sample gradients
    grads = engine.backprop(graph, fwd, seed)
    return {tid: [cam_from(fwd.activations[tid][b], grads.activation_grads[tid][b]) for b in range(len(probes))]
            for tid in tensor_ids}


def grad_cam(graph: ModelGraph, tensor_id: str, probe: np.ndarray, probe_id: int = 0) -> AttentionMap:
    maps = attention_maps(graph, np.asarray(probe)[None], [tensor_id])
    return AttentionMap(tensor_id, maps[tensor_id][0], probe_id)


def map_distance(a: np.ndarray, b: np.ndarray) -> float:
    """``1 - cos`` for non-negative normalized maps; one zero map -> 1, both -> 0."""
    za, zb = not np.any(a), not np.any(b)
    if za and zb:
        return 0.0
    if za or zb:
        return 1.0
    cos = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
    return float(min(1.0, max(0.0, 1.0 - cos)))


def attention_transition(victim: ModelGraph, public: ModelGraph, tensor_id: str, probes: np.ndarray) -> float:
    return _transitions(victim, public, probes, [tensor_id])[tensor_id]


def _transitions(victim: ModelGraph, public: ModelGraph, probes: np.ndarray, tensor_ids: Sequence[str]) -> Dict[str, float]:
    if len(probes) < 1:
        raise ValueError("at least one probe is required")
    mv = attention_maps(victim, probes, tensor_ids)
    mp = attention_maps(public, probes, tensor_ids)
    return {tid: float(np.mean([map_distance(a, b) for a, b in zip(mv[tid], mp[tid])])) for tid in tensor_ids}


# --------------------------------------------------------------------------
# report


@dataclass
class TensorCriticality:
    tensor_id: str
    intrinsic: float
    transition: float
    score: float
    param_count: int


@dataclass
class CriticalityReport:
    entries: List[TensorCriticality]
    config: dict = field(default_factory=dict)

    def ranking(self) -> List[str]:
        return [e.tensor_id for e in self.entries]

    def score_of(self, tensor_id: str) -> float:
        return next(e.score for e in self.entries if e.tensor_id == tensor_id)

    def to_dict(self) -> dict:
        return {"config": self.config, "entries": [vars(e) for e in self.entries]}

    @classmethod
    def from_dict(cls, doc: dict) -> "CriticalityReport":
        return cls([TensorCriticality(**e) for e in doc["entries"]], doc.get("config", {}))


def criticality_scores(victim: ModelGraph, public: ModelGraph, replay: ReplayLog, probes: np.ndarray,
                       intrinsic_only: bool = False, config: Optional[dict] = None) -> CriticalityReport:
    """Score every linear tensor; descending score, ties keep node order.

    ``intrinsic_only`` forces the transition factor to 1 (baseline ranking).
    """
    if victim.structure_hash() != public.structure_hash():
        raise ValueError("victim and public graphs differ in structure")
    ids = victim.linear_ids
    trans = {tid: 1.0 for tid in ids} if intrinsic_only else _transitions(victim, public, probes, ids)
    entries = []
    for tid in ids:
        intrinsic = intrinsic_importance(replay, tid)
        entries.append(TensorCriticality(tid, intrinsic, trans[tid], intrinsic * trans[tid], victim.param_count(tid)))
    order = sorted(range(len(entries)), key=lambda i: (-entries[i].score, i))
    snapshot = {"replay_epochs": len(replay), "one_shot": replay.one_shot, "probes": int(len(probes)),
                "intrinsic_only": intrinsic_only}
    snapshot.update(config or {})
    return CriticalityReport([entries[i] for i in order], snapshot)


# --------------------------------------------------------------------------
# selection by convergence speed


@dataclass
class SelectionConfig:
    m: int = 20
    baseline_epochs: int = 100
    full_epochs: int = 100
    tau: float = 0.05


@dataclass
class SelectionResult:
    selected: List[str]
    accuracy: float
    threshold: float
    no_shield_accuracy: float
    all_shield_accuracy: float
    k: int
    trials: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(vars(self))


def loss_reduction_rate(initial_loss: float, losses: Sequence[float], m: int) -> float:
    """Mean per-epoch loss drop over the first ``m`` epochs."""
    m = min(m, len(losses))
    return (initial_loss - losses[m - 1]) / m if m else 0.0


def select_critical_tensors(report: CriticalityReport, simulate: Callable, ms_threshold: float,
                            config: Optional[SelectionConfig] = None) -> SelectionResult:
    """Pick the shortest convincing score prefix, then drop low scorers while the threshold holds.

    ``simulate(shield_set, epochs)`` must return an object with
    ``initial_loss``, ``losses`` and ``accuracy`` (the MS accuracy).
    Raises :class:`Unsatisfiable` when even the all-shield attack exceeds
    ``ms_threshold``.
    """
    cfg = config or SelectionConfig()
    ranking = report.ranking()
    trials: List[dict] = []

    def run(shield: Iterable[str], epochs: int, stage: str):
        shield = frozenset(shield)
        res = simulate(shield, epochs)
        trials.append({"stage": stage, "shield": [t for t in ranking if t in shield], "epochs": epochs,
                       "initial_loss": res.initial_loss, "accuracy": res.accuracy})
        return res

    none = run((), cfg.baseline_epochs, "baseline-none")
    full = run(ranking, cfg.baseline_epochs, "baseline-all")
    if none.accuracy <= ms_threshold:
        return SelectionResult([], none.accuracy, ms_threshold, none.accuracy, full.accuracy, 0, trials)
    if full.accuracy > ms_threshold:
        raise Unsatisfiable("MS threshold below the all-shield attack accuracy", full.accuracy)

    ref_loss = full.initial_loss
    ref_rate = loss_reduction_rate(full.initial_loss, full.losses, cfg.m)
    selected, accuracy, k_final = list(ranking), full.accuracy, len(ranking)
    for k in range(1, len(ranking)):
        cand = ranking[:k]
        probe = run(cand, cfg.m, f"screen-k{k}")
        rate = loss_reduction_rate(probe.initial_loss, probe.losses, cfg.m)
        if probe.initial_loss < (1 - cfg.tau) * ref_loss or rate > ref_rate + cfg.tau * abs(ref_rate):
            continue
        confirm = run(cand, cfg.full_epochs, f"confirm-k{k}")
        if confirm.accuracy <= ms_threshold:
            selected, accuracy, k_final = cand, confirm.accuracy, k
            break

    # refinement: shed the lowest-ranked member while the threshold still holds
    while selected:
        trial = selected[:-1]
        res = run(trial, cfg.full_epochs, f"drop-{selected[-1]}")
        if res.accuracy > ms_threshold:
            break
        selected, accuracy = trial, res.accuracy
    return SelectionResult(selected, accuracy, ms_threshold, none.accuracy, full.accuracy, k_final, trials)
