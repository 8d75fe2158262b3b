"""Membership-privacy scoring of intermediate features via Jensen-Shannon divergence."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import engine
from .engine import ModelGraph
from .errors import Unsatisfiable

BINS = 64
EPS_SMOOTH = 1e-9


@dataclass
class Histogram:
    bin_edges: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
        self.mass = np.asarray(self.mass, dtype=np.float64)
        if len(self.bin_edges) != len(self.mass) + 1:
            raise ValueError("need len(bin_edges) == len(mass) + 1")
        if np.any(np.diff(self.bin_edges) < 0):
            raise ValueError("bin edges must be ascending")
        if np.any(self.mass < 0) or abs(self.mass.sum() - 1.0) > 1e-12:
            raise ValueError("mass must be non-negative and sum to 1")


def histogram(values: np.ndarray, edges: np.ndarray, eps: float = EPS_SMOOTH) -> Histogram:
    """Normalized histogram over fixed edges, smoothed so every bin holds >= ``eps``."""
    counts, _ = np.histogram(np.ravel(values), bins=edges)
    p = counts / max(counts.sum(), 1)
    mass = p * (1.0 - len(p) * eps) + eps
    return Histogram(edges, mass / mass.sum())


def jsd(p: Histogram, q: Histogram) -> float:
    """Base-2 Jensen-Shannon divergence, in [0, 1]."""
    if p.bin_edges.shape != q.bin_edges.shape or not np.array_equal(p.bin_edges, q.bin_edges):
        raise ValueError("histograms have different bin edges")
    a, b = p.mass, q.mass
    s = a + b  # x / m written as 2x / (a + b) so subnormal masses cannot underflow m to zero

    def kl(x):
        nz = x > 0
        return float(np.sum(x[nz] * np.log2(2.0 * x[nz] / s[nz])))

    return float(min(1.0, max(0.0, 0.5 * kl(a) + 0.5 * kl(b))))


def _pair(member_vals: np.ndarray, nonmember_vals: np.ndarray, bins: int, eps: float) -> Tuple[Histogram, Histogram]:
    lo = min(member_vals.min(), nonmember_vals.min())
    hi = max(member_vals.max(), nonmember_vals.max())
    if not hi > lo:
        edges = np.array([lo, lo + 1.0])  # constant population: one degenerate bin
        one = Histogram(edges, np.ones(1))
        return one, one
    edges = np.linspace(lo, hi, bins + 1)
    return histogram(member_vals, edges, eps), histogram(nonmember_vals, edges, eps)


def feature_populations(graph: ModelGraph, x: np.ndarray, y: np.ndarray, feature_ids: Sequence[str],
                        batch_size: int = 200) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """Pooled (activation, per-sample-loss gradient) values for each feature."""
    acts: Dict[str, List[np.ndarray]] = {f: [] for f in feature_ids}
    grads: Dict[str, List[np.ndarray]] = {f: [] for f in feature_ids}
    for i in range(0, len(x), batch_size):
        xb, yb = x[i:i + batch_size], y[i:i + batch_size]
        fwd = engine.forward(graph, xb)
        _, dlogits = engine.cross_entropy(fwd.logits, yb)
        bundle = engine.backprop(graph, fwd, dlogits * len(xb))
        for f in feature_ids:
            acts[f].append(fwd.activations[f].ravel())
            grads[f].append(bundle.activation_grads[f].ravel())
    return {f: (np.concatenate(acts[f]), np.concatenate(grads[f])) for f in feature_ids}


@dataclass
class FeatureDistributions:
    activation: Tuple[Histogram, Histogram]
    gradient: Tuple[Histogram, Histogram]


def collect_feature_distributions(victim: ModelGraph, members: Tuple[np.ndarray, np.ndarray],
                                  nonmembers: Tuple[np.ndarray, np.ndarray], feature_id: str,
                                  bins: int = BINS, eps: float = EPS_SMOOTH) -> FeatureDistributions:
    return _distributions(victim, members, nonmembers, [feature_id], bins, eps)[feature_id]


def _distributions(victim, members, nonmembers, feature_ids, bins, eps) -> Dict[str, FeatureDistributions]:
    if len(members[0]) == 0 or len(nonmembers[0]) == 0:
        raise ValueError("member and non-member sets must be non-empty")
    pm = feature_populations(victim, *members, feature_ids)
    pn = feature_populations(victim, *nonmembers, feature_ids)
    return {f: FeatureDistributions(_pair(pm[f][0], pn[f][0], bins, eps), _pair(pm[f][1], pn[f][1], bins, eps))
            for f in feature_ids}


@dataclass
class FeatureCriticality:
    feature_id: str
    jsd_act: float
    jsd_grad: float
    score: float
    masked: bool = False


def feature_scores(victim: ModelGraph, members, nonmembers, feature_ids: Optional[Sequence[str]] = None,
                   bins: int = BINS, eps: float = EPS_SMOOTH, balance: bool = True) -> List[FeatureCriticality]:
    """JSD scores for the outputs of all linear tensors, descending by score.

    With ``balance`` the larger of the two populations is truncated so both
    sides pool the same number of samples.
    """
    feature_ids = list(feature_ids) if feature_ids is not None else victim.linear_ids
    if balance:
        n = min(len(members[0]), len(nonmembers[0]))
        members = (members[0][:n], members[1][:n])
        nonmembers = (nonmembers[0][:n], nonmembers[1][:n])
    dists = _distributions(victim, members, nonmembers, feature_ids, bins, eps)
    out = []
    for f in feature_ids:
        ja, jg = jsd(*dists[f].activation), jsd(*dists[f].gradient)
        out.append(FeatureCriticality(f, ja, jg, max(ja, jg)))
    order = sorted(range(len(out)), key=lambda i: (-out[i].score, i))
    return [out[i] for i in order]


@dataclass
class MaskSelection:
    masked: List[str]
    accuracy: float
    threshold: float
    jsd_threshold: float
    trials: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return dict(vars(self))


def select_masked_features(scores: Sequence[FeatureCriticality], jsd_threshold: float,
                           simulate: Callable[[frozenset], float], mia_threshold: float) -> MaskSelection:
    """Greedily mask features in descending score until the simulated MIA accuracy meets the target.

    Features scoring below ``jsd_threshold`` are skipped during the greedy
    pass; they are only considered (in the same order) if masking every
    candidate still misses the target.
    """
    ordered = sorted(scores, key=lambda s: -s.score)
    trials: List[dict] = []

    def run(masked: List[str]) -> float:
        acc = float(simulate(frozenset(masked)))
        trials.append({"masked": list(masked), "accuracy": acc})
        return acc

    masked: List[str] = []
    acc = run(masked)
    if acc <= mia_threshold:
        return MaskSelection([], acc, mia_threshold, jsd_threshold, trials)
    candidates = [s.feature_id for s in ordered if s.score >= jsd_threshold]
    rest = [s.feature_id for s in ordered if s.score < jsd_threshold]
    for fid in candidates + rest:
        masked.append(fid)
        acc = run(masked)
        if acc <= mia_threshold:
            return MaskSelection(masked, acc, mia_threshold, jsd_threshold, trials)
    raise Unsatisfiable("MIA threshold unreachable even with every feature masked", acc)
