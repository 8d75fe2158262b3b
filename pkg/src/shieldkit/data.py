"""Synthetic desk-scale tasks and the public -> victim training setup."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import engine
from .engine import EpochRecord, ModelGraph, TrainConfig

SPLITS = ("members", "nonmembers", "test", "query")

# query budget: at most 1% of the victim's training set
QUERY_FRACTION = 0.01


@dataclass
class DatasetBundle:
    """Four disjoint labelled splits over one image distribution."""

    num_classes: int
    image_shape: Tuple[int, ...]
    x: Dict[str, np.ndarray]
    y: Dict[str, np.ndarray]

    def __post_init__(self):
        self.image_shape = tuple(int(s) for s in self.image_shape)
        for name in SPLITS:
            if name not in self.x or name not in self.y:
                raise ValueError(f"missing split {name!r}")
            self.x[name] = np.asarray(self.x[name], dtype=np.float64)
            self.y[name] = np.asarray(self.y[name], dtype=np.int64)
            if self.x[name].shape[1:] != self.image_shape or len(self.x[name]) != len(self.y[name]):
                raise ValueError(f"split {name!r} has inconsistent shapes")
        if len(self.x["query"]) > QUERY_FRACTION * len(self.x["members"]):
            raise ValueError(f"query split ({len(self.x['query'])}) exceeds 1% of members ({len(self.x['members'])})")

    def split(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        return self.x[name], self.y[name]

    def sizes(self) -> Dict[str, int]:
        return {name: int(len(self.y[name])) for name in SPLITS}

    def __eq__(self, other):
        if not isinstance(other, DatasetBundle):
            return NotImplemented
        return (self.num_classes == other.num_classes and self.image_shape == other.image_shape
                and all(np.array_equal(self.x[s], other.x[s]) and np.array_equal(self.y[s], other.y[s]) for s in SPLITS))


@dataclass(frozen=True)
class TaskStyle:
    """Shape parameters of one image distribution.

    Each class is an oriented sinusoidal grating (orientation ``offset +
    c*pi/C`` plus jitter) overlaid with a random Gaussian blob and pixel noise.
    """

    orientation_offset: float = 0.0
    orientation_jitter: float = 0.12
    frequency: Tuple[float, float] = (0.12, 0.22)
    noise: float = 0.6


VICTIM_STYLE = TaskStyle()
# the attacker/owner's public pre-training distribution: same classes, shifted parameters
PUBLIC_STYLE = TaskStyle(orientation_offset=0.1, frequency=(0.20, 0.30))


def split_counts(per_class: int) -> Dict[str, int]:
    """Per-class split sizes given the per-class member count."""
    counts = {"members": per_class, "nonmembers": per_class, "test": per_class * 3 // 8,
              "query": int(per_class * QUERY_FRACTION)}
    if counts["query"] < 1 or counts["nonmembers"] < 1:
        raise ValueError(f"per_class={per_class} too small to fill splits (needs >= 100 for a non-empty query split)")
    return counts


def _render(rng: np.random.Generator, label: int, num_classes: int, image_shape, style: TaskStyle) -> np.ndarray:
    c, h, w = image_shape
    yy, xx = np.mgrid[0:h, 0:w]
    yy, xx = yy / h, xx / w
    theta = style.orientation_offset + label * np.pi / num_classes + rng.normal(0.0, style.orientation_jitter)
    freq = rng.uniform(*style.frequency) * h
    phase = rng.uniform(0.0, 2 * np.pi)
    img = rng.uniform(0.6, 1.2) * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    cx, cy = rng.uniform(0.2, 0.8, 2)
    img = img + rng.uniform(0.5, 1.5) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / 0.01)
    gains = np.ones(c) if c == 1 else rng.uniform(0.5, 1.0, c)
    return gains[:, None, None] * img[None] + rng.normal(0.0, style.noise, (c, h, w))


def generate_synthetic_dataset(seed: int, num_classes: int = 4, per_class: int = 400,
                               image_shape: Sequence[int] = (1, 16, 16), style: TaskStyle = VICTIM_STYLE) -> DatasetBundle:
    """Class-balanced bundle; ``per_class`` is the number of members per class.

    Non-members, test and query splits get ``per_class``, ``3*per_class//8``
    and ``per_class//100`` samples per class respectively.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    image_shape = tuple(int(s) for s in image_shape)
    if len(image_shape) != 3:
        raise ValueError("image_shape must be (channels, height, width)")
    counts = split_counts(per_class)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed) & (2**64 - 1)))
    xs: Dict[str, List[np.ndarray]] = {s: [] for s in SPLITS}
    ys: Dict[str, List[int]] = {s: [] for s in SPLITS}
    for label in range(num_classes):
        for name in SPLITS:
            for _ in range(counts[name]):
                xs[name].append(_render(rng, label, num_classes, image_shape, style))
                ys[name].append(label)
    x, y = {}, {}
    for name in SPLITS:
        order = rng.permutation(len(ys[name]))
        x[name] = np.stack(xs[name])[order]
        y[name] = np.asarray(ys[name], dtype=np.int64)[order]
    return DatasetBundle(num_classes, image_shape, x, y)


# --------------------------------------------------------------------------
# checkpoints and the replay log


PROVENANCES = ("public", "victim", "surrogate", "init")


@dataclass
class Checkpoint:
    structure_hash: str
    params: Dict[str, Dict[str, np.ndarray]]
    provenance: str = "victim"

    @classmethod
    def from_graph(cls, graph: ModelGraph, provenance: str) -> "Checkpoint":
        if provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {provenance!r}")
        return cls(graph.structure_hash(), {k: {n: a.copy() for n, a in v.items()} for k, v in graph.state().items()},
                   provenance)

    def apply(self, graph: ModelGraph) -> ModelGraph:
        if graph.structure_hash() != self.structure_hash:
            raise ValueError("checkpoint structure hash does not match graph")
        return graph.load_state(self.params)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if (self.structure_hash, self.provenance) != (other.structure_hash, other.provenance):
            return False
        if self.params.keys() != other.params.keys():
            return False
        return all(self.params[k].keys() == other.params[k].keys()
                   and all(np.array_equal(self.params[k][n], other.params[k][n]) for n in self.params[k])
                   for k in self.params)


@dataclass
class ReplayLog:
    """Per-epoch (mean gradient, parameter update) pairs from the victim's fine-tune."""

    epochs: List[EpochRecord] = field(default_factory=list)
    one_shot: bool = False

    def __len__(self):
        return len(self.epochs)

    def tensor_pairs(self, tensor_id: str):
        """Yield flattened (grad, delta) vectors for one tensor, one pair per epoch."""
        for rec in self.epochs:
            if tensor_id not in rec.grads or tensor_id not in rec.deltas:
                raise KeyError(f"tensor {tensor_id!r} missing from replay log")
            names = sorted(rec.deltas[tensor_id])
            g = np.concatenate([rec.grads[tensor_id][n].ravel() for n in names])
            d = np.concatenate([rec.deltas[tensor_id][n].ravel() for n in names])
            yield g, d


@dataclass
class SetupConfig:
    public_epochs: int = 30
    public_train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.05))
    finetune_epochs: int = 20
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.01))
    public_style: TaskStyle = PUBLIC_STYLE


@dataclass
class SetupResult:
    public: Checkpoint
    victim: Checkpoint
    replay: ReplayLog
    public_losses: List[float]
    victim_losses: List[float]


def make_public_and_victim(seed: int, graph: ModelGraph, bundle: DatasetBundle,
                           config: Optional[SetupConfig] = None) -> SetupResult:
    """Pre-train a public model on a shifted auxiliary task, then fine-tune it on the members."""
    config = config or SetupConfig()
    per_class = len(bundle.y["members"]) // bundle.num_classes
    aux = generate_synthetic_dataset(seed + 7919, bundle.num_classes, per_class, bundle.image_shape, config.public_style)
    init = engine.init_params(graph, seed)
    pub = engine.train(init, *aux.split("members"), config.public_epochs, config.public_train, seed=seed + 1)
    vic = engine.train(pub.graph, *bundle.split("members"), config.finetune_epochs, config.finetune,
                       seed=seed + 2, record=True)
    return SetupResult(
        public=Checkpoint.from_graph(pub.graph, "public"),
        victim=Checkpoint.from_graph(vic.graph, "victim"),
        replay=ReplayLog(vic.records),
        public_losses=pub.losses,
        victim_losses=vic.losses,
    )
