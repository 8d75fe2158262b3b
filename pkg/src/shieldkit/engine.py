"""Small deterministic differentiable engine for sequential CNN/MLP chains.

Tensors are plain float64 numpy arrays. A :class:`ModelGraph` is an ordered
chain of :class:`LayerNode` objects; :func:`forward` records every node's
output, :func:`backward` returns softmax cross-entropy gradients for all
parameters and all node outputs, and :func:`train` runs minibatch SGD with
momentum, optionally recording per-epoch (gradient, update) pairs.
"""

from __future__ import annotations

import hashlib
import json
import os
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

DTYPE = np.float64

LINEAR_KINDS = ("conv2d", "dense")
NONLINEAR_KINDS = ("relu", "maxpool2x2", "globalavgpool", "flatten")
KINDS = LINEAR_KINDS + NONLINEAR_KINDS

# NaN/Inf checks after every op; always on at construction time.
DEBUG = os.environ.get("SHIELDKIT_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Input or parameter shape does not match what a node expects."""

    def __init__(self, node_id: Optional[str], message: str):
        self.node_id = node_id
        where = f"node {node_id!r}: " if node_id is not None else ""
        super().__init__(where + message)


class NonFiniteError(FloatingPointError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")


def as_tensor(data, shape: Optional[Sequence[int]] = None) -> np.ndarray:
    """Coerce to a finite float64 array, optionally reshaping."""
    arr = np.array(data, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise ShapeError(None, f"non-positive dimension in {shape}")
        if int(np.prod(shape)) != arr.size:
            raise ShapeError(None, f"{arr.size} elements cannot fill shape {shape}")
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains NaN or Inf")
    return arr


def _check(node_id: str, arr: np.ndarray) -> np.ndarray:
    if DEBUG and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by node {node_id!r}")
    return arr


# --------------------------------------------------------------------------
# graph structure


@dataclass
class LayerNode:
    id: str
    kind: str
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    hyper: Dict[str, int] = field(default_factory=dict)

    @property
    def linear(self) -> bool:
        return self.kind in LINEAR_KINDS

    @property
    def param_count(self) -> int:
        # declared shapes, so structure-only graphs count the same as loaded ones
        return int(sum(np.prod(s) for s in self.param_shapes().values()))

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        h = self.hyper
        if self.kind == "conv2d":
            k = h.get("kernel", 3)
            return {"weight": (h["out_channels"], h["in_channels"], k, k), "bias": (h["out_channels"],)}
        if self.kind == "dense":
            return {"weight": (h["out_features"], h["in_features"]), "bias": (h["out_features"],)}
        return {}

    def output_shape(self, in_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        """Per-sample output shape for a per-sample input shape."""
        h = self.hyper
        if self.kind == "conv2d":
            if len(in_shape) != 3 or in_shape[0] != h["in_channels"]:
                raise ShapeError(self.id, f"expected ({h['in_channels']}, H, W) input, got {in_shape}")
            k, s, p = h.get("kernel", 3), h.get("stride", 1), h.get("padding", 0)
            ho = (in_shape[1] + 2 * p - k) // s + 1
            wo = (in_shape[2] + 2 * p - k) // s + 1
            if ho <= 0 or wo <= 0:
                raise ShapeError(self.id, f"kernel {k} does not fit input {in_shape}")
            return (h["out_channels"], ho, wo)
        if self.kind == "dense":
            if len(in_shape) != 1 or in_shape[0] != h["in_features"]:
                raise ShapeError(self.id, f"expected ({h['in_features']},) input, got {in_shape}")
            return (h["out_features"],)
        if self.kind == "relu":
            return tuple(in_shape)
        if self.kind == "maxpool2x2":
            if len(in_shape) != 3 or in_shape[1] % 2 or in_shape[2] % 2:
                raise ShapeError(self.id, f"maxpool2x2 needs (C, even H, even W), got {in_shape}")
            return (in_shape[0], in_shape[1] // 2, in_shape[2] // 2)
        if self.kind == "globalavgpool":
            if len(in_shape) != 3:
                raise ShapeError(self.id, f"globalavgpool needs (C, H, W), got {in_shape}")
            return (in_shape[0],)
        if self.kind == "flatten":
            return (int(np.prod(in_shape)),)
        raise ShapeError(self.id, f"unknown kind {self.kind!r}")


@dataclass
class ModelGraph:
    nodes: List[LayerNode]
    input_shape: Tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.validate()

    def validate(self) -> None:
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise ShapeError(dup[0], "duplicate node id")
        if not self.nodes:
            raise ShapeError(None, "graph has no nodes")
        shape = self.input_shape
        for node in self.nodes:
            if node.kind not in KINDS:
                raise ShapeError(node.id, f"unknown kind {node.kind!r}")
            expected = node.param_shapes()
            if not node.linear and node.params:
                raise ShapeError(node.id, "non-linear node carries parameters")
            for name, pshape in expected.items():
                if name in node.params and node.params[name].shape != pshape:
                    raise ShapeError(node.id, f"param {name} has shape {node.params[name].shape}, expected {pshape}")
            shape = node.output_shape(shape)
        if shape != (self.num_classes,):
            raise ShapeError(self.nodes[-1].id, f"final output {shape} is not ({self.num_classes},)")

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        out, shape = {}, self.input_shape
        for node in self.nodes:
            shape = node.output_shape(shape)
            out[node.id] = shape
        return out

    def node(self, node_id: str) -> LayerNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def index(self, node_id: str) -> int:
        for i, n in enumerate(self.nodes):
            if n.id == node_id:
                return i
        raise KeyError(node_id)

    @property
    def linear_ids(self) -> List[str]:
        return [n.id for n in self.nodes if n.linear]

    def param_count(self, node_id: str) -> int:
        return self.node(node_id).param_count

    def total_params(self) -> int:
        return sum(n.param_count for n in self.nodes)

    def copy(self, share_arrays: bool = False) -> "ModelGraph":
        """Independent copy; ``share_arrays`` reuses parameter arrays (read-only use)."""
        nodes = [LayerNode(n.id, n.kind,
                           {k: (v if share_arrays else v.copy()) for k, v in n.params.items()},
                           dict(n.hyper)) for n in self.nodes]
        g = ModelGraph.__new__(ModelGraph)
        g.nodes, g.input_shape, g.num_classes = nodes, self.input_shape, self.num_classes
        return g

    def state(self) -> Dict[str, Dict[str, np.ndarray]]:
        return {n.id: dict(n.params) for n in self.nodes if n.params}

    def load_state(self, state: Dict[str, Dict[str, np.ndarray]]) -> "ModelGraph":
        """Return a copy carrying the given parameters (shape checked)."""
        g = self.copy()
        for node in g.nodes:
            expected = node.param_shapes()
            if not expected:
                continue
            if node.id not in state:
                raise ShapeError(node.id, "missing parameters")
            for name, pshape in expected.items():
                arr = np.asarray(state[node.id][name], dtype=DTYPE)
                if arr.shape != pshape:
                    raise ShapeError(node.id, f"param {name} has shape {arr.shape}, expected {pshape}")
                node.params[name] = arr.copy()
        return g

    def describe(self) -> dict:
        """Structure only (no parameter values)."""
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "nodes": [{"id": n.id, "kind": n.kind, "hyper": dict(sorted(n.hyper.items()))} for n in self.nodes],
        }

    def structure_hash(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def node_rng(seed: int, node_id: str) -> np.random.Generator:
    """Named PRNG stream: one independent generator per (seed, node id)."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(zlib.crc32(node_id.encode()),))
    return np.random.default_rng(ss)


def init_params(graph: ModelGraph, seed: int) -> ModelGraph:
    """He-style fan-in initialization, zero biases."""
    g = graph.copy()
    for node in g.nodes:
        shapes = node.param_shapes()
        if not shapes:
            continue
        rng = node_rng(seed, node.id)
        w_shape = shapes["weight"]
        fan_in = int(np.prod(w_shape[1:]))
        node.params = {
            "weight": rng.normal(0.0, np.sqrt(2.0 / fan_in), size=w_shape),
            "bias": np.zeros(shapes["bias"]),
        }
    return g


def build_graph(layers: Sequence[dict], input_shape: Sequence[int], num_classes: int, seed: Optional[int] = None) -> ModelGraph:
    """Build a graph from ``{"id", "kind", **hyper}`` dicts.

    ``in_channels``/``in_features`` may be omitted; they are inferred from the
    running shape. With ``seed`` given, parameters are initialized.
    """
    nodes, shape = [], tuple(int(s) for s in input_shape)
    for spec in layers:
        spec = dict(spec)
        node_id, kind = spec.pop("id"), spec.pop("kind")
        hyper = {k: int(v) for k, v in spec.items()}
        if kind == "conv2d":
            hyper.setdefault("in_channels", shape[0] if len(shape) == 3 else -1)
            hyper.setdefault("kernel", 3)
            hyper.setdefault("stride", 1)
            hyper.setdefault("padding", 0)
        elif kind == "dense":
            hyper.setdefault("in_features", shape[0] if len(shape) == 1 else -1)
        node = LayerNode(node_id, kind, {}, hyper)
        shape = node.output_shape(shape)
        nodes.append(node)
    graph = ModelGraph(nodes, tuple(input_shape), int(num_classes))
    return init_params(graph, seed) if seed is not None else graph


def default_graph(num_classes: int, input_shape: Sequence[int] = (1, 16, 16), seed: Optional[int] = 0) -> ModelGraph:
    """conv(->8) relu pool conv(8->16) relu pool flatten dense(->32) relu dense(->classes)."""
    layers = [
        {"id": "conv1", "kind": "conv2d", "out_channels": 8, "kernel": 3, "padding": 1},
        {"id": "relu1", "kind": "relu"},
        {"id": "pool1", "kind": "maxpool2x2"},
        {"id": "conv2", "kind": "conv2d", "out_channels": 16, "kernel": 3, "padding": 1},
        {"id": "relu2", "kind": "relu"},
        {"id": "pool2", "kind": "maxpool2x2"},
        {"id": "flatten", "kind": "flatten"},
        {"id": "fc1", "kind": "dense", "out_features": 32},
        {"id": "relu3", "kind": "relu"},
        {"id": "fc2", "kind": "dense", "out_features": num_classes},
    ]
    return build_graph(layers, input_shape, num_classes, seed=seed)


# --------------------------------------------------------------------------
# per-kind kernels


def _im2col(x: np.ndarray, k: int, stride: int, padding: int) -> Tuple[np.ndarray, Tuple[int, int]]:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
    return cols, (ho, wo)


def _col2im(dcols: np.ndarray, x_shape, k: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    b, c, h, w = x_shape
    dx = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
    d = dcols.reshape(b, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, :, i, j]
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def conv2d_forward(x, weight, bias, stride=1, padding=0):
    out_c, _, k, _ = weight.shape
    cols, (ho, wo) = _im2col(x, k, stride, padding)
    out = cols @ weight.reshape(out_c, -1).T
    if bias is not None:
        out += bias
    out = out.reshape(x.shape[0], ho, wo, out_c).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def conv2d_backward(dout, x_shape, cols, weight, stride=1, padding=0):
    out_c, _, k, _ = weight.shape
    ho, wo = dout.shape[2:]
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, out_c)
    dw = (dflat.T @ cols).reshape(weight.shape)
    db = dflat.sum(axis=0)
    dx = _col2im(dflat @ weight.reshape(out_c, -1), x_shape, k, stride, padding, ho, wo)
    return dx, dw, db


def _forward_node(node: LayerNode, x: np.ndarray):
    kind, h = node.kind, node.hyper
    if kind == "conv2d":
        out, cols = conv2d_forward(x, node.params["weight"], node.params["bias"], h.get("stride", 1), h.get("padding", 0))
        return out, cols
    if kind == "dense":
        return x @ node.params["weight"].T + node.params["bias"], None
    if kind == "relu":
        return np.maximum(x, 0.0), None
    if kind == "maxpool2x2":
        b, c, hh, ww = x.shape
        blocks = x.reshape(b, c, hh // 2, 2, ww // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, hh // 2, ww // 2, 4)
        arg = blocks.argmax(axis=-1)
        return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0], arg
    if kind == "globalavgpool":
        return x.mean(axis=(2, 3)), None
    if kind == "flatten":
        return x.reshape(x.shape[0], -1), None
    raise ShapeError(node.id, f"unknown kind {kind!r}")


def _backward_node(node: LayerNode, x: np.ndarray, out: np.ndarray, cache, dout: np.ndarray):
    """Return (dx, {param: grad})."""
    kind, h = node.kind, node.hyper
    if kind == "conv2d":
        dx, dw, db = conv2d_backward(dout, x.shape, cache, node.params["weight"], h.get("stride", 1), h.get("padding", 0))
        return dx, {"weight": dw, "bias": db}
    if kind == "dense":
        return dout @ node.params["weight"], {"weight": dout.T @ x, "bias": dout.sum(axis=0)}
    if kind == "relu":
        return dout * (x > 0), {}
    if kind == "maxpool2x2":
        b, c, hh, ww = x.shape
        onehot = np.zeros((b, c, hh // 2, ww // 2, 4))
        np.put_along_axis(onehot, cache[..., None], 1.0, axis=-1)
        d = onehot * dout[..., None]
        d = d.reshape(b, c, hh // 2, ww // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, hh, ww)
        return d, {}
    if kind == "globalavgpool":
        hh, ww = x.shape[2:]
        return np.broadcast_to(dout[:, :, None, None] / (hh * ww), x.shape).copy(), {}
    if kind == "flatten":
        return dout.reshape(x.shape), {}
    raise ShapeError(node.id, f"unknown kind {kind!r}")


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardPass:
    inputs: np.ndarray
    activations: Dict[str, np.ndarray]
    caches: Dict[str, object] = field(repr=False, default_factory=dict)

    @property
    def logits(self) -> np.ndarray:
        return self.activations[next(reversed(self.activations))]


@dataclass
class GradientBundle:
    param_grads: Dict[str, Dict[str, np.ndarray]]
    activation_grads: Dict[str, np.ndarray]
    input_grad: Optional[np.ndarray] = None


def _check_batch(graph: ModelGraph, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=DTYPE)
    if batch.ndim != len(graph.input_shape) + 1 or batch.shape[1:] != graph.input_shape or batch.shape[0] < 1:
        raise ShapeError(graph.nodes[0].id, f"batch shape {batch.shape} does not match [B] + {list(graph.input_shape)}")
    return batch


def forward(graph: ModelGraph, batch: np.ndarray, *, keep_caches: bool = True) -> ForwardPass:
    batch = _check_batch(graph, batch)
    acts, caches, x = {}, {}, batch
    for node in graph.nodes:
        try:
            out, cache = _forward_node(node, x)
        except (ValueError, KeyError) as exc:
            if isinstance(exc, ShapeError):
                raise
            raise ShapeError(node.id, str(exc)) from exc
        acts[node.id] = _check(node.id, out)
        if keep_caches:
            caches[node.id] = cache
        x = out
    return ForwardPass(batch, acts, caches)


def predict(graph: ModelGraph, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Logits for ``x`` in chunks (no caches kept)."""
    x = np.asarray(x, dtype=DTYPE)
    return np.concatenate([forward(graph, x[i:i + batch_size], keep_caches=False).logits
                           for i in range(0, len(x), batch_size)])


def accuracy(graph: ModelGraph, x: np.ndarray, y: np.ndarray) -> float:
    if len(x) == 0:
        return float("nan")
    return float(np.mean(predict(graph, x).argmax(axis=1) == np.asarray(y)))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Batch-mean softmax cross-entropy and its gradient w.r.t. logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    lsm = log_softmax(logits)
    loss = float(-lsm[np.arange(n), labels].mean())
    grad = np.exp(lsm)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def per_sample_loss(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    return -log_softmax(logits)[np.arange(len(labels)), labels]


def backprop(graph: ModelGraph, fwd: ForwardPass, dlogits: np.ndarray) -> GradientBundle:
    """Vector-Jacobian product of an arbitrary upstream gradient on the logits."""
    param_grads, act_grads = {}, {}
    d = dlogits
    for i in range(len(graph.nodes) - 1, -1, -1):
        node = graph.nodes[i]
        act_grads[node.id] = d
        x = fwd.inputs if i == 0 else fwd.activations[graph.nodes[i - 1].id]
        d, pg = _backward_node(node, x, fwd.activations[node.id], fwd.caches.get(node.id), d)
        _check(node.id, d)
        if pg:
            param_grads[node.id] = pg
    return GradientBundle(param_grads, act_grads, d)


def backward(graph: ModelGraph, batch: np.ndarray, labels) -> Tuple[float, GradientBundle]:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= graph.num_classes:
        raise ValueError(f"labels must lie in [0, {graph.num_classes})")
    fwd = forward(graph, batch)
    if len(labels) != fwd.logits.shape[0]:
        raise ShapeError(graph.nodes[-1].id, f"{len(labels)} labels for batch of {fwd.logits.shape[0]}")
    loss, dlogits = cross_entropy(fwd.logits, labels)
    return loss, backprop(graph, fwd, dlogits)


# --------------------------------------------------------------------------
# optimization


def sgd_step(graph: ModelGraph, grads: GradientBundle, lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, velocity: Optional[Dict[str, Dict[str, np.ndarray]]] = None,
             frozen: Sequence[str] = ()):
    """One SGD step: ``v <- momentum*v + g + wd*w``, ``w <- w - lr*v``.

    Returns ``(updated_graph, deltas, velocity)`` where ``deltas`` holds the
    exact applied change ``w_after - w_before`` per node and parameter.
    Nodes listed in ``frozen`` are left untouched (zero delta).
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    g = graph.copy(share_arrays=True)
    velocity = {} if velocity is None else velocity
    deltas = {}
    for node in g.nodes:
        if not node.params:
            continue
        pg = grads.param_grads.get(node.id)
        if pg is None:
            raise ShapeError(node.id, "missing gradient")
        if node.id in frozen:
            deltas[node.id] = {name: np.zeros_like(w) for name, w in node.params.items()}
            continue
        nd, nv = {}, velocity.setdefault(node.id, {})
        for name, w in node.params.items():
            if pg[name].shape != w.shape:
                raise ShapeError(node.id, f"gradient for {name} has shape {pg[name].shape}, expected {w.shape}")
            step = pg[name] + weight_decay * w if weight_decay else pg[name]
            v = momentum * nv[name] + step if name in nv else step.copy()
            nv[name] = v
            new = w - lr * v
            nd[name] = new - w
            node.params[name] = new
        deltas[node.id] = nd
    return g, deltas, velocity


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.5
    weight_decay: float = 5e-4
    batch_size: int = 64
    lr_decay: float = 0.1
    lr_decay_every: int = 0  # 0 disables step decay
    frozen: Tuple[str, ...] = ()

    def lr_at(self, epoch: int) -> float:
        if self.lr_decay_every:
            return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)
        return self.lr


@dataclass
class EpochRecord:
    """Mean minibatch CE gradient and total parameter change over one epoch."""
    grads: Dict[str, Dict[str, np.ndarray]]
    deltas: Dict[str, Dict[str, np.ndarray]]


@dataclass
class TrainResult:
    graph: ModelGraph
    losses: List[float]
    records: List[EpochRecord]


def train(graph: ModelGraph, x: np.ndarray, y: np.ndarray, epochs: int, config: Optional[TrainConfig] = None,
          seed: int = 0, record: bool = False, on_epoch: Optional[Callable[[int, ModelGraph, float], None]] = None) -> TrainResult:
    """Minibatch SGD; ``losses[e]`` is the mean minibatch loss seen in epoch ``e``."""
    config = config or TrainConfig()
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    velocity: Dict[str, Dict[str, np.ndarray]] = {}
    losses, records = [], []
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        lr = config.lr_at(epoch)
        start = graph.state() if record else None
        gsum: Dict[str, Dict[str, np.ndarray]] = {}
        batch_losses = []
        steps = 0
        for b in range(0, len(x), config.batch_size):
            idx = order[b:b + config.batch_size]
            loss, grads = backward(graph, x[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            batch_losses.append(loss)
            if record:
                for nid, pg in grads.param_grads.items():
                    acc = gsum.setdefault(nid, {k: np.zeros_like(v) for k, v in pg.items()})
                    for k, v in pg.items():
                        acc[k] += v
            graph, _, velocity = sgd_step(graph, grads, lr, config.momentum, config.weight_decay, velocity,
                                          frozen=config.frozen)
            steps += 1
        epoch_loss = float(np.mean(batch_losses))
        if not np.isfinite(epoch_loss):
            raise TrainingDiverged(epoch, epoch_loss)
        losses.append(epoch_loss)
        if record:
            end = graph.state()
            records.append(EpochRecord(
                grads={nid: {k: v / steps for k, v in pg.items()} for nid, pg in gsum.items()},
                deltas={nid: {k: end[nid][k] - start[nid][k] for k in end[nid]} for nid in end},
            ))
        if on_epoch is not None:
            on_epoch(epoch, graph, epoch_loss)
    return TrainResult(graph, losses, records)
