"""Bit-exact file formats.

Model spec (JSON text)::

    {"format": "shieldkit.model", "version": 1, "input_shape": [C, H, W],
     "num_classes": K, "nodes": [{"id": ..., "kind": ..., "hyper": {...}}, ...]}

Tensor container (checkpoints, replay logs)::

    magic   8 bytes  b"SKTNSR01"
    hlen    u32 LE   length of the JSON header
    header  hlen bytes UTF-8 JSON: {"meta": {...}, "entries": [
                {"name": str, "shape": [..], "offset": int, "length": int}, ...]}
    payload float64 LE values; entry offsets/lengths count elements from payload start

Dataset file::

    magic   8 bytes  b"SKDSET01"
    version u32 LE   (1)
    classes u32 LE
    ndim    u32 LE, then ndim x u32 LE image dims
    counts  4 x u32 LE for members, nonmembers, test, query
    samples float64 LE, split by split in that order, row-major
    labels  int64 LE, same order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from .data import SPLITS, Checkpoint, DatasetBundle, ReplayLog
from .engine import EpochRecord, LayerNode, ModelGraph, ShapeError

PathLike = Union[str, Path]

MODEL_FORMAT = "shieldkit.model"
TENSOR_MAGIC = b"SKTNSR01"
DATASET_MAGIC = b"SKDSET01"
DATASET_VERSION = 1


class FormatError(ValueError):
    """Malformed file; carries the byte offset and the field being read."""

    def __init__(self, message: str, offset: int, field: str):
        self.offset = offset
        self.field = field
        super().__init__(f"{message} (at byte {offset}, field {field})")


# --------------------------------------------------------------------------
# model spec


def model_spec(graph: ModelGraph) -> dict:
    return {"format": MODEL_FORMAT, "version": 1, **graph.describe()}


def dumps_model_spec(graph: ModelGraph) -> str:
    return json.dumps(model_spec(graph), indent=2, sort_keys=True) + "\n"


def loads_model_spec(text: str) -> ModelGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(exc.msg, len(text[:exc.pos].encode()), "$") from exc
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise FormatError("not a model spec", 0, "$.format")
    nodes = []
    for i, raw in enumerate(doc.get("nodes", [])):
        try:
            hyper = {str(k): int(v) for k, v in raw.get("hyper", {}).items()}
            nodes.append(LayerNode(str(raw["id"]), str(raw["kind"]), {}, hyper))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise FormatError(f"bad node entry: {exc}", 0, f"$.nodes[{i}]") from exc
    try:
        return ModelGraph(nodes, tuple(doc["input_shape"]), int(doc["num_classes"]))
    except KeyError as exc:
        raise FormatError("missing field", 0, f"$.{exc.args[0]}") from exc


def save_model_spec(graph: ModelGraph, path: PathLike) -> None:
    Path(path).write_text(dumps_model_spec(graph))


def load_model_spec(path: PathLike) -> ModelGraph:
    return loads_model_spec(Path(path).read_text())


# --------------------------------------------------------------------------
# tensor container


def pack_tensors(tensors: Dict[str, np.ndarray], meta: dict) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "length": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"meta": meta, "entries": entries}, sort_keys=True, separators=(",", ":")).encode()
    return TENSOR_MAGIC + struct.pack("<I", len(header)) + header + b"".join(chunks)


def unpack_tensors(blob: bytes) -> Tuple[dict, Dict[str, np.ndarray]]:
    if len(blob) < 8 or blob[:8] != TENSOR_MAGIC:
        raise FormatError("bad magic", 0, "magic")
    if len(blob) < 12:
        raise FormatError("truncated header length", 8, "hlen")
    (hlen,) = struct.unpack_from("<I", blob, 8)
    if len(blob) < 12 + hlen:
        raise FormatError("truncated header", len(blob), "header")
    try:
        header = json.loads(blob[12:12 + hlen].decode())
        entries = header["entries"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable header: {exc}", 12, "header") from exc
    base = 12 + hlen
    n_values = (len(blob) - base) // 8
    tensors = {}
    for i, e in enumerate(entries):
        field = f"entries[{i}]({e.get('name')})"
        try:
            off, length, shape = int(e["offset"]), int(e["length"]), tuple(int(s) for s in e["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad entry: {exc}", 12, field) from exc
        if off + length > n_values:
            raise FormatError("payload truncated", base + 8 * off, field)
        if int(np.prod(shape)) != length:
            raise FormatError("shape does not match length", 12, field)
        arr = np.frombuffer(blob, dtype="<f8", count=length, offset=base + 8 * off).astype(np.float64).reshape(shape)
        tensors[e["name"]] = arr
    if (len(blob) - base) != 8 * sum(int(e["length"]) for e in entries):
        raise FormatError("trailing bytes after payload", len(blob), "payload")
    return header.get("meta", {}), tensors


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    tensors = {f"{node}/{name}": arr for node in ckpt.params for name, arr in sorted(ckpt.params[node].items())}
    return pack_tensors(tensors, {"kind": "checkpoint", "structure_hash": ckpt.structure_hash,
                                  "provenance": ckpt.provenance})


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    meta, tensors = unpack_tensors(blob)
    if meta.get("kind") != "checkpoint":
        raise FormatError("not a checkpoint", 12, "meta.kind")
    params: Dict[str, Dict[str, np.ndarray]] = {}
    for key, arr in tensors.items():
        node, _, name = key.partition("/")
        params.setdefault(node, {})[name] = arr
    return Checkpoint(meta["structure_hash"], params, meta.get("provenance", "victim"))


def save_checkpoint(ckpt: Checkpoint, path: PathLike) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path: PathLike) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


def replay_bytes(log: ReplayLog) -> bytes:
    tensors = {}
    for e, rec in enumerate(log.epochs):
        for kind, table in (("grad", rec.grads), ("delta", rec.deltas)):
            for node in table:
                for name, arr in sorted(table[node].items()):
                    tensors[f"{e}/{kind}/{node}/{name}"] = arr
    return pack_tensors(tensors, {"kind": "replay", "epochs": len(log.epochs), "one_shot": log.one_shot})


def replay_from_bytes(blob: bytes) -> ReplayLog:
    meta, tensors = unpack_tensors(blob)
    if meta.get("kind") != "replay":
        raise FormatError("not a replay log", 12, "meta.kind")
    epochs = [EpochRecord({}, {}) for _ in range(int(meta["epochs"]))]
    for key, arr in tensors.items():
        e, kind, node, name = key.split("/")
        rec = epochs[int(e)]
        (rec.grads if kind == "grad" else rec.deltas).setdefault(node, {})[name] = arr
    return ReplayLog(epochs, bool(meta.get("one_shot", False)))


def save_replay(log: ReplayLog, path: PathLike) -> None:
    Path(path).write_bytes(replay_bytes(log))


def load_replay(path: PathLike) -> ReplayLog:
    return replay_from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# dataset bundle


def bundle_bytes(bundle: DatasetBundle) -> bytes:
    shape = bundle.image_shape
    head = DATASET_MAGIC + struct.pack("<II", DATASET_VERSION, bundle.num_classes)
    head += struct.pack(f"<I{len(shape)}I", len(shape), *shape)
    head += struct.pack("<4I", *(len(bundle.y[s]) for s in SPLITS))
    samples = b"".join(np.ascontiguousarray(bundle.x[s], dtype="<f8").tobytes() for s in SPLITS)
    labels = b"".join(np.ascontiguousarray(bundle.y[s], dtype="<i8").tobytes() for s in SPLITS)
    return head + samples + labels


def bundle_from_bytes(blob: bytes) -> DatasetBundle:
    def need(offset: int, size: int, field: str):
        if offset + size > len(blob):
            raise FormatError("file truncated", len(blob), field)

    need(0, 8, "magic")
    if blob[:8] != DATASET_MAGIC:
        raise FormatError("bad magic", 0, "magic")
    need(8, 12, "version")
    version, classes, ndim = struct.unpack_from("<III", blob, 8)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported version {version}", 8, "version")
    pos = 20
    need(pos, 4 * ndim, "shape")
    shape = struct.unpack_from(f"<{ndim}I", blob, pos)
    pos += 4 * ndim
    need(pos, 16, "counts")
    counts = dict(zip(SPLITS, struct.unpack_from("<4I", blob, pos)))
    pos += 16
    per = int(np.prod(shape))
    x, y = {}, {}
    for s in SPLITS:
        need(pos, 8 * per * counts[s], f"samples.{s}")
        x[s] = np.frombuffer(blob, "<f8", per * counts[s], pos).astype(np.float64).reshape((counts[s],) + tuple(shape))
        pos += 8 * per * counts[s]
    for s in SPLITS:
        need(pos, 8 * counts[s], f"labels.{s}")
        y[s] = np.frombuffer(blob, "<i8", counts[s], pos).astype(np.int64)
        pos += 8 * counts[s]
    if pos != len(blob):
        raise FormatError("trailing bytes", pos, "labels")
    try:
        return DatasetBundle(classes, shape, x, y)
    except ValueError as exc:
        raise FormatError(str(exc), 20, "counts") from exc


def save_bundle(bundle: DatasetBundle, path: PathLike) -> None:
    Path(path).write_bytes(bundle_bytes(bundle))


def load_bundle(path: PathLike) -> DatasetBundle:
    return bundle_from_bytes(Path(path).read_bytes())


__all__ = [
    "FormatError", "ShapeError",
    "dumps_model_spec", "loads_model_spec", "save_model_spec", "load_model_spec",
    "pack_tensors", "unpack_tensors",
    "checkpoint_bytes", "checkpoint_from_bytes", "save_checkpoint", "load_checkpoint",
    "replay_bytes", "replay_from_bytes", "save_replay", "load_replay",
    "bundle_bytes", "bundle_from_bytes", "save_bundle", "load_bundle",
]
