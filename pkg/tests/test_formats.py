import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shieldkit.data import Checkpoint, ReplayLog, generate_synthetic_dataset
from shieldkit.engine import EpochRecord, ShapeError, default_graph
from shieldkit.formats import (FormatError, bundle_bytes, bundle_from_bytes, checkpoint_bytes, checkpoint_from_bytes,
                               dumps_model_spec, load_checkpoint, loads_model_spec, pack_tensors, replay_bytes,
                               replay_from_bytes, save_checkpoint, unpack_tensors)


def test_model_spec_round_trip():
    g = default_graph(4, seed=None)
    text = dumps_model_spec(g)
    g2 = loads_model_spec(text)
    assert g2.describe() == g.describe()
    assert dumps_model_spec(g2) == text


def test_model_spec_errors():
    with pytest.raises(FormatError) as exc:
        loads_model_spec('{"format": "shieldkit.model", ')
    assert exc.value.field == "$"
    with pytest.raises(FormatError):
        loads_model_spec('{"format": "other"}')
    with pytest.raises(FormatError) as exc:
        loads_model_spec('{"format": "shieldkit.model", "nodes": [{"kind": "relu"}]}')
    assert exc.value.field == "$.nodes[0]"
    bad = dumps_model_spec(default_graph(4, seed=None)).replace('"num_classes": 4', '"num_classes": 5')
    with pytest.raises(ShapeError):
        loads_model_spec(bad)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.integers(1, 4), min_size=0, max_size=3), min_size=1, max_size=4),
       st.integers(0, 2**31 - 1))
def test_tensor_container_is_bit_exact(shapes, seed):
    rng = np.random.default_rng(seed)
    tensors = {f"t{i}": rng.normal(size=s) * 10.0 ** rng.integers(-300, 300) for i, s in enumerate(shapes)}
    blob = pack_tensors(tensors, {"kind": "x"})
    meta, back = unpack_tensors(blob)
    assert meta == {"kind": "x"}
    for k, v in tensors.items():
        assert back[k].shape == np.shape(v)
        assert np.asarray(v).tobytes() == back[k].tobytes()


def test_tensor_container_errors_carry_offset_and_field():
    blob = pack_tensors({"a": np.arange(4.0)}, {})
    with pytest.raises(FormatError) as exc:
        unpack_tensors(b"NOTMAGIC" + blob[8:])
    assert (exc.value.offset, exc.value.field) == (0, "magic")
    with pytest.raises(FormatError) as exc:
        unpack_tensors(blob[:-8])
    assert exc.value.field.startswith("entries[0]")
    with pytest.raises(FormatError) as exc:
        unpack_tensors(blob + b"\0" * 8)
    assert exc.value.field == "payload"
    with pytest.raises(FormatError):
        unpack_tensors(blob[:10])


def test_checkpoint_round_trip(tmp_path):
    g = default_graph(3, seed=1)
    ckpt = Checkpoint.from_graph(g, "public")
    assert checkpoint_from_bytes(checkpoint_bytes(ckpt)) == ckpt
    save_checkpoint(ckpt, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back == ckpt
    assert back.apply(default_graph(3, seed=None)).node("fc1").params["weight"].tobytes() == \
        g.node("fc1").params["weight"].tobytes()
    with pytest.raises(ValueError):
        back.apply(default_graph(4, seed=None))
    with pytest.raises(FormatError):
        checkpoint_from_bytes(pack_tensors({}, {"kind": "replay"}))


def test_replay_round_trip():
    rng = np.random.default_rng(0)
    recs = [EpochRecord({"fc": {"weight": rng.normal(size=(2, 3)), "bias": rng.normal(size=2)}},
                        {"fc": {"weight": rng.normal(size=(2, 3)), "bias": rng.normal(size=2)}}) for _ in range(3)]
    log = ReplayLog(recs, one_shot=True)
    back = replay_from_bytes(replay_bytes(log))
    assert back.one_shot and len(back) == 3
    for a, b in zip(log.tensor_pairs("fc"), back.tensor_pairs("fc")):
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    with pytest.raises(KeyError):
        list(back.tensor_pairs("missing"))


def test_dataset_round_trip_and_truncation():
    bundle = generate_synthetic_dataset(3, num_classes=2, per_class=100, image_shape=(2, 6, 6))
    blob = bundle_bytes(bundle)
    assert bundle_from_bytes(blob) == bundle
    with pytest.raises(FormatError) as exc:
        bundle_from_bytes(blob[:-3])
    assert exc.value.field.startswith("labels")
    with pytest.raises(FormatError) as exc:
        bundle_from_bytes(blob[:100])
    assert exc.value.field.startswith("samples")
    with pytest.raises(FormatError):
        bundle_from_bytes(b"SKDSET01" + (2).to_bytes(4, "little") + blob[12:])
