import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shieldkit.data import (SPLITS, DatasetBundle, SetupConfig, generate_synthetic_dataset, make_public_and_victim,
                            split_counts)
from shieldkit.engine import TrainConfig, accuracy, default_graph, train


def test_splits_are_balanced_and_sized():
    b = generate_synthetic_dataset(0, num_classes=4, per_class=200)
    counts = split_counts(200)
    for s in SPLITS:
        assert len(b.y[s]) == 4 * counts[s]
        assert np.all(np.bincount(b.y[s], minlength=4) == counts[s])
    assert len(b.y["query"]) <= 0.01 * len(b.y["members"])


def test_dataset_is_seed_deterministic_and_disjoint():
    a = generate_synthetic_dataset(5, per_class=100)
    assert a == generate_synthetic_dataset(5, per_class=100)
    assert not a == generate_synthetic_dataset(6, per_class=100)
    rows = {r.tobytes() for s in SPLITS for r in a.x[s]}
    assert len(rows) == sum(a.sizes().values())


def test_dataset_validation():
    with pytest.raises(ValueError):
        generate_synthetic_dataset(0, per_class=50)
    with pytest.raises(ValueError):
        generate_synthetic_dataset(0, num_classes=1)
    b = generate_synthetic_dataset(0, num_classes=2, per_class=100)
    x, y = dict(b.x), dict(b.y)
    x["query"] = np.concatenate([x["query"]] * 3)
    y["query"] = np.concatenate([y["query"]] * 3)
    with pytest.raises(ValueError):
        DatasetBundle(2, b.image_shape, x, y)


def test_public_and_victim_setup_is_learnable_and_deterministic():
    b = generate_synthetic_dataset(0, num_classes=4, per_class=100)
    g = default_graph(4, seed=None)
    cfg = SetupConfig(public_epochs=5, finetune_epochs=3)
    r1 = make_public_and_victim(0, g, b, cfg)
    r2 = make_public_and_victim(0, g, b, cfg)
    assert r1.victim == r2.victim and r1.public == r2.public
    assert r1.public.provenance == "public" and r1.victim.provenance == "victim"
    assert len(r1.replay) == 3
    victim = r1.victim.apply(g)
    assert accuracy(victim, *b.split("test")) > 0.5
    assert r1.victim_losses[-1] < r1.victim_losses[0]


@pytest.mark.slow
def test_tiny_cnn_reaches_target_accuracy():
    b = generate_synthetic_dataset(0)
    res = train(
        default_graph(4, seed=0), *b.split("members"), 100, TrainConfig(lr=0.05), seed=0)
    assert accuracy(res.graph, *b.split("test")) >= 0.90


def test_victim_beats_public_on_member_task():
    b = generate_synthetic_dataset(1, num_classes=4, per_class=200)
    g = default_graph(4, seed=None)
    r = make_public_and_victim(1, g, b, SetupConfig(public_epochs=10, finetune_epochs=5))
    assert r.victim.structure_hash == r.public.structure_hash
    assert len(r.replay) == 5
    assert accuracy(r.victim.apply(g), *b.split("test")) > accuracy(r.public.apply(g), *b.split("test"))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 4), st.integers(100, 150))
def test_split_invariants_hold_for_any_seed(seed, classes, per_class):
    b = generate_synthetic_dataset(seed, num_classes=classes, per_class=per_class, image_shape=(1, 4, 4))
    rows = [r.tobytes() for s in SPLITS for r in b.x[s]]
    assert len(set(rows)) == len(rows)
    assert len(b.y["query"]) <= 0.01 * len(b.y["members"])
