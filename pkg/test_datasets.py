#!/usr/bin/env python3
"""
Tests for CIFAR-10 binary parsing, synthetic tasks and container persistence
"""

import json

import numpy as np
import pytest

from datasets import (CIFAR_RECORD_BYTES, DatasetContainer, SyntheticSpec, class_templates, classes_disjoint,
                      gen_synthetic, load_cifar10_binary, load_container, save_container, split_train_test)
from defaults import CIFAR10_TRAIN_FILES
from error_handler import DatasetError


def record(label, red=0, green=0, blue=0):
    planes = [np.full(1024, value, dtype=np.uint8) for value in (red, green, blue)]
    return bytes([label]) + b"".join(p.tobytes() for p in planes)


def write_records(path, records):
    path.write_bytes(b"".join(records))
    return str(path)


def test_single_white_record(tmp_path):
    data = load_cifar10_binary(write_records(tmp_path / "one.bin", [record(3, 255, 255, 255)]))
    assert data.labels.tolist() == [3]
    assert data.images.shape == (1, 3, 32, 32)
    assert np.all(data.images == 1.0)


def test_channel_planes_keep_their_order(tmp_path):
    raw = bytearray(record(1))
    raw[1:1 + 3072] = np.arange(3072, dtype=np.uint32).astype(np.uint8).tobytes()
    path = tmp_path / "planes.bin"
    path.write_bytes(bytes(raw))
    image = load_cifar10_binary(str(path)).images[0]
    expected = (np.arange(3072) % 256).reshape(3, 32, 32) / 255.0
    np.testing.assert_allclose(image, expected, atol=1e-7)


def test_class_subset_is_relabelled_densely(tmp_path):
    path = write_records(tmp_path / "mix.bin", [record(c) for c in (5, 7, 2, 5, 9)])
    data = load_cifar10_binary(path, class_subset=[5, 6, 7, 8, 9])
    assert data.labels.tolist() == [0, 2, 0, 4]
    assert data.num_classes == 5
    assert data.metadata["source_classes"] == [5, 6, 7, 8, 9]


def test_truncated_file_and_bad_label(tmp_path):
    path = tmp_path / "short.bin"
    path.write_bytes(record(1)[:CIFAR_RECORD_BYTES - 1])
    with pytest.raises(DatasetError):
        load_cifar10_binary(str(path))
    with pytest.raises(DatasetError):
        load_cifar10_binary(write_records(tmp_path / "label.bin", [record(10)]))


def test_directory_reads_every_train_batch(tmp_path):
    for i, name in enumerate(CIFAR10_TRAIN_FILES):
        write_records(tmp_path / name, [record(i), record(i + 5)])
    data = load_cifar10_binary(str(tmp_path), split="train")
    assert len(data) == 10
    assert sorted(data.labels.tolist()) == list(range(10))


def test_missing_file_is_a_dataset_error(tmp_path):
    with pytest.raises(DatasetError):
        load_cifar10_binary(str(tmp_path), split="test")


def test_synthetic_is_deterministic_per_seed():
    spec = SyntheticSpec(num_samples=50, image_size=16, blob_sigma=3.0, margin=1.0)
    a, b = gen_synthetic(spec, seed=3), gen_synthetic(spec, seed=3)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, gen_synthetic(spec, seed=4).images)


def test_class_means_are_margin_apart():
    spec = SyntheticSpec()
    templates = class_templates(spec).reshape(spec.num_classes, -1)
    assert np.linalg.norm(templates[0] - templates[1]) >= spec.margin - 1e-9
    assert templates.min() >= 0.0 and templates.max() <= 1.0


def test_linear_classifier_separates_synthetic_classes():
    data = gen_synthetic(SyntheticSpec(num_samples=400), seed=0)
    train, test = split_train_test(data, 0.5, seed=0)
    flat_train = train.images.reshape(len(train), -1)
    centroids = np.stack([flat_train[train.labels == k].mean(axis=0) for k in range(2)])
    flat_test = test.images.reshape(len(test), -1)
    distances = ((flat_test[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    accuracy = np.mean(distances.argmin(axis=1) == test.labels)
    assert accuracy >= 0.95


def test_class_offset_gives_disjoint_tasks():
    a = gen_synthetic(SyntheticSpec(num_samples=20), seed=0)
    b = gen_synthetic(SyntheticSpec(num_samples=20, class_offset=2), seed=0)
    assert classes_disjoint(a, b)
    assert not classes_disjoint(a, a)
    assert not np.allclose(class_templates(SyntheticSpec()), class_templates(SyntheticSpec(class_offset=2)))


def test_split_sizes():
    data = gen_synthetic(SyntheticSpec(num_samples=40), seed=0)
    train, test = split_train_test(data, 0.25, seed=1)
    assert (len(train), len(test)) == (30, 10)


def test_container_round_trip_and_validation(tmp_path):
    data = gen_synthetic(SyntheticSpec(num_samples=10, image_size=8, blob_sigma=2.0, margin=1.0), seed=0)
    path = str(tmp_path / "data.npz")
    save_container(data, path)
    loaded = load_container(path)
    assert np.array_equal(loaded.images, data.images)
    assert loaded.metadata == json.loads(json.dumps(data.metadata))

    bad = tmp_path / "bad.npz"
    np.savez(bad, images=np.full((1, 3, 2, 2), 2.0), labels=np.array([0]), num_classes=np.array(2),
             metadata=np.array("{}"))
    with pytest.raises(DatasetError):
        load_container(str(bad))
    with pytest.raises(DatasetError):
        DatasetContainer(np.zeros((2, 3, 2, 2)), np.array([0, 3]), 2)


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v"]))
