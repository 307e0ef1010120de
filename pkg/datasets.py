# datasets.py - CIFAR-10 binary loader, synthetic image tasks and container persistence

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from defaults import CIFAR10_DIRNAME, CIFAR10_TEST_FILES, CIFAR10_TRAIN_FILES, DATA_ROOT, SYNTHETIC
from error_handler import ConfigError, DatasetError

logger = logging.getLogger(__name__)

CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR_NUM_CLASSES = 10
GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


@dataclass
class DatasetContainer:
    """Images [M,C,H,W] in [0,1] with dense labels 0..num_classes-1"""
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetError(f"images must be [M,C,H,W], got shape {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DatasetError("one label per image is required",
                               details=f"{self.labels.shape[0]} labels for {self.images.shape[0]} images")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DatasetError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "DatasetContainer":
        indices = np.asarray(indices, dtype=np.int64)
        return DatasetContainer(self.images[indices], self.labels[indices], self.num_classes, dict(self.metadata))

    def head(self, n: Optional[int]) -> "DatasetContainer":
        if n is None or n >= len(self):
            return self
        return self.subset(np.arange(n))


def _read_cifar_file(path: str) -> Tuple[np.ndarray, np.ndarray]:
    if not os.path.exists(path):
        raise DatasetError(f"CIFAR-10 file not found: {path}",
                           user_action="Download the binary version and set ABNN_DATA_ROOT.")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES:
        raise DatasetError("CIFAR-10 file is truncated",
                           details=f"{path}: {raw.size} bytes is not a multiple of {CIFAR_RECORD_BYTES}")
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= CIFAR_NUM_CLASSES:
        raise DatasetError("CIFAR-10 label out of range", details=f"{path}: label {labels.max()}")
    # channel planes R, G, B, each 32x32 row-major
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    return images, labels


def cifar_files(path: str, split: str = "train") -> List[str]:
    if os.path.isfile(path):
        return [path]
    names = {"train": CIFAR10_TRAIN_FILES, "test": CIFAR10_TEST_FILES}.get(split)
    if names is None:
        raise ConfigError(f"unknown CIFAR-10 split {split!r}")
    return [os.path.join(path, name) for name in names]


def default_cifar_dir() -> str:
    return os.path.join(DATA_ROOT, CIFAR10_DIRNAME)


def load_cifar10_binary(path: str = None, class_subset: Optional[Sequence[int]] = None,
                        split: str = "train", limit: Optional[int] = None) -> DatasetContainer:
    """
    Load CIFAR-10 binary records from a file or a batches directory.
    With class_subset, only those classes are kept and relabeled densely in
    the order given.
    """
    path = path or default_cifar_dir()
    files = cifar_files(path, split)
    chunks = [_read_cifar_file(f) for f in files]
    images = np.concatenate([c[0] for c in chunks])
    labels = np.concatenate([c[1] for c in chunks])

    if class_subset is not None:
        subset = list(dict.fromkeys(int(c) for c in class_subset))
        if not subset or any(not 0 <= c < CIFAR_NUM_CLASSES for c in subset):
            raise ConfigError(f"class subset must name CIFAR-10 classes 0..9, got {class_subset}")
        remap = np.full(CIFAR_NUM_CLASSES, -1, dtype=np.int64)
        remap[subset] = np.arange(len(subset))
        keep = remap[labels] >= 0
        images, labels = images[keep], remap[labels[keep]]
    else:
        subset = list(range(CIFAR_NUM_CLASSES))

    if limit is not None:
        images, labels = images[:limit], labels[:limit]

    logger.info("✓ loaded %d CIFAR-10 %s images from %d file(s)", len(labels), split, len(files))
    return DatasetContainer(images, labels, len(subset), {
        "source": "cifar10",
        "split": split,
        "files": [os.path.basename(f) for f in files],
        "source_classes": subset,
    })


@dataclass
class SyntheticSpec:
    num_samples: int = SYNTHETIC["num_samples"]
    image_size: int = SYNTHETIC["image_size"]
    num_classes: int = SYNTHETIC["num_classes"]
    margin: float = SYNTHETIC["margin"]
    noise: float = SYNTHETIC["noise"]
    blob_sigma: float = SYNTHETIC["blob_sigma"]
    class_offset: int = 0
    channels: int = 3

    def __post_init__(self):
        if self.num_samples < 1 or self.image_size < 2 or self.num_classes < 2:
            raise ConfigError("synthetic task needs num_samples >= 1, image_size >= 2 and num_classes >= 2")
        if self.margin <= 0 or self.noise < 0 or self.blob_sigma <= 0:
            raise ConfigError("synthetic margin and blob_sigma must be positive, noise non-negative")

    @property
    def source_classes(self) -> List[int]:
        return list(range(self.class_offset, self.class_offset + self.num_classes))


def _blob_pattern(global_class: int, size: int, sigma: float, channels: int) -> np.ndarray:
    """Signed Gaussian blob; centre on a golden-angle spiral, colour signs per class"""
    angle = global_class * GOLDEN_ANGLE
    radius = 0.25 * size
    cy = size / 2.0 + radius * np.sin(angle)
    cx = size / 2.0 + radius * np.cos(angle)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))
    rng = np.random.default_rng(1000 + global_class)
    colour = rng.choice([-1.0, 1.0], size=channels) * rng.uniform(0.5, 1.0, size=channels)
    return colour[:, None, None] * blob[None, :, :]


def class_templates(spec: SyntheticSpec) -> np.ndarray:
    """Class means [K,C,S,S]; the closest pair is exactly `margin` apart in L2"""
    patterns = np.stack([_blob_pattern(g, spec.image_size, spec.blob_sigma, spec.channels)
                         for g in spec.source_classes])
    flat = patterns.reshape(len(patterns), -1)
    distances = [np.linalg.norm(flat[i] - flat[j])
                 for i in range(len(flat)) for j in range(i + 1, len(flat))]
    amplitude = spec.margin / min(distances)
    if amplitude * np.abs(patterns).max() > 0.5:
        raise ConfigError("synthetic margin too large for the image size",
                          details=f"margin={spec.margin}, image_size={spec.image_size}")
    return 0.5 + amplitude * patterns


def gen_synthetic(spec: SyntheticSpec, seed: int = 0) -> DatasetContainer:
    """Gaussian-blob classes plus pixel noise, clipped to [0,1]; deterministic per (spec, seed)"""
    templates = class_templates(spec)
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(spec.num_samples) % spec.num_classes)
    images = templates[labels] + rng.normal(0.0, spec.noise, size=(spec.num_samples,) + templates.shape[1:])
    images = np.clip(images, 0.0, 1.0)
    return DatasetContainer(images, labels, spec.num_classes, {
        "source": "synthetic",
        "seed": seed,
        "margin": spec.margin,
        "noise": spec.noise,
        "source_classes": spec.source_classes,
    })


def split_train_test(container: DatasetContainer, test_fraction: float = 0.25,
                     seed: int = 0) -> Tuple[DatasetContainer, DatasetContainer]:
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    order = np.random.default_rng(seed).permutation(len(container))
    n_test = max(1, int(round(test_fraction * len(container))))
    if n_test >= len(container):
        raise DatasetError("not enough samples to split", details=f"{len(container)} samples")
    return container.subset(np.sort(order[n_test:])), container.subset(np.sort(order[:n_test]))


def classes_disjoint(a: DatasetContainer, b: DatasetContainer) -> bool:
    return not set(a.metadata.get("source_classes", [])) & set(b.metadata.get("source_classes", []))


def save_container(container: DatasetContainer, path: str):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as f:
        np.savez_compressed(f, images=container.images, labels=container.labels,
                            num_classes=np.array(container.num_classes),
                            metadata=np.array(json.dumps(container.metadata, sort_keys=True)))
    logger.info("✓ saved %d samples to %s", len(container), path)


def load_container(path: str) -> DatasetContainer:
    if not os.path.exists(path):
        raise DatasetError(f"dataset file not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            return DatasetContainer(archive["images"], archive["labels"], int(archive["num_classes"]),
                                    json.loads(str(archive["metadata"])))
    except (KeyError, ValueError, OSError) as e:
        raise DatasetError(f"cannot read dataset container {path}", details=str(e))
