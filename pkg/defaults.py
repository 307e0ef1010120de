# defaults.py - Default experiment settings and environment configuration

import os

try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

# Environment
DATA_ROOT = os.environ.get("ABNN_DATA_ROOT", "./data")
OUTPUT_DIR = os.environ.get("ABNN_OUTPUT_DIR", "./runs")
LOG_LEVEL = os.environ.get("ABNN_LOG_LEVEL", "INFO")
DTYPE = os.environ.get("ABNN_DTYPE", "float64")
RUN_SLOW = os.environ.get("ABNN_RUN_SLOW", "0") == "1"

CIFAR10_DIRNAME = "cifar-10-batches-bin"
CIFAR10_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST_FILES = ["test_batch.bin"]

# Toy backbones: (out_channels, kernel_size, stride, pool)
TARGET_BLOCKS = [
    (16, 3, 1, True),
    (32, 3, 1, True),
    (64, 3, 1, True),
    (64, 3, 1, False),
]
SUBSTITUTE_BLOCKS = [
    (8, 3, 1, True),
    (16, 3, 1, True),
    (32, 3, 1, True),
    (32, 3, 1, False),
]
INPUT_SHAPE = (3, 32, 32)

NORM = {
    "eps": 1e-5,
    "momentum": 0.1,
    "encoder_init_scale": 1e-2,
}

# Attack settings: eps 8/255 and 5 iterations, ROA over 10% of the input
PGD = {
    "epsilon": 8 / 255,
    "t_max": 5,
    "step_size": None,  # 2.5 * epsilon / t_max
    "random_start": True,
}
ROA = {
    "area_fraction": 0.10,
    "search_stride": 2,
    "t_max": 5,
    "step_size": 0.1,
    "fill_value": 0.5,
}

SGD = {
    "learning_rate": 0.05,
    "momentum": 0.9,
    "weight_decay": 0.0,
    "epochs": 5,
    "batch_size": 64,
    "schedule": "constant",
    "step_epochs": 10,
    "gamma": 0.1,
}

# Disjoint class split for CIFAR-10
SUBSTITUTE_CLASSES = [0, 1, 2, 3, 4]
TARGET_CLASSES = [5, 6, 7, 8, 9]

SYNTHETIC = {
    "num_samples": 1000,
    "image_size": 32,
    "num_classes": 2,
    "margin": 0.75,
    "noise": 0.075,
    "blob_sigma": 5.0,
}

RESULTS_COLUMNS = ["method", "clean_acc", "pgd_acc", "roa_acc", "passes_per_step"]
METHODS = ["no-defense", "abnn", "pgd-at"]
