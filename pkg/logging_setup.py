# logging_setup.py - Logging configuration shared by the CLI and pipeline

import logging

from defaults import LOG_LEVEL

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str = None) -> int:
    """Configure the root logger once; returns the numeric level in effect"""
    level_name = (level or LOG_LEVEL).upper()
    numeric = getattr(logging, level_name, logging.INFO)
    logging.basicConfig(level=numeric, format=LOG_FORMAT)
    logging.getLogger().setLevel(numeric)
    return numeric


def progress_disabled() -> bool:
    """tqdm bars are shown only at INFO or more verbose"""
    return logging.getLogger().getEffectiveLevel() > logging.INFO
