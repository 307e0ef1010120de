# error_handler.py - Error types and stage-tagged failure reporting

import logging
from typing import Dict, Any, Optional

logger = logging.getLogger(__name__)


class ABNNError(Exception):
    """Base exception for every failure raised by this package"""
    error_type = "internal_error"

    def __init__(self, message: str, details: str = None, user_action: str = None, error_type: str = None):
        self.error_type = error_type or self.error_type
        self.message = message
        self.details = details
        self.user_action = user_action
        super().__init__(self.message)


class ShapeError(ABNNError):
    error_type = "shape_mismatch"


class NonFiniteError(ABNNError):
    error_type = "non_finite"


class GraphError(ABNNError):
    error_type = "graph_error"


class FrozenParameterError(ABNNError):
    error_type = "frozen_parameter"


class LabelError(ABNNError):
    error_type = "bad_label"


class EmptyTensorError(ABNNError):
    error_type = "empty_tensor"


class BlockMapError(ABNNError):
    error_type = "block_map"


class CheckpointError(ABNNError):
    error_type = "checkpoint"


class DatasetError(ABNNError):
    error_type = "dataset"


class ConfigError(ABNNError):
    error_type = "config"


class AttackError(ABNNError):
    error_type = "attack"


class TrainingDivergedError(ABNNError):
    error_type = "diverged"


class SubstituteNotFrozenError(ABNNError):
    error_type = "substitute_not_frozen"


class PipelineStageError(ABNNError):
    """Wraps the failure of one pipeline stage; `report` is the stage-tagged dict"""
    error_type = "stage_failed"

    def __init__(self, stage: str, cause: Exception, context: Dict = None):
        self.stage = stage
        self.cause = cause
        self.report = handle_stage_error(stage, cause, context)
        super().__init__(format_stage_error(self.report), details=self.report["details"],
                         user_action=self.report["user_action"], error_type=self.report["error_type"])


ERROR_MESSAGES = {
    "shape_mismatch": {
        "error": "Tensor shapes do not fit together",
        "user_action": "Check the block specs and the input resolution in the config."
    },
    "non_finite": {
        "error": "A computation produced NaN or Inf",
        "user_action": "Lower the learning rate or switch ABNN_DTYPE back to float64."
    },
    "graph_error": {
        "error": "Autodiff graph misuse",
        "user_action": "Run a fresh forward pass before calling backward again."
    },
    "frozen_parameter": {
        "error": "Attempted to update a frozen parameter",
        "user_action": "Only pass trainable parameters to the optimizer."
    },
    "bad_label": {
        "error": "Label outside the declared class range",
        "user_action": "Check the class subset and num_classes of the dataset."
    },
    "empty_tensor": {
        "error": "Statistics requested over an empty tensor",
        "user_action": "Use a batch with at least one sample and one spatial position."
    },
    "block_map": {
        "error": "Substitute and target blocks cannot be paired",
        "user_action": "Give the substitute at least as many blocks as the target."
    },
    "checkpoint": {
        "error": "Checkpoint file could not be read",
        "user_action": "Re-create the checkpoint with the same model specs."
    },
    "dataset": {
        "error": "Dataset could not be loaded",
        "user_action": "Check ABNN_DATA_ROOT and that the CIFAR-10 binary files are complete."
    },
    "config": {
        "error": "Invalid experiment config",
        "user_action": "Fix the field named in the details and rerun."
    },
    "attack": {
        "error": "Attack generation failed",
        "user_action": "Inspect the model for non-finite outputs on the attacked batch."
    },
    "diverged": {
        "error": "Training diverged",
        "user_action": "Lower the learning rate or the momentum."
    },
    "substitute_not_frozen": {
        "error": "Substitute model is not frozen",
        "user_action": "Pre-train (or load) and freeze the substitute before training the target."
    },
}


def handle_stage_error(stage: str, error: Exception, context: Dict = None) -> Dict[str, Any]:
    """
    Turn a failure in a pipeline stage into a stage-tagged, user-facing dict
    """
    error_type = getattr(error, "error_type", "internal_error")
    error_info = ERROR_MESSAGES.get(error_type, {
        "error": "Unexpected error",
        "user_action": "Rerun with ABNN_LOG_LEVEL=DEBUG and inspect the traceback."
    })

    details = getattr(error, "details", None) or str(error)
    user_action = getattr(error, "user_action", None) or error_info["user_action"]

    return {
        "stage": stage,
        "error": error_info["error"],
        "details": details,
        "user_action": user_action,
        "error_type": error_type,
        "context": context or {}
    }


def format_stage_error(error_dict: Dict[str, Any]) -> str:
    """One-line message for the command line"""
    message = f"[{error_dict['stage']}] {error_dict['error']}: {error_dict['details']}"
    if error_dict.get("user_action"):
        message += f" ({error_dict['user_action']})"
    return message


def log_error(error: Exception, context: Optional[Dict] = None):
    """
    Log errors with their type and context
    """
    error_info = {
        "error_type": getattr(error, "error_type", type(error).__name__),
        "error_message": str(error),
        "context": context or {}
    }
    logger.error("ERROR: %s", error_info)
