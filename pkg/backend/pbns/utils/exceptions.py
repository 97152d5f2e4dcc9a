"""
Custom exceptions for pbns.

This module defines the exception hierarchy raised by the numerical core and the
command line. Each exception class carries the process exit code the command
line reports for it, a stable machine-readable error code and a default message.
"""

import logging
from typing import Any, Dict, Optional

logger = logging.getLogger(__name__)


class PbnsError(Exception):
    """Base class for all pbns errors."""

    exit_code = 1
    error_code = "internal_error"
    default_message = "An unexpected error occurred"

    def __init__(self, message: Optional[str] = None, details: Optional[Dict[str, Any]] = None):
        """
        Initialize the error.

        Args:
            message: A human-readable error message
            details: Additional details about the error
        """
        self.message = message or self.default_message
        self.details = details or {}
        super().__init__(self.message)

    def to_dict(self) -> Dict[str, Any]:
        """
        Convert the error to a dictionary that can be logged or written as JSON.

        Returns:
            Dict[str, Any]: A dictionary representation of the error
        """
        error_dict = {
            "error": self.error_code,
            "message": self.message,
            "exit_code": self.exit_code,
        }

        if self.details:
            error_dict["details"] = self.details

        return error_dict


class ConfigError(PbnsError):
    """Raised when a configuration file or command option is invalid."""

    exit_code = 2
    error_code = "config_error"
    default_message = "The configuration is invalid"


class DataError(PbnsError):
    """Raised when an input file cannot be parsed or violates an invariant."""

    exit_code = 3
    error_code = "data_error"
    default_message = "The input data is invalid"


class MeshError(DataError):
    error_code = "mesh_error"
    default_message = "The mesh is invalid"


class BodyModelError(DataError):
    """Raised when a body model violates one or more invariants. Lists all of them."""

    error_code = "body_model_error"
    default_message = "The body model is invalid"


class PoseFileError(DataError):
    error_code = "pose_file_error"
    default_message = "The pose file is invalid"


class CheckpointError(DataError):
    error_code = "checkpoint_error"
    default_message = "The checkpoint is corrupted"


class CheckpointVersionError(CheckpointError):
    error_code = "checkpoint_version"
    default_message = "The checkpoint was written by an incompatible version"


class CheckpointHashError(CheckpointError):
    error_code = "checkpoint_hash"
    default_message = "The checkpoint does not match the garment or body"


class TensorShapeError(DataError):
    """Raised when an op receives inputs with incompatible shapes."""

    error_code = "tensor_shape"
    default_message = "Incompatible tensor shapes"


class NumericAbortError(PbnsError):
    """Raised when a computation produces non-finite values or diverges."""

    exit_code = 4
    error_code = "numeric_abort"
    default_message = "The computation produced non-finite values"
