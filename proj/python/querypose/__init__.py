"""Python bindings for the querypose C++ core."""

# Loads libtorch into the process so the extension's dependencies resolve.
import torch  # noqa: F401

from ._core import (  # noqa: F401
    CheckpointError,
    ConfigConflictError,
    ConfigError,
    DataError,
    GeometryError,
    Model,
    NumericError,
    ShapeError,
    evaluate_ap,
    generate_scene,
    giou,
    hungarian,
    oks,
    part_division,
    pose_score,
    rle_loss,
)

__all__ = [
    "Model",
    "evaluate_ap",
    "generate_scene",
    "giou",
    "hungarian",
    "oks",
    "part_division",
    "pose_score",
    "rle_loss",
]
