"""Python bindings for the sicp cooperative perception engine."""

import json
from typing import Any, Optional

from ._core import (
    Box,
    GridSpec,
    Pose2D,
    SicpError,
    average_precision,
    config_hash,
    decode_message,
    derive_seed,
    dpnet_parameter_count,
    encode_message,
    generate_scene,
    gradcheck_suite,
    nms,
    rotated_iou,
    warp,
)
from . import _core

__all__ = [
    "Box",
    "GridSpec",
    "Pose2D",
    "SicpError",
    "average_precision",
    "config",
    "config_hash",
    "decode_message",
    "derive_seed",
    "dpnet_parameter_count",
    "encode_message",
    "generate_scene",
    "gradcheck_suite",
    "nms",
    "rotated_iou",
    "run",
    "warp",
]


def _overrides(overrides: Optional[dict]) -> Optional[str]:
    return None if overrides is None else json.dumps(overrides)


def config(preset: str = "desk", overrides: Optional[dict] = None) -> dict:
    """Resolved experiment configuration as a dict."""
    return json.loads(_core.config_json(preset, _overrides(overrides)))


def run(mode: str, out_dir: str, preset: str = "desk", overrides: Optional[dict] = None,
        checkpoint: Optional[str] = None) -> list[dict[str, Any]]:
    """Run train | eval | ablate | gradcheck | simulate and return the EvalResults."""
    rows = _core.run_experiment(mode, out_dir, preset, _overrides(overrides), checkpoint)
    return [json.loads(r) for r in rows]
