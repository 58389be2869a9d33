"""Bit-exact JSON containers for detector checkpoints and consolidation state.

Vectors are stored as base64-encoded little-endian float64 bytes, so a
save/load round-trip reproduces every bit (including signed zeros and
denormals). The layout table and anchor settings ride along so a
checkpoint is self-describing.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .consolidation import ConsolidationState
from .detector import AnchorConfig, Architecture, DetectorParams, ParamSlice

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised when a container cannot be parsed or fails validation."""


@dataclass(frozen=True)
class Checkpoint:
    params: DetectorParams
    anchor_config: AnchorConfig
    architecture: Architecture
    seed: int
    phase: str


def _encode_vector(values: np.ndarray) -> str:
    arr = np.ascontiguousarray(values, dtype="<f8")
    return base64.b64encode(arr.tobytes()).decode("ascii")


def _decode_vector(text: str, expected: int | None = None) -> np.ndarray:
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except Exception as err:
        raise CheckpointError(f"corrupt vector payload: {err}") from err
    if len(raw) % 8 != 0:
        raise CheckpointError("vector payload is not a whole number of float64s")
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    if expected is not None and arr.size != expected:
        raise CheckpointError(f"expected {expected} values, found {arr.size}")
    return arr


def _anchor_config_dict(config: AnchorConfig) -> dict:
    return {
        "image_size": config.image_size,
        "grid_stride": config.grid_stride,
        "anchor_heights": list(config.anchor_heights),
        "anchor_aspect_ratios": list(config.anchor_aspect_ratios),
        "score_threshold": config.score_threshold,
        "nms_iou_threshold": config.nms_iou_threshold,
        "max_detections": config.max_detections,
    }


def anchor_config_from_dict(d: dict) -> AnchorConfig:
    return AnchorConfig(
        image_size=int(d["image_size"]),
        grid_stride=int(d["grid_stride"]),
        anchor_heights=tuple(d["anchor_heights"]),
        anchor_aspect_ratios=tuple(d["anchor_aspect_ratios"]),
        score_threshold=float(d["score_threshold"]),
        nms_iou_threshold=float(d["nms_iou_threshold"]),
        max_detections=int(d.get("max_detections", 64)),
    )


def save_checkpoint(path, params: DetectorParams, anchor_config: AnchorConfig,
                    seed: int, phase: str,
                    architecture: Architecture | None = None) -> None:
    arch = architecture or _arch_from_layout(params)
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "detector-checkpoint",
        "architecture": arch.to_dict(),
        "anchor_config": _anchor_config_dict(anchor_config),
        "layout": [{"name": sl.name, "offset": sl.offset, "shape": list(sl.shape)}
                   for sl in params.layout],
        "dtype": "<f8",
        "values": _encode_vector(params.values),
        "seed": int(seed),
        "phase": str(phase),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_checkpoint(path) -> Checkpoint:
    doc = _read_doc(path, "detector-checkpoint")
    layout = tuple(ParamSlice(name=e["name"], offset=int(e["offset"]),
                              shape=tuple(int(s) for s in e["shape"]))
                   for e in doc["layout"])
    values = _decode_vector(doc["values"])
    try:
        params = DetectorParams(values, layout)
        arch = Architecture.from_dict(doc["architecture"])
        config = anchor_config_from_dict(doc["anchor_config"])
    except (KeyError, ValueError) as err:
        raise CheckpointError(f"invalid checkpoint contents: {err}") from err
    return Checkpoint(params=params, anchor_config=config, architecture=arch,
                      seed=int(doc["seed"]), phase=str(doc["phase"]))


def save_consolidation(path, state: ConsolidationState) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": "consolidation-state",
        "dtype": "<f8",
        "snapshot": _encode_vector(state.snapshot),
        "fisher": _encode_vector(state.fisher),
        "lambda": state.lam,
        "source_dataset_id": state.source_dataset_id,
        "sample_count": state.sample_count,
        "mode": state.mode,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_consolidation(path) -> ConsolidationState:
    doc = _read_doc(path, "consolidation-state")
    snapshot = _decode_vector(doc["snapshot"])
    fisher = _decode_vector(doc["fisher"], expected=snapshot.size)
    try:
        return ConsolidationState(
            snapshot=snapshot, fisher=fisher, lam=float(doc["lambda"]),
            source_dataset_id=str(doc["source_dataset_id"]),
            sample_count=int(doc["sample_count"]),
            mode=str(doc.get("mode", "squared")))
    except (KeyError, ValueError) as err:
        raise CheckpointError(f"invalid consolidation contents: {err}") from err


def _read_doc(path, kind: str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no file at {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise CheckpointError(f"corrupt container: {err}") from err
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported format_version {doc.get('format_version')!r}")
    if doc.get("kind") != kind:
        raise CheckpointError(f"expected a {kind} container, got {doc.get('kind')!r}")
    if doc.get("dtype") != "<f8":
        raise CheckpointError(f"unsupported dtype {doc.get('dtype')!r}")
    return doc


def _arch_from_layout(params: DetectorParams) -> Architecture:
    shapes = {sl.name: sl.shape for sl in params.layout}
    return Architecture(in_channels=shapes["conv1.weight"][1],
                        channels=tuple(shapes[f"conv{i}.weight"][0] for i in (1, 2, 3)),
                        anchors_per_cell=shapes["cls.weight"][0])


def vector_hash(values: np.ndarray) -> str:
    """sha256 of the raw little-endian float64 bytes; checkpoint fingerprint."""
    arr = np.ascontiguousarray(values, dtype="<f8")
    return hashlib.sha256(arr.tobytes()).hexdigest()


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
