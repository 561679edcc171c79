"""Lossless JSON checkpoints for classifier and CRF parameters.

Float arrays are serialized as hex-encoded little-endian IEEE 754 doubles so
save/load round-trips are bit exact.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classifier import AdamState, ClassifierParams, from_architecture
from .crf import CrfParams
from .errors import ConfigError

CHECKPOINT_VERSION = 1
CRF_SECTION_VERSION = 1


def encode_array(array: np.ndarray) -> dict:
    array = np.ascontiguousarray(array, dtype=np.float64)
    return {"shape": list(array.shape), "hex": array.tobytes().hex()}


def decode_array(payload: dict) -> np.ndarray:
    data = np.frombuffer(bytes.fromhex(payload["hex"]), dtype="<f8")
    return data.reshape(payload["shape"]).copy()


def _encode_arrays(arrays: dict[str, np.ndarray]) -> dict:
    return {name: encode_array(np.asarray(value)) for name, value in arrays.items()}


def _decode_arrays(payload: dict) -> dict[str, np.ndarray]:
    return {name: decode_array(value) for name, value in payload.items()}


def _encode_adam(state: AdamState) -> dict:
    return {
        "step": state.step,
        "first_moment": _encode_arrays(state.first_moment),
        "second_moment": _encode_arrays(state.second_moment),
    }


def _decode_adam(payload: dict) -> AdamState:
    return AdamState(
        step=int(payload["step"]),
        first_moment=_decode_arrays(payload["first_moment"]),
        second_moment=_decode_arrays(payload["second_moment"]),
    )


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    classifier: ClassifierParams
    classifier_state: AdamState
    crf: CrfParams
    crf_state: AdamState
    step_count: int
    config: dict

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    crf = checkpoint.crf
    payload = {
        "version": CHECKPOINT_VERSION,
        "architecture": checkpoint.classifier.architecture(),
        "classifier": {
            "params": _encode_arrays(checkpoint.classifier.arrays()),
            "optimizer": _encode_adam(checkpoint.classifier_state),
        },
        "crf": {
            "version": CRF_SECTION_VERSION,
            "params": _encode_arrays(crf.learnable_arrays()),
            "sigma_near": crf.sigma_near,
            "sigma_far": crf.sigma_far,
            "sigma_feat": crf.sigma_feat,
            "iterations": crf.iterations,
            "far_sign": crf.far_sign,
            "cutoff": crf.cutoff,
            "optimizer": _encode_adam(checkpoint.crf_state),
        },
        "step_count": checkpoint.step_count,
        "config": checkpoint.config,
        "config_hash": checkpoint.config_hash,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_checkpoint(path) -> Checkpoint:
    payload = json.loads(Path(path).read_text())
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')!r}")
    skeleton = from_architecture(payload["architecture"])
    classifier = skeleton.replace_arrays(_decode_arrays(payload["classifier"]["params"]))
    crf_payload = payload["crf"]
    crf_arrays = _decode_arrays(crf_payload["params"])
    crf = CrfParams(
        compatibility=crf_arrays["compatibility"],
        weight_near=float(crf_arrays["weight_near"]),
        weight_far=float(crf_arrays["weight_far"]),
        weight_feat=float(crf_arrays["weight_feat"]),
        sigma_near=crf_payload["sigma_near"],
        sigma_far=crf_payload["sigma_far"],
        sigma_feat=crf_payload["sigma_feat"],
        iterations=crf_payload["iterations"],
        far_sign=crf_payload["far_sign"],
        cutoff=crf_payload["cutoff"],
    )
    stored_hash = payload.get("config_hash")
    if stored_hash is not None and stored_hash != config_hash(payload["config"]):
        raise ConfigError("checkpoint config hash does not match its config")
    return Checkpoint(
        classifier=classifier,
        classifier_state=_decode_adam(payload["classifier"]["optimizer"]),
        crf=crf,
        crf_state=_decode_adam(crf_payload["optimizer"]),
        step_count=int(payload["step_count"]),
        config=payload["config"],
    )
