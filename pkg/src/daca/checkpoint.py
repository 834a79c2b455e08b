"""Bit-exact model checkpoints: JSON with base64-encoded little-endian float64."""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from .tensor import Mlp
from .trainer import NETS, DacaModel, TrainConfig

FORMAT = "daca-checkpoint/1"


class CheckpointError(ValueError):
    pass


def _encode(a: np.ndarray) -> dict:
    data = np.ascontiguousarray(a, dtype="<f8").tobytes()
    return {"shape": list(a.shape), "data": base64.b64encode(data).decode("ascii")}


def _decode(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(obj["shape"])


def dumps(model: DacaModel, config: TrainConfig, feature_dim: int) -> str:
    nets = {}
    for name, net in model.nets().items():
        nets[name] = {
            "sizes": net.sizes,
            "activation": net.activation,
            "output": net.output,
            "weights": [_encode(w) for w in net.weights],
            "biases": [_encode(b) for b in net.biases],
        }
    doc = {"format": FORMAT, "feature_dim": feature_dim, "seed": config.seed,
           "config": config.to_kv(), "nets": nets}
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def save(path, model: DacaModel, config: TrainConfig, feature_dim: int) -> None:
    Path(path).write_text(dumps(model, config, feature_dim), encoding="utf-8")


def load(path) -> tuple[DacaModel, TrainConfig, int]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported format {doc.get('format')!r}")
    try:
        nets = {}
        for name in NETS:
            n = doc["nets"][name]
            nets[name] = Mlp([_decode(w) for w in n["weights"]], [_decode(b) for b in n["biases"]],
                             n["activation"], n["output"])
        return DacaModel(**nets), TrainConfig.from_kv(doc["config"]), int(doc["feature_dim"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc!r})") from None
