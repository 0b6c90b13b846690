"""JSON persistence for fitted survival models."""

from __future__ import annotations

import json
from pathlib import Path

from .cox import CoxModel
from .forest import RsfModel
from .mlp import MlpSurvModel

__all__ = ["save_model", "load_model", "FORMAT_VERSION"]

FORMAT_VERSION = 1

_CLASSES = {"coxph": CoxModel, "rsf": RsfModel, "mlpcox": MlpSurvModel}


def save_model(model, path) -> None:
    payload = model.to_dict()
    if payload.get("model") not in _CLASSES:
        raise ValueError(f"unknown model payload {payload.get('model')!r}")
    payload["format_version"] = FORMAT_VERSION
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def load_model(path):
    payload = json.loads(Path(path).read_text())
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version!r}")
    kind = payload.get("model")
    if kind not in _CLASSES:
        raise ValueError(f"unknown model kind {kind!r}")
    return _CLASSES[kind].from_dict(payload)
