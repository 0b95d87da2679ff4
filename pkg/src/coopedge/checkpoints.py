"""Saving and restoring trained models as named tensor archives.

Each archive's meta block records the model kind and the config needed to rebuild it.
"""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

from .dvib import DvibConfig, DvibModel
from .nn import load_archive, save_archive
from .sr import SrConfig, SrModel
from .vddib import VddibConfig, VddibModel
from .vib import VibConfig, VibModel


def _jsonable(cfg) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}


def save_model(path, model, extra: dict | None = None) -> None:
    if isinstance(model, VibModel):
        meta = {"kind": "vib", "in_dim": model.in_dim, "device_index": model.device_index}
    elif isinstance(model, VddibModel):
        meta = {"kind": "vddib", "feature_dims": list(model.feature_dims)}
    elif isinstance(model, SrModel):
        meta = {"kind": "vddib-sr", "feature_dims": list(model.feature_dims)}
    elif isinstance(model, DvibModel):
        meta = {"kind": "dvib", "in_dims": list(model.in_dims)}
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    meta.update(num_classes=model.num_classes, config=_jsonable(model.cfg), trained=model.trained, extra=extra or {})
    save_archive(path, model.store.state_dict(), meta)


def load_model(path):
    tensors, meta = load_archive(Path(path))
    kind, c = meta.get("kind"), meta.get("config", {})
    if kind == "vib":
        model = VibModel(meta["in_dim"], meta["num_classes"], VibConfig(**c), meta["device_index"])
    elif kind == "vddib":
        model = VddibModel(meta["feature_dims"], meta["num_classes"], VddibConfig(**c))
    elif kind == "vddib-sr":
        model = SrModel(meta["feature_dims"], meta["num_classes"], SrConfig(**c))
    elif kind == "dvib":
        model = DvibModel(meta["in_dims"], meta["num_classes"], DvibConfig(**c))
    else:
        raise ValueError(f"{path}: unknown model kind {kind!r}")
    model.store.load_state_dict(tensors)
    model.trained = bool(meta.get("trained", False))
    return model
