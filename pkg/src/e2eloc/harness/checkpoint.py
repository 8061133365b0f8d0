"""Checkpoint container.

A checkpoint is a numpy ``.npz`` archive:

* ``__format__``: string array, ``"e2eloc-checkpoint"``
* ``__version__``: int array, currently 1
* ``__config__``: JSON string holding ``attnet``, ``affnet``, ``classifier``
  config records and the full experiment config
* ``param/<name>``: one array per learnable parameter, dotted module path
* ``buffer/<name>``: non-learnable state (class centres)
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

FORMAT = "e2eloc-checkpoint"
VERSION = 1


def save_checkpoint(path: str | Path, model) -> None:
    from .train import model_configs

    att, aff, cls = model_configs(model.cfg)
    meta = {
        "attnet": dataclasses.asdict(att),
        "affnet": dataclasses.asdict(aff),
        "classifier": dataclasses.asdict(cls),
        "experiment": model.cfg.to_dict(),
    }
    arrays = {"__format__": np.array(FORMAT), "__version__": np.array(VERSION), "__config__": np.array(json.dumps(meta))}
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = p.data
    for key, value in model.centers.state().items():
        arrays[f"buffer/centers.{key}"] = value
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path):
    """Rebuild the model saved by :func:`save_checkpoint`."""
    from .config import ExperimentConfig
    from .train import build_model

    with np.load(path, allow_pickle=False) as data:
        if str(data["__format__"]) != FORMAT:
            raise ValueError(f"{path} is not an {FORMAT} file")
        version = int(data["__version__"])
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        meta = json.loads(str(data["__config__"]))
        cfg = ExperimentConfig(**meta["experiment"])
        model = build_model(cfg)
        params = dict(model.named_parameters())
        for name, p in params.items():
            arr = data[f"param/{name}"]
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()
        model.centers.load(
            {"centers": data["buffer/centers.centers"], "seen": data["buffer/centers.seen"]}
        )
    return model
