"""Checkpoints: a tensor container of f32 records plus a key=value config sidecar."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from ..numerics import Parameter, read_container, write_container
from .config import ModelConfig
from .detector import init_params


class CheckpointError(ValueError):
    pass


def sidecar_path(path) -> Path:
    return Path(str(path) + ".cfg")


def save_checkpoint(params, cfg: ModelConfig, path, dtype=np.float32) -> None:
    path = Path(path)
    records = {name: np.asarray(p.data, dtype=dtype) for name, p in sorted(params.items())}
    tmp = path.with_name(path.name + ".tmp")
    write_container(tmp, records)
    os.replace(tmp, path)
    sidecar_path(path).write_text(cfg.to_text())


def load_checkpoint(path, cfg: ModelConfig | None = None) -> tuple[dict[str, Parameter], ModelConfig]:
    """Read a checkpoint, checking every record's name and shape against the config.

    With ``cfg`` given, the stored config must equal it.
    """
    path = Path(path)
    side = sidecar_path(path)
    if not side.exists():
        raise CheckpointError(f"missing config sidecar {side}")
    stored = ModelConfig.from_text(side.read_text())
    if cfg is not None and cfg != stored:
        diffs = [f"{k}: stored {getattr(stored, k)!r} vs requested {getattr(cfg, k)!r}"
                 for k in stored.__dataclass_fields__ if getattr(stored, k) != getattr(cfg, k)]
        raise CheckpointError("checkpoint config mismatch: " + "; ".join(diffs))
    records = read_container(path)
    expected = init_params(stored, seed=0)
    for name, ref in expected.items():
        if name not in records:
            raise CheckpointError(f"checkpoint is missing record {name!r}")
        if records[name].shape != ref.shape:
            raise CheckpointError(f"record {name!r} has shape {records[name].shape}, expected {ref.shape}")
    extra = sorted(set(records) - set(expected))
    if extra:
        raise CheckpointError(f"unexpected record {extra[0]!r} in checkpoint")
    params = {}
    for name in expected:
        p = Parameter(records[name].astype(np.float64))
        p.name = name
        params[name] = p
    return params, stored
