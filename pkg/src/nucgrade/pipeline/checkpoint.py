"""Checkpoint container.

A checkpoint is an uncompressed ``.npz`` archive (readable without pickle):

* ``param/<name>``          every entry of the model ``state_dict`` (parameters and buffers)
* ``optim/<name>/<field>``  Adam moments and step count per parameter name
* ``meta``                  0-d unicode array holding a JSON document with keys
  ``format``, ``config`` (TrainConfig as a dict), ``epoch`` (epochs completed),
  ``seed``, ``history`` (per-epoch log) and ``best_apq``.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch

from ..network import CHRNet, ConfigError
from .config import TrainConfig

FORMAT = "nucgrade-checkpoint/1"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, model: CHRNet, config: TrainConfig, epoch: int, history=(),
                    best_apq: float | None = None, optimizer: torch.optim.Optimizer | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                for field, value in optimizer.state.get(p, {}).items():
                    arrays[f"optim/{names[id(p)]}/{field}"] = torch.as_tensor(value).cpu().numpy()
    meta = {"format": FORMAT, "config": config.to_dict(), "epoch": int(epoch),
            "seed": config.seed, "history": list(history), "best_apq": best_apq}
    arrays["meta"] = np.array(json.dumps(meta))
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Return ``(meta, params, optim)`` from a checkpoint file."""
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            params = {k[len("param/"):]: data[k] for k in data.files if k.startswith("param/")}
            optim = {k[len("optim/"):]: data[k] for k in data.files if k.startswith("optim/")}
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unsupported format {meta.get('format')!r}")
    return meta, params, optim


def load_model(path) -> tuple[CHRNet, TrainConfig, dict]:
    meta, params, _ = read_checkpoint(path)
    try:
        config = TrainConfig.from_dict(meta["config"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: invalid stored config: {exc}") from exc
    model = CHRNet(config.network)
    load_params(model, params)
    return model, config, meta


def load_params(model: CHRNet, params: dict[str, np.ndarray]) -> None:
    state = model.state_dict()
    if set(state) != set(params):
        missing = sorted(set(state) - set(params))[:5]
        extra = sorted(set(params) - set(state))[:5]
        raise CheckpointError(f"parameter names differ (missing {missing}, unexpected {extra})")
    for k, v in params.items():
        if tuple(state[k].shape) != v.shape:
            raise CheckpointError(f"{k}: checkpoint shape {v.shape} != model {tuple(state[k].shape)}")
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in params.items()})


def load_optimizer_state(optimizer: torch.optim.Optimizer, model: CHRNet,
                         optim: dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    for key, value in optim.items():
        name, _, field = key.rpartition("/")
        if name not in params:
            raise CheckpointError(f"optimizer state for unknown parameter {name!r}")
        optimizer.state[params[name]][field] = torch.from_numpy(np.array(value))
