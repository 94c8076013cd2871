"""Versioned single-file checkpoints for a :class:`ModelBundle` and its training state."""
from __future__ import annotations

import os
from pathlib import Path

import torch

from .errors import CheckpointError
from .networks import DiscriminatorSpec, DownGeneratorSpec, SRGeneratorSpec, build_bundle

MAGIC = "MMSR-CKPT-v1"


def save_checkpoint(bundle, state, path, config=None) -> Path:
    """Write atomically (temp file then rename) so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "magic": MAGIC,
        "variant": bundle.variant,
        "specs": bundle.specs(),
        "params": bundle.param_groups(),
        "iteration": int(state.iteration),
        "epoch": int(state.epoch),
        "loss_history": list(state.loss_history),
        "rng_state": state.rng_state,
        "config": config.to_dict() if config is not None else None,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, with_config: bool = False):
    """Return ``(bundle, state)`` (plus the TrainConfig if ``with_config``)."""
    from .trainer import TrainConfig, TrainState

    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("magic") != MAGIC:
        found = payload.get("magic") if isinstance(payload, dict) else None
        raise CheckpointError(f"{path}: expected format {MAGIC!r}, found {found!r}")
    try:
        specs = payload["specs"]
        bundle = build_bundle(
            payload["variant"],
            SRGeneratorSpec(**specs["sr"]),
            DownGeneratorSpec(**specs["down"]),
            DiscriminatorSpec(**specs["dx"]),
            DiscriminatorSpec(**specs["dy"]),
        )
        bundle.load_param_groups(payload["params"])
        state = TrainState(
            iteration=payload["iteration"],
            epoch=payload["epoch"],
            loss_history=list(payload["loss_history"]),
            rng_state=payload["rng_state"] or {},
        )
        config = TrainConfig.from_dict(payload["config"]) if payload.get("config") else None
    except (KeyError, TypeError, RuntimeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint: {exc}") from exc
    bundle.eval()
    if with_config:
        return bundle, state, config
    return bundle, state
