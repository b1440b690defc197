"""Single-file checkpoints shared by the denoiser and the feature extractor."""

from pathlib import Path

import torch

from .errors import CorruptHeader, UnreadableFile, UnwritablePath

CHECKPOINT_VERSION = 1


def save_checkpoint(path, kind: str, config: dict, state_dict: dict, **extra) -> Path:
    path = Path(path)
    payload = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config,
        "state_dict": {k: v.detach().cpu() for k, v in state_dict.items()},
        **extra,
    }
    try:
        torch.save(payload, path)
    except (OSError, RuntimeError) as exc:
        raise UnwritablePath(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path, kind: str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UnreadableFile(f"no such checkpoint: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CorruptHeader(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "version" not in payload:
        raise CorruptHeader(f"{path}: checkpoint has no version field")
    if payload["version"] != CHECKPOINT_VERSION:
        raise CorruptHeader(f"{path}: unsupported checkpoint version {payload['version']}")
    if payload.get("kind") != kind:
        raise CorruptHeader(f"{path}: expected a {kind} checkpoint, found {payload.get('kind')}")
    return payload
