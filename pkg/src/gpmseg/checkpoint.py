"""Checkpoint archive: named parameter arrays plus a JSON manifest.

One .npz file holds every state-dict entry under ``param/<name>`` and a
``__manifest__`` JSON string with a format-version field and the model
config. Writes are atomic (temp file, then rename), and the archive bytes
are a pure function of its contents, so identical runs hash identically.
"""

import json
import os
import tempfile

import numpy as np
import torch

from .backbone import UNet, model_config, model_from_config
from .errors import CheckpointError

FORMAT_VERSION = 1
_PARAM_PREFIX = "param/"


def save_checkpoint(path: str, model: UNet, extra: dict | None = None) -> None:
    manifest = {
        "format_version": FORMAT_VERSION,
        "model": model_config(model),
        "extra": extra or {},
    }
    arrays = {"__manifest__": np.array(json.dumps(manifest, sort_keys=True))}
    for name, tensor in model.state_dict().items():
        arrays[_PARAM_PREFIX + name] = tensor.detach().cpu().numpy()

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".npz.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_manifest(path: str) -> dict:
    try:
        with np.load(path, allow_pickle=False) as archive:
            manifest = json.loads(str(archive["__manifest__"]))
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint {path} has format version {version}, expected {FORMAT_VERSION}")
    return manifest


def load_checkpoint(path: str) -> tuple[dict, dict]:
    """Return (state_dict of tensors, manifest)."""
    manifest = read_manifest(path)
    state = {}
    with np.load(path, allow_pickle=False) as archive:
        for key in archive.files:
            if key.startswith(_PARAM_PREFIX):
                state[key[len(_PARAM_PREFIX):]] = torch.from_numpy(archive[key].copy())
    return state, manifest


def model_from_checkpoint(path: str) -> tuple[UNet, dict]:
    state, manifest = load_checkpoint(path)
    model = model_from_config(manifest["model"])
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint {path} does not fit its declared config: {exc}") from exc
    return model, manifest
