"""Checkpoint container: a safetensors archive whose header carries JSON metadata.

Layout on disk is the safetensors format (8-byte little-endian header length,
JSON header, raw tensor bytes). Our metadata lives as a JSON string under the
``comofusion`` key of the header's ``__metadata__`` map and always holds
``format_version`` and ``stage`` (``cm`` or ``fusion``).
"""
import json
from pathlib import Path

import torch
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file

from .errors import CheckpointError

FORMAT_VERSION = 1
META_KEY = "comofusion"


def save_checkpoint(path, tensors, meta):
    if meta.get("stage") not in ("cm", "fusion"):
        raise ValueError(f"stage must be 'cm' or 'fusion', got {meta.get('stage')!r}")
    meta = {"format_version": FORMAT_VERSION, **meta}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    flat = {k: v.detach().contiguous().cpu() for k, v in tensors.items()}
    save_file(flat, str(tmp), metadata={META_KEY: json.dumps(meta)})
    tmp.replace(path)


def read_meta(path):
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            n = int.from_bytes(fh.read(8), "little")
            header = json.loads(fh.read(n))
        return json.loads(header["__metadata__"][META_KEY])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"cannot read checkpoint header {path}: {exc}") from exc


def load_checkpoint(path):
    """Return (tensors, meta)."""
    meta = read_meta(path)
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {meta.get('format_version')}")
    try:
        tensors = load_file(str(path))
    except (OSError, SafetensorError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return tensors, meta


def prefixed(state, prefix):
    return {f"{prefix}.{k}": v for k, v in state.items()}


def unprefixed(tensors, prefix):
    p = prefix + "."
    return {k[len(p):]: v for k, v in tensors.items() if k.startswith(p)}


def pack_optimizer(opt):
    """Split an optimizer state_dict into tensors and a JSON-able remainder."""
    sd = opt.state_dict()
    tensors = {}
    scalars = {}
    for idx, st in sd["state"].items():
        for name, val in st.items():
            if torch.is_tensor(val):
                tensors[f"optim.{idx}.{name}"] = val
            else:
                scalars[f"{idx}.{name}"] = val
    return tensors, {"param_groups": sd["param_groups"], "scalars": scalars}


def unpack_optimizer(opt, tensors, info):
    state = {}
    for key, val in tensors.items():
        if not key.startswith("optim."):
            continue
        _, idx, name = key.split(".", 2)
        state.setdefault(int(idx), {})[name] = val
    for key, val in info["scalars"].items():
        idx, name = key.split(".", 1)
        state.setdefault(int(idx), {})[name] = val
    opt.load_state_dict({"state": state, "param_groups": info["param_groups"]})
