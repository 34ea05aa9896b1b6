"""Versioned checkpoint container.

Layout::

    b"OSSEGCKP"               8-byte magic
    uint32 little-endian      header length in bytes
    header                    UTF-8 JSON: format version, configs, history,
                              parameter manifest (name, shape, offset, nbytes)
    blobs                     raw little-endian float32 parameter data

Offsets in the manifest are relative to the start of the blob section.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"OSSEGCKP"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    model: torch.nn.Module
    model_config: object
    train_config: dict
    split_index: int
    episode: int
    history: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    manifest, blobs, offset = [], [], 0
    for name, tensor in ckpt.model.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw), "dtype": "<f4"})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config,
        "split_index": ckpt.split_index,
        "episode": ckpt.episode,
        "history": ckpt.history,
        "params": manifest,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(head)))
            fh.write(head)
            for raw in blobs:
                fh.write(raw)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def read_header(path: str | Path) -> tuple[dict, int]:
    """Return the parsed header and the file offset of the blob section."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic {magic!r})")
        (n,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(n).decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('format_version')}")
    return header, len(MAGIC) + 4 + n


def load_checkpoint(path: str | Path) -> Checkpoint:
    from .model import ModelConfig, OneShotSegNet

    path = Path(path)
    try:
        header, start = read_header(path)
        data = path.read_bytes()[start:]
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    mcfg = ModelConfig.from_dict(header["model_config"])
    model = OneShotSegNet(mcfg)
    state = {}
    for entry in header["params"]:
        chunk = data[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise CheckpointError(f"truncated parameter {entry['name']} in {path}")
        arr = np.frombuffer(chunk, dtype=entry["dtype"]).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(state)
    model.eval()
    return Checkpoint(
        model=model,
        model_config=mcfg,
        train_config=header["train_config"],
        split_index=header["split_index"],
        episode=header["episode"],
        history=header["history"],
    )
