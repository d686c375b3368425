"""Checkpoint file: plain-text header + raw little-endian float32 parameters.

    line 1   "D3MES-CKPT 1"
    line 2   one-line JSON: {"config": RunConfig, "manifest": [{"name", "shape",
             "offset", "count"}, ...], "size_histogram": {...},
             "class_histograms": {...}, "body_bytes": int}
    body     concatenated parameter arrays in manifest order (offsets in floats)
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .dit import D3MES

MAGIC = "D3MES-CKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: D3MES, config: RunConfig, size_histogram: dict, class_histograms: dict | None = None, state: dict | None = None) -> None:
    state = state if state is not None else model.state_dict()
    manifest, chunks, offset = [], [], 0
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4").ravel()
        manifest.append({"name": name, "shape": list(tensor.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr)
        offset += arr.size
    body = np.concatenate(chunks).tobytes() if chunks else b""
    header = {
        "version": VERSION,
        "config": config.to_dict(),
        "manifest": manifest,
        "size_histogram": {str(k): int(v) for k, v in sorted(size_histogram.items())},
        "class_histograms": {
            str(c): {str(k): int(v) for k, v in sorted(h.items())} for c, h in sorted((class_histograms or {}).items())
        },
        "body_bytes": len(body),
    }
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(f"{MAGIC} {VERSION}\n".encode())
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(body)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[D3MES, RunConfig, dict]:
    """Returns ``(model in eval mode, config, header)``."""
    with open(path, "rb") as fh:
        first = fh.readline().decode(errors="replace").split()
        if len(first) != 2 or first[0] != MAGIC:
            raise CheckpointError(f"{path}: not a d3mes checkpoint")
        if int(first[1]) != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {first[1]}")
        header = json.loads(fh.readline().decode())
        body = fh.read()
    if len(body) != header["body_bytes"]:
        raise CheckpointError(f"{path}: truncated body")
    values = np.frombuffer(body, dtype="<f4")
    expected = 0
    for entry in header["manifest"]:
        if entry["offset"] != expected or entry["count"] != int(np.prod(entry["shape"], dtype=np.int64)):
            raise CheckpointError(f"{path}: inconsistent manifest at {entry['name']}")
        expected += entry["count"]
    if expected != values.size:
        raise CheckpointError(f"{path}: manifest covers {expected} floats, body has {values.size}")

    config = RunConfig.from_dict(header["config"])
    model = D3MES(config.dit_config())
    state = {
        e["name"]: torch.from_numpy(values[e["offset"] : e["offset"] + e["count"]].reshape(e["shape"]).copy())
        for e in header["manifest"]
    }
    model.load_state_dict(state)
    model.eval()
    header["size_histogram"] = {int(k): v for k, v in header["size_histogram"].items()}
    header["class_histograms"] = {
        int(c): {int(k): v for k, v in h.items()} for c, h in header["class_histograms"].items()
    }
    return model, config, header
