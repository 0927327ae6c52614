"""Checkpoint format: one JSON header line (format id, version, model config,
parameter manifest) followed by the raw parameter blobs as little-endian
float64, concatenated in the header's order.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path
from typing import Tuple

import numpy as np

from .errors import CorruptData, IncompatibleFormat, IoError
from .model import ModelConfig, ModelParams, init_params

FORMAT_ID = "geospd-checkpoint"
FORMAT_VERSION = 1


def save(path, params: ModelParams, config: ModelConfig) -> Path:
    """Write a checkpoint; byte-identical for identical params and config."""
    named = params.named_arrays()
    header = {
        "format": FORMAT_ID,
        "version": FORMAT_VERSION,
        "config": asdict(config),
        "params": [{"name": n, "shape": list(a.shape)} for n, a in named],
    }
    out = Path(path)
    try:
        with open(out, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
            fh.write(b"\n")
            for _, arr in named:
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {out}: {exc}") from exc
    return out


def load(path) -> Tuple[ModelParams, ModelConfig]:
    """Read a checkpoint back into params and config."""
    p = Path(path)
    try:
        blob = p.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {p}: {exc}") from exc
    newline = blob.find(b"\n")
    if newline < 0:
        raise IncompatibleFormat("checkpoint has no header line")
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IncompatibleFormat(f"checkpoint header is not JSON: {exc}") from exc
    if header.get("format") != FORMAT_ID:
        raise IncompatibleFormat(f"not a {FORMAT_ID} file")
    if header.get("version") != FORMAT_VERSION:
        raise IncompatibleFormat(f"unsupported checkpoint version {header.get('version')!r}")
    config = ModelConfig(**header["config"])
    body = blob[newline + 1 :]
    arrays = {}
    offset = 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(body):
            raise CorruptData(f"checkpoint truncated inside parameter {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(
            body[offset : offset + nbytes], dtype="<f8"
        ).reshape(shape).copy()
        offset += nbytes
    if offset != len(body):
        raise CorruptData(f"checkpoint has {len(body) - offset} trailing bytes")
    template = init_params(config, seed=0)
    expected = {name for name, _ in template.named_arrays()}
    if expected != set(arrays):
        raise CorruptData("checkpoint parameter names do not match the model")
    for name, arr in template.named_arrays():
        if arrays[name].shape != arr.shape:
            raise CorruptData(f"parameter {name!r} has shape {arrays[name].shape}, "
                              f"expected {arr.shape}")
    return template.with_arrays(arrays), config
