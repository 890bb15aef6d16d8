"""Binary checkpoint container.

Layout (all integers little-endian)::

    bytes 0-3    magic b"MGCK"
    bytes 4-7    uint32 format version
    bytes 8-11   uint32 header length H
    H bytes      UTF-8 JSON header:
                   {"architecture": {"kind": ..., "num_classes": ...},
                    "tensors": [{"name", "shape", "offset", "nbytes"}, ...],
                    "metadata": {...}}
    payload      raw float32 ('<f4') tensors, concatenated in header order;
                 "offset" is relative to the start of the payload
    last 4 bytes uint32 CRC-32 of everything before it

Tensor names are the model's state_dict keys, e.g. ``"layers.conv 2.weight"``
(torch layout, (O, I, F, F) for convolutions).
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from .models import Classifier, build

MAGIC = b"MGCK"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(model: Classifier, path, metadata: dict | None = None) -> Path:
    path = Path(path)
    tensors, chunks, offset = [], [], 0
    for name, value in model.state_dict().items():
        arr = value.detach().cpu().numpy().astype("<f4", copy=False)
        buf = arr.tobytes(order="C")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    header = json.dumps(
        {"architecture": model.architecture(), "tensors": tensors, "metadata": metadata or {}},
        sort_keys=True,
    ).encode("utf-8")
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + b"".join(chunks)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, tensors)`` after validating magic, version and checksum."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: unreadable ({exc})") from exc
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic or too short)")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    try:
        header = json.loads(body[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header") from exc
    payload = body[12 + header_len :]
    tensors = {}
    for entry in header["tensors"]:
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        if stop > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']!r} runs past the payload")
        tensors[entry["name"]] = np.frombuffer(payload[start:stop], dtype="<f4").reshape(entry["shape"])
    return header, tensors


def load_checkpoint(path) -> Classifier:
    header, tensors = read_checkpoint(path)
    arch = header["architecture"]
    try:
        model = build(arch["kind"], arch["num_classes"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: unknown architecture {arch}") from exc
    expected = model.state_dict()
    if set(expected) != set(tensors):
        raise CheckpointError(f"{path}: tensor names do not match architecture {arch['kind']}")
    state = {}
    for name, ref in expected.items():
        if tuple(ref.shape) != tensors[name].shape:
            raise CheckpointError(f"{path}: {name} has shape {tensors[name].shape}, expected {tuple(ref.shape)}")
        state[name] = torch.from_numpy(tensors[name].astype(np.float32))
    model.load_state_dict(state)
    model.eval()
    return model


def checkpoint_metadata(path) -> dict:
    return read_checkpoint(path)[0].get("metadata", {})
