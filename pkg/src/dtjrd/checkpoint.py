"""Binary model checkpoints.

Layout: 6-byte magic ``DTJRD1``, a little-endian uint64 header length, a
JSON header (model config, preprocessing constants, and an ordered tensor
manifest of name/dtype/shape/offset), then the raw tensor payloads as
little-endian row-major bytes.  Offsets are relative to the end of the
header.  Round-trips are bitwise lossless.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import DTJRDModel, ModelConfig, interpolate_pos_embed

MAGIC = b"DTJRD1"

PREPROCESS_NORM = {"mean": 0.5, "std": 0.5}

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(model: DTJRDModel, path, extra: dict | None = None) -> None:
    """Write the model to ``path``; finite parameters are required."""
    manifest = []
    payload = bytearray()
    for p in model.parameters():
        arr = np.ascontiguousarray(p.data)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"parameter {p.name!r} holds non-finite values")
        if arr.dtype.name not in _DTYPES:
            raise FormatError(f"parameter {p.name!r} has unsupported dtype {arr.dtype}")
        manifest.append(
            {
                "name": p.name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "offset": len(payload),
            }
        )
        payload += arr.astype(_DTYPES[arr.dtype.name], copy=False).tobytes()
    header = {
        "config": model.config.to_dict(),
        "preprocess": dict(PREPROCESS_NORM),
        "tensors": manifest,
    }
    if extra:
        header["extra"] = extra
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload)


def read_header(path) -> dict:
    """Parse and return the JSON header without loading tensor payloads."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        raw_len = fh.read(8)
        if len(raw_len) != 8:
            raise FormatError(f"{path}: truncated before header length")
        (header_len,) = struct.unpack("<Q", raw_len)
        header_bytes = fh.read(header_len)
        if len(header_bytes) != header_len:
            raise FormatError(f"{path}: truncated header")
    try:
        return json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid JSON: {exc}") from exc


def load_checkpoint(path, config: ModelConfig | None = None) -> DTJRDModel:
    """Rebuild a model from ``path``.

    With no ``config`` the stored one is used.  With a ``config`` whose patch
    grid differs from the stored model, the position table is resized via
    bicubic interpolation; every other parameter must match shapes exactly.
    """
    header = read_header(path)
    data = Path(path).read_bytes()
    (header_len,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
    base = len(MAGIC) + 8 + header_len

    stored_config = ModelConfig(**header["config"])
    target_config = config or stored_config
    model = DTJRDModel(target_config, seed=0)

    tensors = {}
    seen = set()
    for entry in header["tensors"]:
        name = entry["name"]
        if name in seen:
            raise FormatError(f"{path}: duplicate parameter {name!r}")
        seen.add(name)
        if entry["dtype"] not in _DTYPES:
            raise FormatError(f"{path}: parameter {name!r} has unsupported dtype")
        dt = np.dtype(_DTYPES[entry["dtype"]])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        stop = start + count * dt.itemsize
        if stop > len(data):
            raise FormatError(f"{path}: truncated payload for parameter {name!r}")
        tensors[name] = np.frombuffer(data[start:stop], dtype=dt).reshape(shape)

    for p in model.parameters():
        if p.name not in tensors:
            raise FormatError(f"{path}: missing parameter {p.name!r}")
        arr = tensors.pop(p.name)
        if p.name == "pos_embed" and arr.shape != p.data.shape:
            if arr.shape[1] != p.data.shape[1]:
                raise FormatError(
                    f"{path}: pos_embed width {arr.shape[1]} != model width {p.data.shape[1]}"
                )
            arr = interpolate_pos_embed(arr, target_config.grid)
        if arr.shape != p.data.shape:
            raise FormatError(
                f"{path}: parameter {p.name!r} has shape {arr.shape}, "
                f"model expects {p.data.shape}"
            )
        p.data = arr.astype(p.data.dtype, copy=True)
    if tensors:
        extra_name = sorted(tensors)[0]
        raise FormatError(f"{path}: unexpected parameter {extra_name!r}")
    return model
