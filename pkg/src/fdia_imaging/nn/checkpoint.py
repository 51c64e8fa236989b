"""Binary checkpoint: ``FDNN`` magic, version, JSON layer table, float64 LE blobs.

Layout::

    b"FDNN" | u16 version | u16 flags | u32 header length | header JSON
    | parameter blobs | batchnorm running stats | [Adam m blobs | Adam v blobs]

Blob order and shapes are listed in the header; flag bit 0 marks optimizer state.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .layers import BatchNorm
from .model import ClassifierModel, LayerSpec, build_model

__all__ = ["CheckpointError", "save_model", "load_model", "model_to_bytes", "model_from_bytes"]

MAGIC = b"FDNN"
VERSION = 1
_PREFIX = struct.Struct("<4sHHI")
_HAS_OPT = 1


class CheckpointError(ValueError):
    pass


def _buffers(model):
    for i, layer in enumerate(model.layers):
        if isinstance(layer, BatchNorm):
            yield f"{i}.running_mean", layer.running_mean
            yield f"{i}.running_var", layer.running_var


def model_to_bytes(model: ClassifierModel, include_optimizer: bool = True) -> bytes:
    params = list(model.named_params())
    buffers = list(_buffers(model))
    has_opt = include_optimizer and bool(model.opt_m)
    header = {
        "input_shape": list(model.input_shape),
        "rng_seed": model.rng_seed,
        "epochs_done": model.epochs_done,
        "opt_t": model.opt_t,
        "layers": [s.to_dict() for s in model.specs],
        "params": [{"name": k, "shape": list(a.shape)} for k, a in params],
        "buffers": [{"name": k, "shape": list(a.shape)} for k, a in buffers],
        "opt_keys": [k for k, _ in params if k in model.opt_m] if has_opt else [],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [_PREFIX.pack(MAGIC, VERSION, _HAS_OPT if has_opt else 0, len(head)), head]
    chunks += [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in params]
    chunks += [np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in buffers]
    if has_opt:
        chunks += [model.opt_m[k].astype("<f8").tobytes() for k in header["opt_keys"]]
        chunks += [model.opt_v[k].astype("<f8").tobytes() for k in header["opt_keys"]]
    return b"".join(chunks)


def save_model(model: ClassifierModel, path, include_optimizer: bool = True) -> Path:
    path = Path(path)
    path.write_bytes(model_to_bytes(model, include_optimizer))
    return path


class _Reader:
    def __init__(self, blob: bytes, offset: int):
        self.blob = blob
        self.offset = offset

    def take(self, shape) -> np.ndarray:
        n = int(np.prod(shape)) * 8
        if self.offset + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        arr = np.frombuffer(self.blob, "<f8", int(np.prod(shape)), self.offset).reshape(shape)
        self.offset += n
        return arr.astype(np.float64)


def model_from_bytes(blob: bytes) -> ClassifierModel:
    if len(blob) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint")
    magic, version, flags, head_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} is not supported (expected {VERSION})")
    if _PREFIX.size + head_len > len(blob):
        raise CheckpointError("truncated checkpoint")
    try:
        header = json.loads(blob[_PREFIX.size:_PREFIX.size + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None

    specs = [LayerSpec.from_dict(d) for d in header["layers"]]
    try:
        model = build_model(tuple(header["input_shape"]), specs, header.get("rng_seed", 0))
    except ValueError as exc:
        raise CheckpointError(f"invalid layer table: {exc}") from None
    expected = dict(model.named_params())
    listed = [p["name"] for p in header["params"]]
    if sorted(listed) != sorted(expected):
        raise CheckpointError(f"parameter list {listed} does not match the layer table")

    reader = _Reader(blob, _PREFIX.size + head_len)
    for entry in header["params"]:
        name, shape = entry["name"], tuple(entry["shape"])
        target = expected[name]
        if shape != target.shape:
            i, pname = name.split(".", 1)
            kind = model.layers[int(i)].kind
            raise CheckpointError(f"layer {i} ({kind}): parameter {pname} has shape {shape}, "
                                  f"layer spec requires {target.shape}")
        model.layers[int(name.split(".")[0])].params[name.split(".", 1)[1]] = reader.take(shape)
    for entry in header["buffers"]:
        i, attr = entry["name"].split(".", 1)
        layer = model.layers[int(i)]
        arr = reader.take(tuple(entry["shape"]))
        if not isinstance(layer, BatchNorm) or arr.shape != getattr(layer, attr).shape:
            raise CheckpointError(f"layer {i} ({layer.kind}): unexpected buffer {attr}")
        setattr(layer, attr, arr)
    if flags & _HAS_OPT:
        keys = header["opt_keys"]
        model.opt_m = {k: reader.take(expected[k].shape) for k in keys}
        model.opt_v = {k: reader.take(expected[k].shape) for k in keys}
    if reader.offset != len(blob):
        raise CheckpointError(f"{len(blob) - reader.offset} trailing bytes after checkpoint data")
    model.opt_t = int(header.get("opt_t", 0))
    model.epochs_done = int(header.get("epochs_done", 0))
    return model


def load_model(path) -> ClassifierModel:
    return model_from_bytes(Path(path).read_bytes())
