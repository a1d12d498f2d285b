"""Binary checkpoint persistence with a JSON metadata sidecar.

Layout (all integers little-endian): 4-byte magic "SISP", u32 format
version, u32 tensor count, then per tensor: u16 name length, UTF-8 name,
u8 dtype code (0 = float32, 1 = float64), u8 rank, u32 dims, raw
little-endian values. The sidecar at <path>.json carries the model config
and training metadata. Round-trips are bit-exact and endianness-pinned.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import DemosaicDenoiseNet, ModelConfig, build_model
from .nn import BatchNormStats, Tensor

MAGIC = b"SISP"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            arr = arr.astype(np.float32)
        code = _DTYPE_CODES[arr.dtype]
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    path.write_bytes(b"".join(chunks))

    meta = dict(ckpt.metadata)
    meta["model_config"] = ckpt.config.to_dict()
    meta["format_version"] = VERSION
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    blob = path.read_bytes()

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint ({what})")
        piece = blob[offset:offset + n]
        offset += n
        return piece

    offset = 0
    if take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = struct.unpack("<I", take(4, "version"))[0]
    if version != VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    count = struct.unpack("<I", take(4, "tensor count"))[0]

    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = struct.unpack("<H", take(2, "name length"))[0]
        name = take(name_len, "name").decode("utf-8")
        code, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for tensor {name!r}")
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = take(n * _DTYPES[code].itemsize, f"payload of {name!r}")
        tensors[name] = np.frombuffer(payload, dtype=_DTYPES[code]).reshape(shape).copy()
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")

    sidecar = Path(str(path) + ".json")
    if not sidecar.exists():
        raise CheckpointError(f"{path}: missing metadata sidecar {sidecar}")
    meta = json.loads(sidecar.read_text())
    config = ModelConfig.from_dict(meta.pop("model_config"))
    meta.pop("format_version", None)
    return Checkpoint(config=config, tensors=tensors, metadata=meta)


# -- model/optimizer adapters --------------------------------------------------


def checkpoint_from_model(model: DemosaicDenoiseNet, optimizer=None,
                          metadata: dict | None = None) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    for name, p in model.params.items():
        tensors[f"param.{name}"] = p.data.copy()
    for name, stats in model.bn.items():
        tensors[f"stats.{name}.mean"] = stats.mean.copy()
        tensors[f"stats.{name}.var"] = stats.var.copy()
    meta = dict(metadata or {})
    meta["bn_counts"] = {name: stats.count for name, stats in model.bn.items()}
    if optimizer is not None:
        state = optimizer.state()
        meta["adam_t"] = state["t"]
        for name, arr in state["m"].items():
            tensors[f"adam.m.{name}"] = arr
        for name, arr in state["v"].items():
            tensors[f"adam.v.{name}"] = arr
    return Checkpoint(config=model.config, tensors=tensors, metadata=meta)


def model_from_checkpoint(ckpt: Checkpoint, dtype=np.float32) -> DemosaicDenoiseNet:
    model = build_model(ckpt.config, seed=0, dtype=dtype)
    for name, p in model.params.items():
        key = f"param.{name}"
        if key not in ckpt.tensors:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        arr = ckpt.tensors[key].astype(dtype)
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"parameter {name!r}: checkpoint shape {arr.shape} vs model {p.data.shape}")
        model.params[name] = Tensor(arr, requires_grad=True)
    counts = ckpt.metadata.get("bn_counts", {})
    for name, stats in model.bn.items():
        mean = ckpt.tensors.get(f"stats.{name}.mean")
        var = ckpt.tensors.get(f"stats.{name}.var")
        if mean is None or var is None:
            raise CheckpointError(f"checkpoint missing running stats for {name!r}")
        model.bn[name] = BatchNormStats(mean.astype(dtype), var.astype(dtype),
                                        count=int(counts.get(name, 1)))
    return model


def adam_state_from_checkpoint(ckpt: Checkpoint) -> dict | None:
    if "adam_t" not in ckpt.metadata:
        return None
    m = {k[len("adam.m."):]: arr for k, arr in ckpt.tensors.items()
         if k.startswith("adam.m.")}
    v = {k[len("adam.v."):]: arr for k, arr in ckpt.tensors.items()
         if k.startswith("adam.v.")}
    return {"t": int(ckpt.metadata["adam_t"]), "m": m, "v": v}
