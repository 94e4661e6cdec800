"""Bit-exact named-tensor checkpoint format.

Layout (all integers little-endian):

    magic "ELFCKPT1"
    u32 tensor count
    per tensor, ordered by name:
        u16 name length, UTF-8 name
        u8 rank, rank x u32 extents
        float32 payload (product(extents) values; rank 0 stores one value)
    u32 CRC32 over the concatenated payload bytes

Model configuration and optimizer counters ride along as ``meta.*`` /
``optim.*`` rank-0 tensors so a checkpoint is self-describing.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import fields
from pathlib import Path

import numpy as np

from .model import VARIANTS, ModelConfig
from .tensor import EngineError, Tensor

MAGIC = b"ELFCKPT1"


def save_checkpoint(path, tensors: dict) -> None:
    """Write named arrays (or Tensors) sorted by name; payloads are float32."""
    items = []
    for name in sorted(tensors):
        arr = tensors[name]
        if isinstance(arr, Tensor):
            arr = arr.data
        # note: ascontiguousarray would promote rank-0 arrays to rank 1
        items.append((name, np.asarray(arr, dtype="<f4", order="C")))
    crc = 0
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", len(items))
    for name, arr in items:
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<B", arr.ndim)
        for extent in arr.shape:
            out += struct.pack("<I", extent)
        payload = arr.tobytes()
        crc = zlib.crc32(payload, crc)
        out += payload
    out += struct.pack("<I", crc & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back into float32 arrays; validates magic and CRC."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8 or blob[: len(MAGIC)] != MAGIC:
        raise EngineError(f"checkpoint {path}: bad magic")
    off = len(MAGIC)
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    crc = 0
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
            off += 4 * rank
            n_values = int(np.prod(shape)) if rank else 1
            payload = blob[off : off + 4 * n_values]
            if len(payload) != 4 * n_values:
                raise EngineError(f"checkpoint {path}: truncated payload for {name!r}")
            off += 4 * n_values
            crc = zlib.crc32(payload, crc)
            tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        (stored_crc,) = struct.unpack_from("<I", blob, off)
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise EngineError(f"checkpoint {path}: malformed ({exc})") from exc
    if stored_crc != (crc & 0xFFFFFFFF):
        raise EngineError(f"checkpoint {path}: CRC mismatch")
    return tensors


_BOOL_FIELDS = {"dsc_encoder", "swap_qk", "share_backbone"}
_INT_FIELDS = {"channels", "rtb_depth", "heads", "sample_factor", "rcab_per_stage",
               "edb_stages", "reduction"}


def config_meta(cfg: ModelConfig) -> dict[str, np.ndarray]:
    meta: dict[str, np.ndarray] = {}
    for f in fields(ModelConfig):
        v = getattr(cfg, f.name)
        if f.name == "variant":
            v = VARIANTS.index(v) if v in VARIANTS else 0
        meta[f"meta.{f.name}"] = np.asarray(float(v), dtype=np.float32)
    return meta


def config_from_meta(tensors: dict[str, np.ndarray]) -> ModelConfig:
    kwargs = {}
    for f in fields(ModelConfig):
        key = f"meta.{f.name}"
        if key not in tensors:
            continue
        v = float(tensors[key])
        if f.name == "variant":
            kwargs[f.name] = VARIANTS[int(v)]
        elif f.name in _BOOL_FIELDS:
            kwargs[f.name] = bool(int(v))
        elif f.name in _INT_FIELDS:
            kwargs[f.name] = int(v)
        else:
            kwargs[f.name] = v
    return ModelConfig(**kwargs)


def model_state(model) -> dict[str, np.ndarray]:
    state = {name: p.data for name, p in model.named_parameters()}
    state.update(config_meta(model.cfg))
    return state


def load_model_params(model, tensors: dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters():
        if name not in tensors:
            raise EngineError(f"checkpoint missing parameter {name!r}")
        arr = tensors[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise EngineError(
                f"checkpoint parameter {name!r} has shape {arr.shape}, expected {p.shape}")
        p.data = np.ascontiguousarray(arr.astype(p.dtype))
