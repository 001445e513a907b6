"""Model binary format: magic, version, config JSON, named parameter table.

All tensors (including batch-norm running statistics) are stored as
little-endian 32-bit floats, so a float32 model round-trips exactly.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from ..errors import FormatError
from .unet import NetworkConfig, TransitionKernelModel

MODEL_MAGIC = b"SGTK"
MODEL_VERSION = 1


def _named_tensors(model: TransitionKernelModel) -> list[tuple[str, np.ndarray]]:
    entries: list[tuple[str, np.ndarray]] = [(p.name, p.data) for p in model.parameters()]
    for bn in model.batchnorms():
        entries.append((f"{bn.gamma.name}.running_mean", bn.running_mean))
        entries.append((f"{bn.gamma.name}.running_var", bn.running_var))
    return entries


def serialize_model(model: TransitionKernelModel) -> bytes:
    cfg = model.cfg
    header = {
        "config": {
            "base_channels": cfg.base_channels,
            "channel_mult": cfg.channel_mult,
            "depth": cfg.depth,
            "blocks_per_level": cfg.blocks_per_level,
        },
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<I", MODEL_VERSION))
    buf.write(struct.pack("<I", len(header_bytes)))
    buf.write(header_bytes)
    entries = _named_tensors(model)
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        data = np.ascontiguousarray(arr, dtype="<f4")
        buf.write(data.tobytes())
    return buf.getvalue()


def deserialize_model(data: bytes, dtype=np.float32) -> TransitionKernelModel:
    view = memoryview(data)
    if bytes(view[:4]) != MODEL_MAGIC:
        raise FormatError("bad model magic")
    version = struct.unpack("<I", view[4:8])[0]
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}")
    hlen = struct.unpack("<I", view[8:12])[0]
    off = 12
    try:
        header = json.loads(bytes(view[off:off + hlen]).decode("utf-8"))
        cfg = NetworkConfig(**header["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise FormatError(f"bad model header: {e}") from None
    off += hlen
    (count,) = struct.unpack("<I", view[off:off + 4])
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", view[off:off + 2])
        off += 2
        name = bytes(view[off:off + nlen]).decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack("<B", view[off:off + 1])
        off += 1
        shape = []
        for _ in range(ndim):
            (dim,) = struct.unpack("<I", view[off:off + 4])
            off += 4
            shape.append(dim)
        n_items = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(view[off:off + 4 * n_items], dtype="<f4").reshape(shape)
        off += 4 * n_items
        tensors[name] = arr
    if off != len(data):
        raise FormatError("trailing bytes in model file")

    model = TransitionKernelModel(cfg, seed=0, dtype=dtype)
    for name, p in model.named_parameters():
        if name not in tensors:
            raise FormatError(f"missing parameter: {name}")
        arr = tensors[name].astype(dtype)
        if arr.shape != p.data.shape:
            raise FormatError(f"shape mismatch for {name}: {arr.shape} != {p.data.shape}")
        p.data = arr.copy()
    for bn in model.batchnorms():
        rm = tensors.get(f"{bn.gamma.name}.running_mean")
        rv = tensors.get(f"{bn.gamma.name}.running_var")
        if rm is None or rv is None:
            raise FormatError(f"missing running stats for {bn.gamma.name}")
        bn.running_mean = rm.astype(dtype).copy()
        bn.running_var = rv.astype(dtype).copy()
    return model
