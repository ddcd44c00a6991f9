"""Binary checkpoint format.

Layout (little-endian)::

    b"ST3D"                 magic, 4 bytes
    u32                     format version (1)
    u64                     header length in bytes
    header                  UTF-8 JSON: {"spec", "meta", "tensors"}
    payload                 raw float32 tensors, back to back, in directory order

Each ``tensors`` entry is ``{"name", "shape", "offset", "nbytes"}`` with the
offset counted from the start of the payload.  The header is written with
sorted keys and no whitespace, so saving a loaded checkpoint reproduces the
file byte for byte.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .arch import Network, NetworkSpec, make_network
from .errors import CheckpointError

MAGIC = b"ST3D"
VERSION = 1
VELOCITY_PREFIX = "optimizer.velocity."
_LE_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    spec: NetworkSpec
    tensors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    def model_tensors(self) -> dict:
        return {k: v for k, v in self.tensors.items() if not k.startswith(VELOCITY_PREFIX)}

    def velocity(self) -> dict:
        n = len(VELOCITY_PREFIX)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(VELOCITY_PREFIX)}


def network_tensors(net: Network) -> dict:
    out = {name: p.data for name, p in net.named_parameters()}
    for name, b in net.named_buffers():
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name}")
        out[name] = b
    return out


def checkpoint_from_network(net: Network, trainer=None, meta: Optional[dict] = None) -> Checkpoint:
    tensors = {k: np.array(v, dtype=np.float32) for k, v in network_tensors(net).items()}
    info = dict(meta or {})
    if trainer is not None:
        info["trainer"] = trainer.state()
        for k, v in trainer.opt.state.velocity.items():
            tensors[VELOCITY_PREFIX + k] = np.array(v, dtype=np.float32)
    return Checkpoint(net.spec, tensors, info)


def _encode(ckpt: Checkpoint) -> tuple[bytes, list]:
    """Prefix bytes (magic, version, header) and the payload arrays in directory order."""
    directory, arrays, offset = [], [], 0
    for name, arr in ckpt.tensors.items():
        arr = np.ascontiguousarray(arr, dtype=_LE_F32)
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        arrays.append(arr)
        offset += arr.nbytes
    header = json.dumps({"spec": ckpt.spec.to_dict(), "meta": ckpt.meta, "tensors": directory},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", ckpt.version, len(header)) + header, arrays


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write ``ckpt`` atomically: a temp file in the same directory, then rename."""
    path = Path(path)
    prefix, arrays = _encode(ckpt)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(prefix)
            for arr in arrays:
                f.write(memoryview(arr).cast("B"))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from e
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 16 + hlen
    if len(buf) < start:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(buf[16:start].decode("utf-8"))
        spec = NetworkSpec.from_dict(header["spec"])
        directory = header["tensors"]
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: malformed header: {e}") from e
    tensors = {}
    for entry in directory:
        lo = start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(buf):
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        arr = np.frombuffer(buf, _LE_F32, entry["nbytes"] // 4, lo)
        tensors[entry["name"]] = arr.astype(np.float32).reshape(entry["shape"])
    end = start + sum(e["nbytes"] for e in directory)
    if len(buf) != end:
        raise CheckpointError(f"{path}: {len(buf) - end} unexpected trailing bytes")
    return Checkpoint(spec, tensors, header.get("meta", {}), version)


def load_into_network(net: Network, ckpt: Checkpoint) -> Network:
    """Copy checkpoint tensors into ``net``; specs and tensor name sets must match exactly."""
    if net.spec.to_dict() != ckpt.spec.to_dict():
        raise CheckpointError(f"checkpoint spec {ckpt.spec.to_dict()} does not match network spec "
                              f"{net.spec.to_dict()}")
    saved = ckpt.model_tensors()
    params = dict(net.named_parameters())
    buffers = dict(net.named_buffers())
    expected = set(params) | set(buffers)
    if set(saved) != expected:
        missing = sorted(expected - set(saved))[:5]
        extra = sorted(set(saved) - expected)[:5]
        raise CheckpointError(f"tensor names differ: missing {missing}, unexpected {extra}")
    for name, arr in saved.items():
        target = params[name].data if name in params else buffers[name]
        if tuple(target.shape) != tuple(arr.shape):
            raise CheckpointError(f"{name}: shape {arr.shape} does not match {target.shape}")
    for name, p in params.items():
        p.data = np.array(saved[name], dtype=np.float32)
    for name, b in buffers.items():
        b[...] = saved[name]
    return net


def network_from_checkpoint(ckpt: Checkpoint) -> Network:
    return load_into_network(make_network(ckpt.spec, seed=None), ckpt)
