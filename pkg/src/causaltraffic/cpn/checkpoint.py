"""Self-describing binary checkpoints.

Layout: 8-byte magic ``CTCKPT01``, little-endian uint32 header length, a
UTF-8 JSON header, then every parameter as little-endian float64 in header
order. The header carries the format version, model config, normalizer,
training phase and per-parameter name/shape/offset.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..data import Normalizer
from ..numerics import Tensor
from .config import ModelConfig

MAGIC = b"CTCKPT01"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, Tensor]
    normalizer: Normalizer
    phase: int = 1
    extra: dict = field(default_factory=dict)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: p.value.copy() for k, p in self.params.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.params[k].value = np.array(v)
            self.params[k].value.flags.writeable = False


def to_bytes(state: ModelState) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, p in state.params.items():
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        arr = np.asarray(p.value, dtype="<f8").copy(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "version": VERSION,
        "config": state.config.to_dict(),
        "normalizer": {"mean": state.normalizer.mean, "std": state.normalizer.std},
        "phase": state.phase,
        "extra": state.extra,
        "params": entries,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(head)) + head + b"".join(blobs)


def from_bytes(buf: bytes) -> ModelState:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (n,) = struct.unpack("<I", buf[8:12])
    try:
        header = json.loads(buf[12:12 + n].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    if header.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
    body = memoryview(buf)[12 + n:]
    params = {}
    for e in header["params"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 8 * count
        if end > len(body):
            raise CheckpointError(f"truncated payload for {e['name']}")
        arr = np.frombuffer(body[e["offset"]:end], dtype="<f8").astype(np.float64).reshape(e["shape"])
        params[e["name"]] = Tensor(arr, requires_grad=True, name=e["name"])
    norm = Normalizer(header["normalizer"]["mean"], header["normalizer"]["std"])
    return ModelState(ModelConfig.from_dict(header["config"]), params, norm,
                      header.get("phase", 1), header.get("extra", {}))


def save_checkpoint(path, state: ModelState) -> None:
    Path(path).write_bytes(to_bytes(state))


def load_checkpoint(path) -> ModelState:
    p = Path(path)
    if p.is_dir():
        p = p / "model.ckpt"
    if not p.exists():
        raise CheckpointError(f"checkpoint not found: {p}")
    return from_bytes(p.read_bytes())
