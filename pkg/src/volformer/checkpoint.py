"""NNF1 checkpoint format.

Layout (all integers little-endian):
  magic           4 bytes  b"NNF1"
  config_len      u32      length of the UTF-8 config snapshot
  config          bytes    flat-text serialization of the ModelConfig
  param table              array table (see below)
  optimizer table          array table for momentum buffers
  rng_state       u64      training RNG seed/state word
  epoch           u64      epoch counter at save time

An array table is a u32 entry count followed by entries of
  name_len u32, name bytes, dtype tag u8 (0 = f32), rank u8,
  extents rank x u32, payload (raw little-endian f32).

Round-trips are byte-identical: save(load(save(x))) == save(x).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig, parse_config, serialize_config
from .errors import FormatError
from .optim import SgdState
from .tensor import Tensor

MAGIC = b"NNF1"
DTYPE_F32 = 0


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    rng_state: int
    epoch: int


def _pack_table(arrays: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<BB", DTYPE_F32, raw.ndim))
        out.append(struct.pack(f"<{raw.ndim}I", *raw.shape))
        out.append(raw.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("truncated checkpoint")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def _unpack_table(r: _Reader) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    count = r.u32()
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        tag, rank = struct.unpack("<BB", r.take(2))
        if tag != DTYPE_F32:
            raise FormatError(f"unknown dtype tag {tag} for array '{name}'")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = r.take(4 * n)
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    return arrays


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    cfg_bytes = serialize_config(ckpt.config).encode("utf-8")
    blob = b"".join(
        [
            MAGIC,
            struct.pack("<I", len(cfg_bytes)),
            cfg_bytes,
            _pack_table(ckpt.params),
            _pack_table(ckpt.velocity),
            struct.pack("<Q", ckpt.rng_state & 0xFFFFFFFFFFFFFFFF),
            struct.pack("<Q", ckpt.epoch),
        ]
    )
    with open(path, "wb") as f:
        f.write(blob)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise FormatError("bad magic: not an NNF1 checkpoint")
    cfg_text = r.take(r.u32()).decode("utf-8")
    try:
        config = parse_config(cfg_text)
    except Exception as exc:
        raise FormatError(f"invalid config snapshot: {exc}") from exc
    params = _unpack_table(r)
    velocity = _unpack_table(r)
    rng_state = r.u64()
    epoch = r.u64()
    if r.pos != len(blob):
        raise FormatError(f"{len(blob) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(config, params, velocity, rng_state, epoch)


def from_model(config: ModelConfig, named: dict[str, Tensor], state: SgdState,
               rng_state: int, epoch: int) -> Checkpoint:
    return Checkpoint(
        config=config,
        params={k: v.data.copy() for k, v in named.items()},
        velocity={k: v.copy() for k, v in state.velocity.items()},
        rng_state=rng_state,
        epoch=epoch,
    )


def restore_into(ckpt: Checkpoint, named: dict[str, Tensor]) -> None:
    """Copy checkpoint arrays into an existing model's parameters."""
    if set(ckpt.params) != set(named):
        missing = set(named) - set(ckpt.params)
        extra = set(ckpt.params) - set(named)
        raise FormatError(
            f"checkpoint does not match model config (missing {sorted(missing)[:3]}, "
            f"unexpected {sorted(extra)[:3]})"
        )
    for name, arr in ckpt.params.items():
        if named[name].data.shape != arr.shape:
            raise FormatError(
                f"shape mismatch for '{name}': checkpoint {arr.shape} vs model "
                f"{named[name].data.shape}"
            )
        named[name].data = arr.astype(named[name].data.dtype)
