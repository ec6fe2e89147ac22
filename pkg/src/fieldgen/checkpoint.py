"""Binary checkpoints: parameters, optimizer moments, epoch, RNG state and
the digest of the config that produced them.

Layout (little-endian)::

    8 bytes   magic b"FGCKPT\\0\\0"
    uint32    format version
    uint32    reserved (0)
    uint64    metadata length n
    n bytes   UTF-8 JSON metadata (sorted keys; lists tensor names/shapes/dtypes)
    raw       tensor bytes in the listed order

Metadata and tensor order are canonical, so save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptionError, FormatError

MAGIC = b"FGCKPT\x00\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sII")
_LEN = struct.Struct("<Q")


@dataclass
class Checkpoint:
    meta: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def epoch(self) -> int:
        return int(self.meta["epoch"])

    @property
    def config_digest(self) -> str:
        return self.meta["config_digest"]

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix/`` with the prefix stripped."""
        p = prefix + "/"
        return {k[len(p) :]: v for k, v in self.tensors.items() if k.startswith(p)}


def _dtype_name(arr: np.ndarray) -> str:
    return np.dtype(arr.dtype).newbyteorder("<").str


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    names = sorted(ckpt.tensors)
    arrays = [np.ascontiguousarray(ckpt.tensors[n]) for n in names]
    arrays = [a.astype(a.dtype.newbyteorder("<"), copy=False) for a in arrays]
    meta = dict(ckpt.meta)
    meta["tensors"] = [{"name": n, "shape": list(a.shape), "dtype": _dtype_name(a)} for n, a in zip(names, arrays)]
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, 0), _LEN.pack(len(blob)), blob]
    parts.extend(a.tobytes() for a in arrays)
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < _HEADER.size + _LEN.size:
        raise CorruptionError("checkpoint truncated")
    magic, version, _ = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"not a checkpoint (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise FormatError(f"unknown checkpoint version {version} (expected {FORMAT_VERSION})")
    (n,) = _LEN.unpack_from(data, _HEADER.size)
    offset = _HEADER.size + _LEN.size
    if offset + n > len(data):
        raise CorruptionError("checkpoint truncated inside metadata")
    try:
        meta = json.loads(data[offset : offset + n].decode("utf-8"))
        specs = meta.pop("tensors")
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise CorruptionError(f"unreadable checkpoint metadata: {exc}") from exc
    offset += n
    tensors = {}
    for s in specs:
        dt = np.dtype(s["dtype"])
        count = int(np.prod(s["shape"]))
        end = offset + count * dt.itemsize
        if end > len(data):
            raise CorruptionError(f"checkpoint truncated inside tensor {s['name']}")
        tensors[s["name"]] = np.frombuffer(data, dtype=dt, count=count, offset=offset).reshape(s["shape"]).copy()
        offset = end
    if offset != len(data):
        raise CorruptionError(f"{len(data) - offset} trailing bytes after last tensor")
    return Checkpoint(meta, tensors)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)


def load_checkpoint(path: str | Path, expected_digest: str | None = None) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CorruptionError(f"cannot read checkpoint {path}: {exc}") from exc
    ckpt = decode_checkpoint(data)
    if expected_digest is not None and ckpt.config_digest != expected_digest:
        raise ConfigError(
            f"checkpoint was written under config digest {ckpt.config_digest[:12]}..., "
            f"current config is {expected_digest[:12]}...; refusing to resume"
        )
    return ckpt


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    name = state["bit_generator"]
    if name != "PCG64":
        raise FormatError(f"unsupported bit generator {name}")
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)
