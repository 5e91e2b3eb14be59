"""Checkpoint container and its binary file format.

File layout (all integers little-endian)::

    0   8 bytes   magic b"MOEUPCK1"
    8   u32       version (1)
    12  u64       header length H
    20  H bytes   UTF-8 JSON header: config, tensor index, payload size, metadata
    ..  zeros     padding up to the next multiple of 64
    P   payload   float32 tensors, each starting on a 64-byte boundary

Tensor offsets in the header are relative to ``P``. ``docs/format.md`` has the
full description.
"""
from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import ArgumentError, CheckpointIOError, ConfigError, CorruptionError, FormatError
from .numerics import Rng

MAGIC = b"MOEUPCK1"
VERSION = 1
ALIGN = 64
INIT_STD = 0.02
_PREAMBLE = struct.Struct("<8sIQ")


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


# --- tensor naming ------------------------------------------------------------


def mlp_keys(activation: str) -> tuple[str, ...]:
    return ("w1", "w3", "w2") if activation == "swiglu" else ("w1", "w2")


def mlp_prefix(layer: int) -> str:
    return f"layers.{layer}.mlp"


def expert_prefix(layer: int, e: int) -> str:
    return f"layers.{layer}.moe.experts.{e}"


def shared_prefix(layer: int, s: int) -> str:
    return f"layers.{layer}.moe.shared.{s}"


def router_name(layer: int) -> str:
    return f"layers.{layer}.moe.router.weight"


def tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every tensor a model with ``config`` owns, in canonical order."""
    h, d, V = config.hidden_size, config.ffn_hidden, config.vocab_size
    keys = mlp_keys(config.activation)
    shapes: dict[str, tuple[int, ...]] = {"emb.weight": (V, h)}

    def add_mlp(prefix: str, width: int) -> None:
        for k in keys:
            shapes[f"{prefix}.{k}"] = (width, h) if k == "w2" else (h, width)

    for i in range(config.num_layers):
        shapes[f"layers.{i}.norm.gain"] = (h,)
        shapes[f"layers.{i}.norm.bias"] = (h,)
        moe = config.moe
        if moe is None:
            add_mlp(mlp_prefix(i), d)
            continue
        de = d // moe.granularity
        shapes[router_name(i)] = (h, moe.num_experts)
        for e in range(moe.num_experts):
            add_mlp(expert_prefix(i, e), de)
        for s in range(moe.shared_experts):
            add_mlp(shared_prefix(i, s), de)
        if moe.compensation == "post_expert_layernorm":
            shapes[f"layers.{i}.moe.post_ln.gain"] = (h,)
            shapes[f"layers.{i}.moe.post_ln.bias"] = (h,)
    shapes["head.weight"] = (h, V)
    return shapes


# --- container ----------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.config.validate()
        expected = tensor_shapes(self.config)
        for name, shape in expected.items():
            if name not in self.tensors:
                raise ConfigError(f"missing tensor {name}")
            if tuple(self.tensors[name].shape) != shape:
                raise ConfigError(f"tensor {name} has shape {self.tensors[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def mlp(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: self.tensors[f"{prefix}.{k}"] for k in mlp_keys(self.config.activation)}

    def model_tensors(self) -> dict[str, np.ndarray]:
        """The tensors the architecture defines (drops optimizer state and other extras)."""
        return {name: self.tensors[name] for name in tensor_shapes(self.config)}

    def copy(self) -> "Checkpoint":
        return Checkpoint(
            self.config,
            {k: v.copy() for k, v in self.tensors.items()},
            copy.deepcopy(self.metadata),
        )

    def astype(self, dtype) -> "Checkpoint":
        return Checkpoint(
            self.config,
            {k: v.astype(dtype) for k, v in self.tensors.items()},
            copy.deepcopy(self.metadata),
        )

    def num_params(self) -> int:
        return sum(v.size for v in self.model_tensors().values())

    def to_bytes(self) -> bytes:
        index, offset = [], 0
        for name, arr in self.tensors.items():
            nbytes = arr.size * 4
            index.append({"name": name, "dtype": "float32", "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
            offset = _align(offset + nbytes)
        header = {
            "config": self.config.to_dict(),
            "tensors": index,
            "payload_bytes": offset,
            "metadata": self.metadata,
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        start = _align(_PREAMBLE.size + len(hbytes))
        buf = bytearray(start + offset)
        _PREAMBLE.pack_into(buf, 0, MAGIC, VERSION, len(hbytes))
        buf[_PREAMBLE.size : _PREAMBLE.size + len(hbytes)] = hbytes
        for entry, arr in zip(index, self.tensors.values()):
            pos = start + entry["offset"]
            buf[pos : pos + entry["nbytes"]] = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        return bytes(buf)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < _PREAMBLE.size:
            raise CheckpointIOError("file too short for the checkpoint preamble")
        magic, version, hlen = _PREAMBLE.unpack_from(data, 0)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}")
        if version != VERSION:
            raise FormatError(f"unsupported version {version}")
        if _PREAMBLE.size + hlen > len(data):
            raise CheckpointIOError("file truncated inside the header")
        try:
            header = json.loads(data[_PREAMBLE.size : _PREAMBLE.size + hlen].decode("utf-8"))
            config = ModelConfig.from_dict(header["config"])
            index = header["tensors"]
            payload_bytes = int(header["payload_bytes"])
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError, ConfigError) as exc:
            raise CorruptionError(f"unreadable header: {exc}") from None
        start = _align(_PREAMBLE.size + hlen)

        tensors: dict[str, np.ndarray] = {}
        prev_end = 0
        for entry in index:
            try:
                name, shape = entry["name"], tuple(int(s) for s in entry["shape"])
                off, nbytes = int(entry["offset"]), int(entry["nbytes"])
            except (KeyError, TypeError, ValueError) as exc:
                raise CorruptionError(f"bad tensor index entry: {exc}") from None
            if entry.get("dtype") != "float32":
                raise CorruptionError(f"tensor {name}: unsupported dtype {entry.get('dtype')!r}")
            if name in tensors:
                raise CorruptionError(f"duplicate tensor {name}")
            if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
                raise CorruptionError(f"tensor {name}: nbytes {nbytes} does not match shape {shape}")
            if off % ALIGN or off < prev_end:
                raise CorruptionError(f"tensor {name}: offset {off} unaligned, unsorted or overlapping")
            if off + nbytes > payload_bytes:
                raise CorruptionError(f"tensor {name} extends beyond the declared payload")
            prev_end = off + nbytes
            tensors[name] = (shape, off, nbytes)
        if start + payload_bytes > len(data):
            raise CheckpointIOError(
                f"payload truncated: expected {start + payload_bytes} bytes, file has {len(data)}"
            )
        arrays = {
            name: np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=start + off).reshape(shape).astype(np.float32)
            for name, (shape, off, nbytes) in tensors.items()
        }
        try:
            return cls(config, arrays, header.get("metadata", {}))
        except ConfigError as exc:
            raise CorruptionError(str(exc)) from None


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> str:
    """Write ``ckpt`` to ``path`` and return the SHA-256 of the file contents."""
    data = ckpt.to_bytes()
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointIOError(str(exc)) from None
    return Checkpoint.from_bytes(data)


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def init_dense_random(config: ModelConfig, seed: int, std: float = INIT_STD) -> Checkpoint:
    """Random dense model: weights ~ N(0, std²) (std 0.02 by default), norm gains 1, biases 0.

    Each tensor draws from its own named stream, so adding layers never
    changes the values of existing tensors.
    """
    config.validate()
    if config.moe is not None:
        raise ArgumentError("init_dense_random needs a dense config (no moe section)")
    rng = Rng(seed)
    tensors = {}
    for name, shape in tensor_shapes(config).items():
        if name.endswith("norm.gain"):
            tensors[name] = np.ones(shape, np.float32)
        elif name.endswith("norm.bias"):
            tensors[name] = np.zeros(shape, np.float32)
        else:
            tensors[name] = rng.child(name).normal(shape, std)
    return Checkpoint(config, tensors, {"init": {"kind": "dense_random", "seed": int(seed), "std": std}})
