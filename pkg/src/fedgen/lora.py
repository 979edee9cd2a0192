"""Low-rank adapters over frozen weight matrices.

Weights follow the ``(out_features, in_features)`` convention, so a frozen
matrix ``W0`` maps a column input ``x`` to ``W0 @ x``. An adapter pair holds a
``down`` factor of shape ``(r, in)`` applied first and an ``up`` factor of
shape ``(out, r)`` applied second; the update is ``delta = up @ down``, scaled
by ``scaling / r``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np

from .errors import CheckpointError, ConfigError, ShapeError
from .linalg import Matrix, as_matrix

INIT_STDDEV = 0.02

_MAGIC = b"FGLA"
_FORMAT_VERSION = 1
_DTYPES = {32: "<f4", 64: "<f8"}


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    scaling: float = 16.0
    target_layers: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "target_layers", tuple(self.target_layers))
        problems = []
        if not isinstance(self.rank, (int, np.integer)) or self.rank < 1:
            problems.append(f"rank must be a positive integer, got {self.rank!r}")
        if not self.scaling > 0:
            problems.append(f"scaling must be positive, got {self.scaling!r}")
        if len(set(self.target_layers)) != len(self.target_layers):
            problems.append("target_layers contains duplicates")
        if problems:
            raise ConfigError(problems)

    @property
    def factor(self) -> float:
        """Multiplier applied to ``up @ down`` in the forward pass."""
        return self.scaling / self.rank

    def check_shapes(self, shapes: Mapping[str, tuple[int, int]]) -> None:
        problems = []
        if not self.target_layers:
            problems.append("target_layers must be non-empty")
        for name in self.target_layers:
            if name not in shapes:
                problems.append(f"unknown target layer {name!r}")
                continue
            out_dim, in_dim = shapes[name]
            if self.rank >= min(out_dim, in_dim):
                problems.append(
                    f"rank {self.rank} must be below min{(out_dim, in_dim)} for layer {name!r}"
                )
        if problems:
            raise ConfigError(problems)


class LoraPair(NamedTuple):
    down: Matrix
    up: Matrix

    @property
    def rank(self) -> int:
        return self.down.shape[0]

    @property
    def weight_shape(self) -> tuple[int, int]:
        return (self.up.shape[0], self.down.shape[1])


@dataclass
class LoraAdapter:
    config: LoraConfig
    pairs: dict[str, LoraPair] = field(default_factory=dict)

    def to_dict(self) -> dict[str, np.ndarray]:
        """Flat ``{"<layer>.down": ..., "<layer>.up": ...}`` view (no copies)."""
        out = {}
        for name in sorted(self.pairs):
            pair = self.pairs[name]
            out[f"{name}.down"] = pair.down
            out[f"{name}.up"] = pair.up
        return out

    @classmethod
    def from_dict(cls, config: LoraConfig, flat: Mapping[str, np.ndarray]) -> "LoraAdapter":
        pairs = {}
        for key in flat:
            if key.endswith(".down"):
                name = key[: -len(".down")]
                if f"{name}.up" not in flat:
                    raise ShapeError(f"adapter entry {name!r} has no up factor")
                pairs[name] = LoraPair(np.array(flat[key], dtype=np.float64),
                                       np.array(flat[f"{name}.up"], dtype=np.float64))
        if 2 * len(pairs) != len(flat):
            raise ShapeError("flat adapter has unmatched factor entries")
        return cls(config, pairs)

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.config, {k: LoraPair(p.down.copy(), p.up.copy())
                                         for k, p in self.pairs.items()})

    def shapes(self) -> dict[str, tuple[int, int]]:
        return {k: p.weight_shape for k, p in self.pairs.items()}

    def allclose(self, other: "LoraAdapter", atol: float = 0.0) -> bool:
        if self.pairs.keys() != other.pairs.keys():
            return False
        return all(
            np.allclose(self.pairs[k].down, other.pairs[k].down, rtol=0, atol=atol)
            and np.allclose(self.pairs[k].up, other.pairs[k].up, rtol=0, atol=atol)
            for k in self.pairs
        )


def init_adapter(config: LoraConfig, backbone_shapes: Mapping[str, tuple[int, int]],
                 rng: np.random.Generator) -> LoraAdapter:
    """Gaussian down factors, zero up factors: the initial update is exactly zero."""
    config.check_shapes(backbone_shapes)
    pairs = {}
    for name in config.target_layers:
        out_dim, in_dim = backbone_shapes[name]
        down = rng.normal(0.0, INIT_STDDEV, size=(config.rank, in_dim))
        pairs[name] = LoraPair(down, np.zeros((out_dim, config.rank)))
    return LoraAdapter(config, pairs)


def lora_delta(pair: LoraPair) -> Matrix:
    """Unscaled low-rank update ``up @ down``."""
    return pair.up @ pair.down


def _check_pair(w0: Matrix, pair: LoraPair) -> None:
    if pair.down.shape[0] != pair.up.shape[1]:
        raise ShapeError(f"factor ranks differ: down {pair.down.shape}, up {pair.up.shape}")
    if pair.weight_shape != w0.shape:
        raise ShapeError(f"adapter composes to {pair.weight_shape}, frozen weight is {w0.shape}")


def lora_forward(x: Matrix, w0: Matrix, pair: LoraPair, scaling: float) -> Matrix:
    """``W0 x + (scaling / r) * up (down x)`` for column inputs ``x``."""
    x = as_matrix(x, "x")
    w0 = as_matrix(w0, "w0")
    _check_pair(w0, pair)
    if x.shape[0] != w0.shape[1]:
        raise ShapeError(f"cannot apply weight {w0.shape} to input {x.shape}")
    return w0 @ x + (scaling / pair.rank) * (pair.up @ (pair.down @ x))


def merge_adapter(w0: Matrix, pair: LoraPair, scaling: float) -> Matrix:
    """New matrix ``W0 + (scaling / r) * up @ down``; ``w0`` is left untouched."""
    w0 = as_matrix(w0, "w0")
    _check_pair(w0, pair)
    return w0 + (scaling / pair.rank) * lora_delta(pair)


def param_count(adapter: LoraAdapter) -> int:
    return sum(p.rank * (p.weight_shape[0] + p.weight_shape[1]) for p in adapter.pairs.values())


def count_for_shapes(config: LoraConfig, shapes: Mapping[str, tuple[int, int]]) -> int:
    """Adapter size for ``config`` without allocating it."""
    return sum(config.rank * (shapes[n][0] + shapes[n][1]) for n in config.target_layers)


def adapter_axpy(dst: LoraAdapter, src: LoraAdapter, coeff: float) -> LoraAdapter:
    """Return ``dst + coeff * src`` factor by factor."""
    if dst.pairs.keys() != src.pairs.keys():
        raise ShapeError(f"adapters target different layers: {sorted(dst.pairs)} vs {sorted(src.pairs)}")
    pairs = {}
    for name, d in dst.pairs.items():
        s = src.pairs[name]
        if d.down.shape != s.down.shape or d.up.shape != s.up.shape:
            raise ShapeError(f"factor shapes differ for layer {name!r}")
        pairs[name] = LoraPair(d.down + coeff * s.down, d.up + coeff * s.up)
    return LoraAdapter(dst.config, pairs)


# -- serialization ---------------------------------------------------------


def serialize_adapter(adapter: LoraAdapter, wire_bits: int = 32) -> bytes:
    """Versioned binary record: magic, header length, JSON header, payload.

    The payload is the factors in layer order (down then up, row-major,
    little-endian) and is exactly ``wire_bits / 8 * param_count`` bytes.
    """
    if wire_bits not in _DTYPES:
        raise ValueError(f"wire_bits must be 32 or 64, got {wire_bits}")
    names = sorted(adapter.pairs)
    header = {
        "format": "fedgen-lora",
        "version": _FORMAT_VERSION,
        "rank": adapter.config.rank,
        "scaling": adapter.config.scaling,
        "target_layers": list(adapter.config.target_layers),
        "wire_bits": wire_bits,
        "layers": [
            {"id": n, "down": list(adapter.pairs[n].down.shape), "up": list(adapter.pairs[n].up.shape)}
            for n in names
        ],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    dtype = _DTYPES[wire_bits]
    payload = b"".join(
        np.ascontiguousarray(m, dtype=dtype).tobytes()
        for n in names
        for m in adapter.pairs[n]
    )
    return _MAGIC + struct.pack("<I", len(head)) + head + payload


def payload_size(blob: bytes) -> int:
    """Number of bytes in the numeric payload of a serialized adapter."""
    (head_len,) = struct.unpack("<I", blob[4:8])
    return len(blob) - 8 - head_len


def deserialize_adapter(blob: bytes) -> LoraAdapter:
    if blob[:4] != _MAGIC:
        raise CheckpointError("not a serialized adapter (bad magic)")
    (head_len,) = struct.unpack("<I", blob[4:8])
    try:
        header = json.loads(blob[8:8 + head_len].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"corrupt adapter header: {exc}") from exc
    if header.get("version") != _FORMAT_VERSION:
        raise CheckpointError(f"unsupported adapter format version {header.get('version')}")
    dtype = np.dtype(_DTYPES[header["wire_bits"]])
    config = LoraConfig(header["rank"], header["scaling"], tuple(header["target_layers"]))
    offset = 8 + head_len
    pairs = {}
    for layer in header["layers"]:
        mats = []
        for key in ("down", "up"):
            shape = tuple(layer[key])
            n = int(np.prod(shape)) * dtype.itemsize
            chunk = blob[offset:offset + n]
            if len(chunk) != n:
                raise CheckpointError("adapter payload truncated")
            mats.append(np.frombuffer(chunk, dtype=dtype).astype(np.float64).reshape(shape))
            offset += n
        pairs[layer["id"]] = LoraPair(*mats)
    if offset != len(blob):
        raise CheckpointError("trailing bytes after adapter payload")
    return LoraAdapter(config, pairs)


def save_adapter(adapter: LoraAdapter, path, wire_bits: int = 64) -> Path:
    path = Path(path)
    path.write_bytes(serialize_adapter(adapter, wire_bits))
    return path


def load_adapter(path) -> LoraAdapter:
    return deserialize_adapter(Path(path).read_bytes())
