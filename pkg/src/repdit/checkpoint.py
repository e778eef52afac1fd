"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"RPVD"              4 bytes magic
    version              uint32, currently 1
    header_length        uint64
    header               UTF-8 JSON: {"config", "manifest": [{"name", "shape"}], "step", "extra"}
    payload              float64 values, manifest order, row-major

Optimizer moments, when present, are ordinary manifest entries prefixed ``adam.m.``
and ``adam.v.``. The header is written with sorted keys, so saving the same state
twice yields identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, config_from_dict
from .errors import (
    CheckpointError,
    CheckpointLengthError,
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointVersionError,
    ConfigError,
)
from .model import param_shapes

MAGIC = b"RPVD"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict[str, np.ndarray]
    step: int = 0
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def manifest(self) -> list[tuple[str, tuple[int, ...]]]:
        names = [n for n, _ in param_shapes(self.config.model)]
        entries = [(n, tuple(self.params[n].shape)) for n in names]
        entries += [(n, tuple(a.shape)) for n, a in sorted(self.optimizer.items())]
        return entries

    def arrays(self) -> dict[str, np.ndarray]:
        return {**self.params, **self.optimizer}


def to_bytes(ckpt: Checkpoint) -> bytes:
    _check_shapes(ckpt.config, {n: tuple(a.shape) for n, a in ckpt.params.items()})
    manifest = ckpt.manifest()
    header = {
        "config": ckpt.config.to_dict(),
        "manifest": [{"name": n, "shape": list(s)} for n, s in manifest],
        "step": int(ckpt.step),
        "extra": ckpt.extra,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    arrays = ckpt.arrays()
    payload = b"".join(np.ascontiguousarray(arrays[n], dtype="<f8").tobytes() for n, _ in manifest)
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + payload


def save(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))
    return path


def _check_shapes(config: RunConfig, shapes: dict[str, tuple[int, ...]]) -> None:
    expected = dict(param_shapes(config.model))
    for name, shape in expected.items():
        if name not in shapes:
            raise CheckpointShapeError(f"parameter {name} missing from manifest")
        if tuple(shapes[name]) != shape:
            raise CheckpointShapeError(f"parameter {name} has shape {tuple(shapes[name])}, config implies {shape}")
    stray = [n for n in shapes if n not in expected and not n.startswith(("adam.m.", "adam.v."))]
    if stray:
        raise CheckpointShapeError(f"manifest names unknown parameters: {', '.join(sorted(stray))}")


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < _PREFIX.size or blob[:4] != MAGIC:
        raise CheckpointMagicError("not a checkpoint file (bad magic)")
    _, version, head_len = _PREFIX.unpack_from(blob)
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    if start + head_len > len(blob):
        raise CheckpointLengthError("header extends past end of file")
    try:
        header = json.loads(blob[start:start + head_len].decode("utf-8"))
        config = config_from_dict(header["config"])
        manifest = [(e["name"], tuple(int(s) for s in e["shape"])) for e in header["manifest"]]
        step = int(header["step"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    payload = memoryview(blob)[start + head_len:]
    counts = [int(np.prod(s)) if s else 1 for _, s in manifest]
    expected = sum(counts) * 8
    if len(payload) != expected:
        raise CheckpointLengthError(f"payload holds {len(payload)} bytes, manifest declares {expected}")
    _check_shapes(config, dict(manifest))
    arrays, offset = {}, 0
    for (name, shape), count in zip(manifest, counts):
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).astype(np.float64)
        arrays[name] = arr.reshape(shape)
        offset += count * 8
    params = {n: a for n, a in arrays.items() if not n.startswith("adam.")}
    optimizer = {n: a for n, a in arrays.items() if n.startswith("adam.")}
    return Checkpoint(config, params, step, optimizer, header.get("extra", {}))


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
