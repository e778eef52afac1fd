"""Capture file format for recorded features and attention.

::

    RPVA1\\n
    <one-line JSON metadata>\\n
    <float64 little-endian payload>

The metadata carries ``layout``, ``steps``, ``layers``, ``prompt_id``, ``seed``,
free-form ``meta`` (model/schedule settings) and ``records``: an ordered list of
``{"kind", "step", "layer", "shape"}``. Kinds are ``orig``, ``mean``, ``enh``
(token features), ``attn`` (per-head weights), ``x_t`` (model input at a step) and
``sample`` (final output). The payload is the records' values back to back.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .analysis import FEATURE_KINDS, RunCapture
from .errors import CaptureFormatError
from .model import TokenLayout

MAGIC = b"RPVA1\n"


def _records(rc: RunCapture):
    for kind in FEATURE_KINDS:
        for (step, layer), arr in sorted(rc.features.get(kind, {}).items(), key=lambda kv: (-kv[0][0], kv[0][1])):
            yield {"kind": kind, "step": step, "layer": layer}, arr
    for (step, layer), arr in sorted(rc.attention.items(), key=lambda kv: (-kv[0][0], kv[0][1])):
        yield {"kind": "attn", "step": step, "layer": layer}, arr
    for step, arr in sorted(rc.inputs.items(), reverse=True):
        yield {"kind": "x_t", "step": step, "layer": None}, arr
    if rc.sample is not None:
        yield {"kind": "sample", "step": 0, "layer": None}, rc.sample


def to_bytes(rc: RunCapture) -> bytes:
    records, chunks = [], []
    for rec, arr in _records(rc):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        rec["shape"] = list(arr.shape)
        records.append(rec)
        chunks.append(arr.tobytes())
    meta = {
        "layout": {"S": rc.layout.S, "F": rc.layout.F, "grid": rc.layout.grid},
        "steps": list(rc.steps),
        "layers": list(rc.layers),
        "prompt_id": int(rc.prompt_id),
        "seed": int(rc.seed),
        "meta": rc.meta,
        "records": records,
    }
    head = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + head + b"\n" + b"".join(chunks)


def write_capture(rc: RunCapture, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(rc))
    return path


def from_bytes(blob: bytes) -> RunCapture:
    if not blob.startswith(MAGIC):
        raise CaptureFormatError("not a capture file (missing RPVA1 header line)")
    end = blob.find(b"\n", len(MAGIC))
    if end < 0:
        raise CaptureFormatError("capture metadata line is not terminated")
    try:
        meta = json.loads(blob[len(MAGIC):end].decode("utf-8"))
        lay = meta["layout"]
        layout = TokenLayout(S=int(lay["S"]), F=int(lay["F"]), grid=int(lay["grid"]))
        rc = RunCapture(layout, [int(s) for s in meta["steps"]], [int(l) for l in meta["layers"]],
                        int(meta["prompt_id"]), int(meta["seed"]), meta.get("meta", {}))
        records = meta["records"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CaptureFormatError(f"malformed capture metadata: {exc}") from None
    payload = memoryview(blob)[end + 1:]
    offset = 0
    for rec in records:
        try:
            shape = tuple(int(s) for s in rec["shape"])
            kind = rec["kind"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CaptureFormatError(f"malformed capture record {rec!r}: {exc}") from None
        count = int(np.prod(shape)) if shape else 1
        if offset + count * 8 > len(payload):
            raise CaptureFormatError("capture payload is shorter than its records declare")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += count * 8
        if kind in FEATURE_KINDS:
            rc.features.setdefault(kind, {})[(int(rec["step"]), int(rec["layer"]))] = arr
        elif kind == "attn":
            rc.attention[(int(rec["step"]), int(rec["layer"]))] = arr
        elif kind == "x_t":
            rc.inputs[int(rec["step"])] = arr
        elif kind == "sample":
            rc.sample = arr
        else:
            raise CaptureFormatError(f"unknown capture record kind {kind!r}")
    if offset != len(payload):
        raise CaptureFormatError(f"capture payload has {len(payload) - offset} trailing bytes")
    return rc


def read_capture(path) -> RunCapture:
    return from_bytes(Path(path).read_bytes())
