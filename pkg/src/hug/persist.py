"""Binary tensor container (checkpoints and datasets) and the dataset sidecar.

Container layout, all integers little-endian::

    b"HUGC" | u32 version | u64 len | config text (utf-8)
    repeated until EOF:
        u32 name len | name (utf-8) | u32 rank | u64 dims[rank] | f64 values (row-major)

Tensors are written in sorted name order so equal inputs give equal bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .synthdata import TripletSet

MAGIC = b"HUGC"
VERSION = 1


class FormatError(ValueError):
    """Malformed container; the message names the byte offset."""


def dumps(tensors: Mapping[str, np.ndarray], config_text: str = "") -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    cfg = config_text.encode("utf-8")
    parts += [struct.pack("<Q", len(cfg)), cfg]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
        parts += [struct.pack("<Q", d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> tuple[str, dict[str, np.ndarray]]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated {what} at offset {pos} (need {n} bytes, have {len(blob) - pos})")
        out = blob[pos:pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic at offset 0, expected b'HUGC'")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    (n_cfg,) = struct.unpack("<Q", take(8, "config length"))
    try:
        config_text = take(n_cfg, "config text").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"config text at offset 16 is not utf-8: {exc}") from None
    tensors: dict[str, np.ndarray] = {}
    while pos < len(blob):
        start = pos
        (n_name,) = struct.unpack("<I", take(4, "name length"))
        name = take(n_name, "tensor name").decode("utf-8", errors="replace")
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r} at offset {start}")
        (rank,) = struct.unpack("<I", take(4, f"rank of {name!r}"))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, f"dims of {name!r}"))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        values = np.frombuffer(take(8 * count, f"values of {name!r}"), dtype="<f8")
        tensors[name] = values.astype(np.float64).reshape(shape)
    return config_text, tensors


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], config_text: str = "") -> None:
    Path(path).write_bytes(dumps(tensors, config_text))


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# datasets: container for arrays plus a JSONL record per example

_ARRAYS = ("x_r", "x_t", "x_c", "target_index", "ref_values", "target_values",
           "noise_img", "noise_txt", "coord_mismatch", "ambiguous", "gallery", "gallery_values")
_INTS = ("target_index", "ref_values", "target_values", "gallery_values")


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".labels.jsonl")


def save_dataset(path, data: TripletSet, config_text: str = "") -> None:
    arrays = {k: np.asarray(getattr(data, k), dtype=np.float64) for k in _ARRAYS}
    save_checkpoint(path, arrays, config_text)
    with open(sidecar_path(path), "w") as f:
        for i in range(len(data)):
            f.write(json.dumps(data.label_record(i), sort_keys=True) + "\n")


def load_dataset(path) -> tuple[str, TripletSet]:
    config_text, arrays = load_checkpoint(path)
    missing = [k for k in _ARRAYS if k not in arrays]
    if missing:
        raise FormatError(f"dataset container lacks tensors {missing}")
    side = sidecar_path(path)
    records = []
    with open(side) as f:
        for line_no, line in enumerate(f, 1):
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{side}:{line_no}: {exc}") from None
    n = arrays["x_r"].shape[0]
    if len(records) != n:
        raise FormatError(f"{side} has {len(records)} records for {n} examples")
    cols = {k: (arrays[k].astype(np.intp) if k in _INTS else arrays[k]) for k in _ARRAYS}
    cols["coord_mismatch"] = cols["coord_mismatch"].astype(bool)
    cols["ambiguous"] = cols["ambiguous"].astype(bool)
    modified = [tuple(r["modified"]) for r in records]
    return config_text, TripletSet(modified=modified, **cols)
