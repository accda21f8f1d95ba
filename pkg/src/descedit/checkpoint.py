"""DEDT checkpoints and P6 PPM images.

Checkpoint layout::

    b"DEDT" | u32 version=1 | u64 header length | UTF-8 JSON header | payload

The header lists every tensor as ``{name, shape, dtype, offset, nbytes,
frozen}`` with offsets relative to the payload start, plus the run config,
the training-step counter, the merge flag and a CRC32 of the payload.  The
payload is the concatenation of little-endian float32 tensors.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ChecksumError, HeaderError, TruncatedFileError, UnsupportedVersionError
from .model import Model, ModelConfig
from .numcore import ParamSet

MAGIC = b"DEDT"
VERSION = 1
PREFIX = struct.Struct("<4sIQ")


def dumps_checkpoint(model: Model, config: dict, step: int = 0) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in model.params:
        t = model.params[name]
        if t.dtype != np.float32:
            raise ValueError(f"checkpoints store float32 tensors; {name} is {t.dtype}")
        raw = t.data.astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "dtype": "float32", "offset": offset,
                        "nbytes": len(raw), "frozen": model.params.is_frozen(name)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "tensors": entries,
        "config": config,
        "model": model.config.to_dict(),
        "step": int(step),
        "merged": bool(model.merged),
        "payload_crc32": zlib.crc32(payload),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + payload


def loads_checkpoint(blob: bytes) -> tuple[Model, dict, int]:
    """Returns (model, run config dict, step)."""
    if len(blob) < PREFIX.size:
        raise TruncatedFileError("checkpoint shorter than its fixed prefix")
    magic, version, hlen = PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"checkpoint version {version} is not supported")
    if len(blob) < PREFIX.size + hlen:
        raise TruncatedFileError("checkpoint header truncated")
    try:
        header = json.loads(blob[PREFIX.size: PREFIX.size + hlen].decode("utf-8"))
        entries = header["tensors"]
        model_cfg = ModelConfig(**header["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise HeaderError(f"unreadable checkpoint header: {exc}") from exc
    payload = blob[PREFIX.size + hlen:]

    expected = 0
    for e in sorted(entries, key=lambda e: e["offset"]):
        n = int(np.prod(e["shape"], dtype=np.int64)) * 4
        if e["dtype"] != "float32" or e["nbytes"] != n:
            raise HeaderError(f"tensor {e['name']}: inconsistent dtype or size")
        if e["offset"] != expected:
            raise HeaderError(f"tensor {e['name']}: offsets overlap or leave a gap")
        expected += n
    if len(payload) < expected:
        raise TruncatedFileError(f"checkpoint payload truncated: {len(payload)} of {expected} bytes")
    if len(payload) > expected:
        raise HeaderError("tensors do not cover the payload")
    if zlib.crc32(payload) != header.get("payload_crc32"):
        raise ChecksumError("checkpoint payload CRC32 mismatch")

    params = ParamSet()
    for e in entries:
        arr = np.frombuffer(payload, dtype="<f4", count=e["nbytes"] // 4, offset=e["offset"])
        params.add(e["name"], arr.astype(np.float32).reshape(e["shape"]), frozen=bool(e["frozen"]))
    model = Model(model_cfg, params, merged=bool(header.get("merged", False)))
    return model, header.get("config", {}), int(header.get("step", 0))


def save_checkpoint(path, model: Model, config: dict, step: int = 0) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(dumps_checkpoint(model, config, step))


def load_checkpoint(path) -> tuple[Model, dict, int]:
    return loads_checkpoint(Path(path).read_bytes())


# --------------------------------------------------------------------- PPM

def to_bytes_image(img) -> np.ndarray:
    """[3,H,W] in [-1,1] -> uint8 [H,W,3]."""
    img = np.clip(np.asarray(img, dtype=np.float64), -1.0, 1.0)
    return np.round((img + 1.0) * 127.5).astype(np.uint8).transpose(1, 2, 0)


def encode_ppm(img) -> bytes:
    rgb = to_bytes_image(img)
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def write_ppm(path, img) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_ppm(img))


def image_grid(rows, pad: int = 1, fill: float = 1.0) -> np.ndarray:
    """Tile a list of rows of [3,H,W] images into one image."""
    rows = [list(r) for r in rows]
    h, w = rows[0][0].shape[1:]
    ncol = max(len(r) for r in rows)
    out = np.full((3, len(rows) * (h + pad) + pad, ncol * (w + pad) + pad), fill, dtype=np.float32)
    for i, r in enumerate(rows):
        for j, img in enumerate(r):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            out[:, y:y + h, x:x + w] = img
    return out
