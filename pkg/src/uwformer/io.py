"""Binary PPM codec, padded image loading, and the UWF1 checkpoint format."""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor

PAD_MULTIPLE = 16
CKPT_MAGIC = b"UWF1"
CKPT_VERSION = 1
_WHITESPACE = b" \t\r\n\v\f"


class DecodeError(ValueError):
    """Malformed or unsupported image file."""

    def __init__(self, message: str, offset: int, path: str | None = None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (byte offset {offset})")
        self.offset = offset


class CheckpointError(ValueError):
    pass


# ----------------------------------------------------------------------------
# PPM


def decode_ppm(buf: bytes, path: str | None = None) -> np.ndarray:
    """Decode a binary P6 file with maxval 255 into an ``[H,W,3]`` uint8 array."""
    if buf[:2] != b"P6":
        raise DecodeError(f"bad magic {buf[:2]!r}, expected b'P6'", 0, path)
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(buf):
            raise DecodeError("header truncated", pos, path)
        ch = buf[pos:pos + 1]
        if ch in _WHITESPACE and ch:
            pos += 1
        elif ch == b"#":
            end = buf.find(b"\n", pos)
            pos = len(buf) if end < 0 else end + 1
        elif ch.isdigit():
            start = pos
            while pos < len(buf) and buf[pos:pos + 1].isdigit():
                pos += 1
            fields.append((int(buf[start:pos]), start))
        else:
            raise DecodeError(f"unexpected header byte {ch!r}", pos, path)
    (width, _), (height, hpos), (maxval, mpos) = fields
    if width < 1 or height < 1:
        raise DecodeError(f"invalid size {width}x{height}", hpos, path)
    if maxval != 255:
        raise DecodeError(f"unsupported maxval {maxval}, expected 255", mpos, path)
    if pos >= len(buf) or buf[pos:pos + 1] not in _WHITESPACE:
        raise DecodeError("missing whitespace after maxval", pos, path)
    pos += 1
    need = width * height * 3
    payload = buf[pos:pos + need]
    if len(payload) < need:
        raise DecodeError(
            f"payload truncated: expected {need} bytes, got {len(payload)}", pos + len(payload), path
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()


def encode_ppm(pixels: np.ndarray) -> bytes:
    h, w, _ = pixels.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(pixels, dtype=np.uint8).tobytes()


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes(), str(path))


def write_ppm(path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(pixels))


# ----------------------------------------------------------------------------
# float images


def pad_to_multiple(chw: np.ndarray, multiple: int = PAD_MULTIPLE) -> np.ndarray:
    h, w = chw.shape[-2:]
    ph = -h % multiple
    pw = -w % multiple
    if ph == 0 and pw == 0:
        return chw
    return np.pad(chw, ((0, 0), (0, ph), (0, pw)), mode="edge")


def to_float(pixels: np.ndarray) -> np.ndarray:
    return (pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))


def quantize(chw: np.ndarray) -> np.ndarray:
    """Map [0,1] floats to bytes with round-half-up, returning ``[H,W,3]``."""
    v = np.clip(np.asarray(chw, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def load_image(path, multiple: int = PAD_MULTIPLE) -> tuple[Tensor, tuple[int, int]]:
    """Load a P6 image as ``[3,H',W']`` in [0,1], edge-padded to ``multiple``.

    Returns the tensor and the original ``(H, W)`` for cropping on save.
    """
    chw = to_float(read_ppm(path))
    size = chw.shape[1:]
    return Tensor(pad_to_multiple(chw, multiple)), (int(size[0]), int(size[1]))


def save_image(image, path, original_size: tuple[int, int] | None = None) -> None:
    data = np.asarray(getattr(image, "data", image))
    if original_size is not None:
        h, w = original_size
        data = data[:, :h, :w]
    write_ppm(path, quantize(data))


def list_images(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in (".ppm", ".pnm"))


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, tensors: Mapping[str, np.ndarray | Tensor], scalars: Mapping | None = None) -> None:
    """Write tensors and JSON-able scalars in the UWF1 layout.

    Layout: magic, u16 version, u32 header length, UTF-8 JSON header, then the
    little-endian float32 payloads in header order.
    """
    entries = []
    payloads = []
    offset = 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(getattr(t, "data", t), dtype="<f4")
        entries.append({"name": name, "dtype": "f32", "shape": list(arr.shape), "offset": offset})
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(
        {"tensors": entries, "scalars": dict(scalars or {})}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<HI", CKPT_VERSION, len(header)))
        f.write(header)
        for p in payloads:
            f.write(p)


def load_checkpoint(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a UWF1 checkpoint")
    if len(buf) < 10:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 10 + hlen
    try:
        header = json.loads(buf[10:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint header ({exc})") from None
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    for e in header["tensors"]:
        if e["dtype"] != "f32":
            raise CheckpointError(f"{path}: tensor {e['name']} has dtype {e['dtype']}")
        n = int(np.prod(e["shape"], dtype=np.int64))
        lo = start + e["offset"]
        if lo + 4 * n > len(buf):
            raise CheckpointError(f"{path}: payload for {e['name']} is truncated")
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=lo).reshape(e["shape"])
        tensors[e["name"]] = arr.astype(np.float32)
    return tensors, header["scalars"]
