"""On-disk formats: the IQT1 tensor container, annotation JSON, key=value configs.

IQT1 layout (little-endian)::

    b"IQT1" | u32 count | count x ( u16 name_len | name utf-8 | u8 rank |
                                    u32 dims[rank] | float32 data[prod(dims)] )
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .geometry import Box, DomainError

MAGIC = b"IQT1"


class FormatError(ValueError):
    """Input file cannot be parsed."""


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or a.ndim > 0xFF:
            raise FormatError(f"tensor {name!r} does not fit the header")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes(order="C"))
    return b"".join(parts)


def decode_tensors(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise FormatError("not an IQT1 container")
    pos = 4
    try:
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if pos + 4 * n > len(data):
                raise FormatError(f"tensor {name!r} truncated")
            out[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims).copy()
            pos += 4 * n
    except struct.error as exc:
        raise FormatError(f"truncated container: {exc}") from exc
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes")
    return out


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_tensors(tensors))


def read_tensors(path) -> dict[str, np.ndarray]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(str(exc)) from exc
    return decode_tensors(data)


def read_annotations(path):
    """Parse an annotation file into ``(image_size, boxes, classes)``."""
    try:
        obj = json.loads(Path(path).read_text())
        w, h = (float(v) for v in obj["image_size"])
        instances = obj["instances"]
        raw = [(inst["box"], int(inst["class"])) for inst in instances]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad annotation file {path}: {exc}") from exc
    boxes, classes = [], []
    for coords, cls in raw:
        box = Box.from_seq(coords)
        if box.x1 < 0 or box.y1 < 0 or box.x2 > w or box.y2 > h:
            raise DomainError(f"box {box.to_list()} outside image {w}x{h}")
        boxes.append(box)
        classes.append(cls)
    return (w, h), boxes, classes


def write_annotations(path, image_size, boxes, classes) -> None:
    obj = {"image_size": list(image_size),
           "instances": [{"box": b.to_list(), "class": int(c)} for b, c in zip(boxes, classes)]}
    Path(path).write_text(json.dumps(obj, indent=1) + "\n")


def read_config(path) -> dict[str, str]:
    """Flat ``key=value`` file; ``#`` starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(str(exc)) from exc
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}:{n}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def write_config(path, values: dict) -> None:
    lines = []
    for k, v in values.items():
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k}={v}")
    Path(path).write_text("\n".join(lines) + "\n")


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise FormatError(f"not a boolean: {text!r}")
