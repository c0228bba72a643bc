"""Image and config file I/O.

Display images go through OpenCV (8/16-bit PNG and PPM); float data is stored
as little-endian PFM. Arrays in memory are always RGB ``float64`` in [0, 1]
for display formats.
"""

from __future__ import annotations

import dataclasses
import os
import re
import sys
from pathlib import Path

import cv2
import numpy as np


class ImageReadError(OSError):
    pass


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    data = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if data is None:
        raise ImageReadError(f"cannot read image {path}")
    if data.ndim == 2:
        data = np.repeat(data[..., None], 3, axis=2)
    elif data.shape[2] == 4:
        data = data[..., :3]
    if data.dtype == np.uint8:
        scale = 255.0
    elif data.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ImageReadError(f"unsupported sample type {data.dtype} in {path}")
    return data[..., ::-1].astype(np.float64) / scale


def write_image(path, img, bits: int = 8) -> None:
    """Write an RGB image, clamping to [0, 1]; format follows the suffix."""
    path = Path(path)
    img = np.asarray(img, dtype=np.float64)
    if path.suffix.lower() == ".pfm":
        write_pfm(path, img)
        return
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    peak = 255.0 if bits == 8 else 65535.0
    dtype = np.uint8 if bits == 8 else np.uint16
    q = np.rint(np.clip(img, 0.0, 1.0) * peak).astype(dtype)
    if q.ndim == 3:
        q = np.ascontiguousarray(q[..., ::-1])
    if not cv2.imwrite(str(path), q):
        raise OSError(f"cannot write image {path}")


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        tag = f.readline().strip()
        if tag == b"PF":
            channels = 3
        elif tag == b"Pf":
            channels = 1
        else:
            raise ImageReadError(f"{path} is not a PFM file")
        dims = f.readline()
        while dims.startswith(b"#"):
            dims = f.readline()
        m = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise ImageReadError(f"malformed PFM header in {path}")
        width, height = int(m.group(1)), int(m.group(2))
        scale = float(f.readline().strip())
        endian = "<" if scale < 0 else ">"
        data = np.fromfile(f, dtype=endian + "f4", count=width * height * channels)
    if data.size != width * height * channels:
        raise ImageReadError(f"truncated PFM data in {path}")
    img = np.flipud(data.reshape(height, width, channels)).astype(np.float64)
    return np.repeat(img, 3, axis=2) if channels == 1 else img


def write_pfm(path, img) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    if c not in (1, 3):
        raise ValueError("PFM holds 1 or 3 channels")
    with open(path, "wb") as f:
        f.write(f"{'PF' if c == 3 else 'Pf'}\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(np.flipud(img)).astype("<f4").tobytes())


def parse_value(text: str, kind):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind == "optional_float":
        return None if text.lower() in ("", "none", "auto") else float(text)
    return text


def read_config(path, cls):
    """Parse a flat ``key = value`` file into dataclass ``cls``.

    Blank lines and ``#`` comments are ignored. Unknown keys raise ``KeyError``
    naming the key.
    """
    kinds = {f.name: _field_kind(f) for f in dataclasses.fields(cls)}
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise KeyError(key)
            values[key] = parse_value(value, kinds[key])
    return cls(**values)


def write_config(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in dataclasses.fields(obj):
            fh.write(f"{f.name} = {getattr(obj, f.name)!r}\n".replace("'", ""))


def _field_kind(f):
    t = f.type if not isinstance(f.type, str) else f.type
    text = str(t)
    if "Optional" in text or "None" in text:
        return "optional_float"
    for name, kind in (("bool", bool), ("int", int), ("float", float)):
        if text == name or t is kind:
            return kind
    return str


def thread_cap() -> int:
    """Worker thread limit from ``SIRRKIT_THREADS`` (default: CPU count)."""
    raw = os.environ.get("SIRRKIT_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            print(f"ignoring invalid SIRRKIT_THREADS={raw!r}", file=sys.stderr)
    return os.cpu_count() or 1
