"""Image and flow-field file I/O.

Images are 8-bit PNG or binary PPM (P6); pixel values are scaled to [0, 1]
on read and clamped + quantized back to 8 bits on write. Flow fields use the
Middlebury ``.flo`` interchange layout: a little-endian float32 magic
202021.25, int32 width and height, then row-major interleaved (u, v)
float32 pairs.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .frames import Frame, FlowField

FLO_MAGIC = 202021.25

_SUPPORTED_MODES = {"L": 1, "RGB": 3}


class ImageIOError(IOError):
    """Raised when an image file cannot be read or written."""


class FlowFormatError(IOError):
    """Raised when a ``.flo`` file violates the interchange layout."""


def read_image(path) -> Frame:
    """Read an 8-bit PNG or PPM image into a [0, 1] frame."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.mode not in _SUPPORTED_MODES:
                raise ImageIOError(
                    f"{path}: unsupported image mode {img.mode!r} (need 8-bit L or RGB)"
                )
            arr = np.asarray(img, dtype=np.uint8)
    except ImageIOError:
        raise
    except Exception as exc:
        raise ImageIOError(f"{path}: cannot read image ({exc})") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return Frame(arr.astype(np.float64) / 255.0)


def write_image(frame: Frame, path) -> None:
    """Write a frame as an 8-bit image; values are clamped to [0, 1] first."""
    path = Path(path)
    data = np.clip(frame.to_numpy(), 0.0, 1.0)
    quantized = np.rint(data * 255.0).astype(np.uint8)
    if quantized.shape[2] == 1:
        img = Image.fromarray(quantized[:, :, 0], mode="L")
    else:
        img = Image.fromarray(quantized, mode="RGB")
    try:
        img.save(path)
    except Exception as exc:
        raise ImageIOError(f"{path}: cannot write image ({exc})") from exc


def read_flo(path) -> FlowField:
    """Read a Middlebury ``.flo`` flow file."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FlowFormatError(f"{path}: cannot read flow file ({exc})") from exc
    if len(raw) < 12:
        raise FlowFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic = struct.unpack("<f", raw[0:4])[0]
    if magic != np.float32(FLO_MAGIC):
        raise FlowFormatError(f"{path}: bad magic number {magic!r}")
    width, height = struct.unpack("<ii", raw[4:12])
    if width <= 0 or height <= 0:
        raise FlowFormatError(f"{path}: invalid dimensions {width}x{height}")
    expected = 12 + 8 * width * height
    if len(raw) != expected:
        raise FlowFormatError(
            f"{path}: payload is {len(raw)} bytes, expected {expected} for {width}x{height}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(height, width, 2)
    return FlowField(data.astype(np.float64))


def write_flo(flow: FlowField, path) -> None:
    """Write a flow field in Middlebury ``.flo`` layout (float32)."""
    path = Path(path)
    header = struct.pack("<fii", FLO_MAGIC, flow.width, flow.height)
    payload = flow.to_numpy().astype("<f4").tobytes()
    path.write_bytes(header + payload)
