"""Core data types (frames, flow fields, time steps) and resampling ops.

All image data lives in float64 tensors laid out H x W x C with values
nominally in [0, 1]; flow fields are H x W x 2 with channel 0 holding the
horizontal displacement (u, pixels) and channel 1 the vertical one (v).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

DTYPE = torch.float64

# Pipeline minimum: the half-resolution stage needs at least 4x4 to work with.
MIN_FRAME_SIZE = 8


class InvalidInputError(ValueError):
    """Raised when an operation receives arguments violating its contract."""


def _as_tensor(data) -> torch.Tensor:
    t = torch.as_tensor(data)
    if not t.is_floating_point():
        t = t.to(DTYPE)
    elif t.dtype != DTYPE:
        t = t.to(DTYPE)
    return t


@dataclass(frozen=True)
class Frame:
    """An H x W x C image; C is 1 or 3. Treated as immutable."""

    data: torch.Tensor

    def __post_init__(self):
        t = _as_tensor(self.data)
        if t.ndim == 2:
            t = t.unsqueeze(-1)
        if t.ndim != 3 or t.shape[2] not in (1, 3):
            raise InvalidInputError(f"frame data must be HxWxC with C in {{1,3}}, got shape {tuple(t.shape)}")
        if t.shape[0] < 1 or t.shape[1] < 1:
            raise InvalidInputError(f"frame must be non-empty, got shape {tuple(t.shape)}")
        if not bool(torch.isfinite(t).all()):
            raise InvalidInputError("frame data contains non-finite values")
        object.__setattr__(self, "data", t)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def to_numpy(self) -> np.ndarray:
        return self.data.detach().numpy()


@dataclass(frozen=True)
class FlowField:
    """An H x W x 2 displacement field in pixels of its own resolution."""

    data: torch.Tensor

    def __post_init__(self):
        t = _as_tensor(self.data)
        if t.ndim != 3 or t.shape[2] != 2:
            raise InvalidInputError(f"flow data must be HxWx2, got shape {tuple(t.shape)}")
        if not bool(torch.isfinite(t).all()):
            raise InvalidInputError("flow data contains non-finite values")
        object.__setattr__(self, "data", t)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def to_numpy(self) -> np.ndarray:
        return self.data.detach().numpy()


@dataclass(frozen=True)
class TimeStep:
    """A fractional temporal position strictly inside (0, 1)."""

    alpha: float

    def __post_init__(self):
        a = float(self.alpha)
        if not np.isfinite(a) or not (0.0 < a < 1.0):
            raise InvalidInputError(f"time step must lie strictly inside (0, 1), got {self.alpha}")
        object.__setattr__(self, "alpha", a)


def as_alpha(value) -> float:
    """Coerce a TimeStep or number to a validated float in (0, 1)."""
    if isinstance(value, TimeStep):
        return value.alpha
    return TimeStep(float(value)).alpha


def average_pool_2x2(data: torch.Tensor) -> torch.Tensor:
    """2x2 average pooling of an HxWxC tensor.

    Odd heights/widths are first replicate-padded to even. The four-term sum
    is grouped pairwise so constant inputs pool to the same constant exactly.
    """
    data = _as_tensor(data)
    if data.shape[0] % 2 == 1:
        data = torch.cat([data, data[-1:, :, :]], dim=0)
    if data.shape[1] % 2 == 1:
        data = torch.cat([data, data[:, -1:, :]], dim=1)
    a = data[0::2, 0::2, :]
    b = data[0::2, 1::2, :]
    c = data[1::2, 0::2, :]
    d = data[1::2, 1::2, :]
    return ((a + b) + (c + d)) * 0.25


def downsample_half(frame: Frame) -> Frame:
    """Halve a frame's resolution by 2x2 average pooling."""
    if frame.height < MIN_FRAME_SIZE or frame.width < MIN_FRAME_SIZE:
        raise InvalidInputError(
            f"frame must be at least {MIN_FRAME_SIZE}x{MIN_FRAME_SIZE} to downsample, "
            f"got {frame.height}x{frame.width}"
        )
    return Frame(average_pool_2x2(frame.data))


def bilinear_sample(data: torch.Tensor, ys: torch.Tensor, xs: torch.Tensor) -> torch.Tensor:
    """Sample an HxWxC tensor at (row, col) coordinates with edge clamping.

    `ys` and `xs` share an arbitrary shape S; the result has shape S x C.
    Uses the lerp form a + w*(b - a), so integer coordinates return the
    stored values bit-exactly and constant inputs stay constant.
    Differentiable in both the data and the coordinates.
    """
    h, w = data.shape[0], data.shape[1]
    ys = torch.clamp(ys, 0.0, float(h - 1))
    xs = torch.clamp(xs, 0.0, float(w - 1))
    y0 = torch.floor(ys)
    x0 = torch.floor(xs)
    wy = (ys - y0).unsqueeze(-1)
    wx = (xs - x0).unsqueeze(-1)
    y0i = y0.long()
    x0i = x0.long()
    y1i = torch.clamp(y0i + 1, max=h - 1)
    x1i = torch.clamp(x0i + 1, max=w - 1)
    v00 = data[y0i, x0i]
    v01 = data[y0i, x1i]
    v10 = data[y1i, x0i]
    v11 = data[y1i, x1i]
    top = v00 + wx * (v01 - v00)
    bottom = v10 + wx * (v11 - v10)
    return top + wy * (bottom - top)


def upsample_flow_2x(flow: FlowField) -> FlowField:
    """Upsample a flow field 2x bilinearly and double its displacements.

    Displacements are measured in pixels, so projecting to a grid with twice
    the sampling density rescales them by 2. Output shape is 2H x 2W;
    sampling uses half-pixel-centre alignment with edge clamping.
    """
    h, w = flow.height, flow.width
    out_rows = torch.arange(2 * h, dtype=DTYPE)
    out_cols = torch.arange(2 * w, dtype=DTYPE)
    src_rows = (out_rows + 0.5) / 2.0 - 0.5
    src_cols = (out_cols + 0.5) / 2.0 - 0.5
    ys, xs = torch.meshgrid(src_rows, src_cols, indexing="ij")
    up = bilinear_sample(flow.data, ys, xs)
    return FlowField(up * 2.0)
