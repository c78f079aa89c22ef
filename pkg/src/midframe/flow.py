"""Initial optical flow estimation and the time-step linear blend.

Flow between the two input frames is produced by a pluggable, frozen
estimator at both full and half resolution; no gradients propagate into it.
The half-resolution fields are upsampled back to full resolution and later
serve as conditioning for the kernel-prediction stage. The blend maps the
two inter-frame flows to the flows anchored at the intermediate time step.
"""

from __future__ import annotations

from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from scipy import ndimage

from .fileio import read_flo
from .frames import (
    DTYPE,
    FlowField,
    Frame,
    InvalidInputError,
    average_pool_2x2,
    downsample_half,
    upsample_flow_2x,
)


class InitialFlows(NamedTuple):
    """Frozen-estimator flows, all at the input frames' full resolution."""

    full_fwd: FlowField
    full_bwd: FlowField
    half_fwd_up: FlowField
    half_bwd_up: FlowField


class FlowEstimator:
    """Base class for initial flow estimators. Immutable after construction."""

    kind = "abstract"

    def estimate(self, a: Frame, b: Frame, direction: str = "fwd") -> FlowField:
        """Estimate flow from frame `a` to frame `b`.

        `direction` is a lookup hint ("fwd" or "bwd") used only by estimators
        backed by precomputed files; computing estimators ignore it.
        """
        raise NotImplementedError

    def with_pair(self, pair_id: str) -> "FlowEstimator":
        """Return an estimator bound to a dataset pair id (no-op by default)."""
        return self


class ZeroFlowEstimator(FlowEstimator):
    """Returns all-zero flow; a deterministic test double."""

    kind = "zero"

    def estimate(self, a: Frame, b: Frame, direction: str = "fwd") -> FlowField:
        return FlowField(torch.zeros(a.height, a.width, 2, dtype=DTYPE))


class ClassicalFlowEstimator(FlowEstimator):
    """Coarse-to-fine Horn-Schunck-style estimator."""

    kind = "classical"

    def __init__(self, levels: int = 3, iterations: int = 50, smoothness: float = 15.0):
        self.levels = int(levels)
        self.iterations = int(iterations)
        self.smoothness = float(smoothness)

    def estimate(self, a: Frame, b: Frame, direction: str = "fwd") -> FlowField:
        return classical_flow(
            a, b, levels=self.levels, iterations=self.iterations, smoothness=self.smoothness
        )


class FileFlowEstimator(FlowEstimator):
    """Serves precomputed flows from ``<pair-id>_fwd.flo`` / ``<pair-id>_bwd.flo``.

    When queried at half resolution the stored field is average-pooled and
    its displacements halved, keeping pixel units consistent.
    """

    kind = "file"

    def __init__(self, directory, pair_id: str | None = None):
        self.directory = Path(directory)
        self.pair_id = pair_id

    def with_pair(self, pair_id: str) -> "FileFlowEstimator":
        return FileFlowEstimator(self.directory, pair_id)

    def estimate(self, a: Frame, b: Frame, direction: str = "fwd") -> FlowField:
        if self.pair_id is None:
            raise InvalidInputError("file-backed estimator needs a pair id (use with_pair)")
        if direction not in ("fwd", "bwd"):
            raise InvalidInputError(
                f"file-backed estimator has no stored flow for direction {direction!r}"
            )
        flow = read_flo(self.directory / f"{self.pair_id}_{direction}.flo")
        while flow.height > a.height and flow.width > a.width:
            flow = FlowField(average_pool_2x2(flow.data) * 0.5)
        if (flow.height, flow.width) != (a.height, a.width):
            raise InvalidInputError(
                f"stored flow is {flow.height}x{flow.width}, cannot serve a "
                f"{a.height}x{a.width} query"
            )
        return flow


def make_estimator(kind: str, **params) -> FlowEstimator:
    """Build an estimator from a config-style description."""
    if kind == "zero":
        return ZeroFlowEstimator()
    if kind == "classical":
        return ClassicalFlowEstimator(**params)
    if kind == "file":
        return FileFlowEstimator(**params)
    raise InvalidInputError(f"unknown estimator kind {kind!r}")


def _to_gray(frame: Frame) -> np.ndarray:
    """Luminance on the 0..255 scale (gradient magnitudes the smoothness
    weight is calibrated for)."""
    arr = frame.to_numpy()
    if arr.shape[2] == 3:
        gray = 0.299 * arr[:, :, 0] + 0.587 * arr[:, :, 1] + 0.114 * arr[:, :, 2]
    else:
        gray = arr[:, :, 0]
    return gray * 255.0


def _pool_gray(img: np.ndarray) -> np.ndarray:
    if img.shape[0] % 2 == 1:
        img = np.concatenate([img, img[-1:, :]], axis=0)
    if img.shape[1] % 2 == 1:
        img = np.concatenate([img, img[:, -1:]], axis=1)
    return 0.25 * (img[0::2, 0::2] + img[0::2, 1::2] + img[1::2, 0::2] + img[1::2, 1::2])


def _warp_gray(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = img.shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    coords = np.stack([ys + v, xs + u])
    return ndimage.map_coordinates(img, coords, order=1, mode="nearest")


def _hs_level(a: np.ndarray, b_warped: np.ndarray, iterations: int, smoothness: float):
    """One Horn-Schunck solve for the incremental flow between two images."""
    mean = 0.5 * (a + b_warped)
    fx = ndimage.correlate1d(mean, [-0.5, 0.0, 0.5], axis=1, mode="nearest")
    fy = ndimage.correlate1d(mean, [-0.5, 0.0, 0.5], axis=0, mode="nearest")
    ft = b_warped - a
    denom = smoothness + fx * fx + fy * fy
    avg_kernel = np.array([[0.0, 0.25, 0.0], [0.25, 0.0, 0.25], [0.0, 0.25, 0.0]])
    du = np.zeros_like(a)
    dv = np.zeros_like(a)
    for _ in range(iterations):
        du_avg = ndimage.correlate(du, avg_kernel, mode="nearest")
        dv_avg = ndimage.correlate(dv, avg_kernel, mode="nearest")
        shared = (fx * du_avg + fy * dv_avg + ft) / denom
        du = du_avg - fx * shared
        dv = dv_avg - fy * shared
    return du, dv


def classical_flow(
    I_a: Frame,
    I_b: Frame,
    levels: int = 3,
    iterations: int = 50,
    smoothness: float = 15.0,
) -> FlowField:
    """Coarse-to-fine pyramid flow from `I_a` to `I_b`.

    At each pyramid level the second image is warped by the current estimate
    and a Horn-Schunck solve recovers the residual motion. Displacements are
    doubled when moving to the next finer level.
    """
    if (I_a.height, I_a.width) != (I_b.height, I_b.width):
        raise InvalidInputError("frames must share shape for flow estimation")
    gray_a = _to_gray(I_a)
    gray_b = _to_gray(I_b)

    pyr_a = [gray_a]
    pyr_b = [gray_b]
    for _ in range(levels - 1):
        if min(pyr_a[-1].shape) < 8:
            break
        pyr_a.append(_pool_gray(pyr_a[-1]))
        pyr_b.append(_pool_gray(pyr_b[-1]))

    u = np.zeros_like(pyr_a[-1])
    v = np.zeros_like(pyr_a[-1])
    for level in range(len(pyr_a) - 1, -1, -1):
        a = pyr_a[level]
        b = pyr_b[level]
        if u.shape != a.shape:
            u = np.kron(u, np.ones((2, 2)))[: a.shape[0], : a.shape[1]] * 2.0
            v = np.kron(v, np.ones((2, 2)))[: a.shape[0], : a.shape[1]] * 2.0
        b_warped = _warp_gray(b, u, v)
        du, dv = _hs_level(a, b_warped, iterations, smoothness)
        u = u + du
        v = v + dv
    flow = np.stack([u, v], axis=-1)
    return FlowField(np.nan_to_num(flow))


def estimate_initial_flows(estimator: FlowEstimator, I_t: Frame, I_t1: Frame) -> InitialFlows:
    """Run the frozen estimator at full and half resolution.

    The half-resolution fields are upsampled (with displacement rescaling)
    back to the full grid, cropping the padded row/column for odd sizes.
    """
    if (I_t.height, I_t.width, I_t.channels) != (I_t1.height, I_t1.width, I_t1.channels):
        raise InvalidInputError("input frames must share shape")
    h, w = I_t.height, I_t.width
    full_fwd = estimator.estimate(I_t, I_t1, "fwd")
    full_bwd = estimator.estimate(I_t1, I_t, "bwd")
    half_t = downsample_half(I_t)
    half_t1 = downsample_half(I_t1)
    half_fwd = upsample_flow_2x(estimator.estimate(half_t, half_t1, "fwd"))
    half_bwd = upsample_flow_2x(estimator.estimate(half_t1, half_t, "bwd"))
    for field in (full_fwd, full_bwd):
        if (field.height, field.width) != (h, w):
            raise InvalidInputError("estimator returned a flow of the wrong shape")
    return InitialFlows(
        full_fwd=full_fwd,
        full_bwd=full_bwd,
        half_fwd_up=FlowField(half_fwd.data[:h, :w, :]),
        half_bwd_up=FlowField(half_bwd.data[:h, :w, :]),
    )


def blend_flows(full_fwd: FlowField, full_bwd: FlowField, alpha: float) -> tuple[FlowField, FlowField]:
    """Quadratic-in-alpha blend of the two inter-frame flows.

    Returns the pair (flow from the intermediate frame back to the first
    input, flow from the intermediate frame to the second input), assuming
    locally constant velocity. `alpha` is intentionally unrestricted here;
    range validation happens at the pipeline boundary.
    """
    if (full_fwd.height, full_fwd.width) != (full_bwd.height, full_bwd.width):
        raise InvalidInputError("flow fields must share shape to blend")
    a = float(alpha)
    fwd = full_fwd.data
    bwd = full_bwd.data
    to_first = (-(1.0 - a) * a) * fwd + (a * a) * bwd
    to_second = ((1.0 - a) * (1.0 - a)) * fwd - (a * (1.0 - a)) * bwd
    return FlowField(to_first), FlowField(to_second)
