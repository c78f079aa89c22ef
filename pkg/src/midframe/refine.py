"""Content-aware meta-learned flow refinement.

The stage blends the full-resolution flows to the requested time step,
conditions a kernel-prediction network on the upsampled half-resolution
flows plus the time step, extracts features from each blended flow, and
applies the predicted per-pixel kernels to produce the refined flows.
"""

from __future__ import annotations

from typing import NamedTuple

import torch

from .flow import InitialFlows, blend_flows
from .frames import FlowField, Frame, InvalidInputError, as_alpha
from .metaops import FeatureNet, KernelPredictionNet, adaptive_conv, build_side_tensor


class RefinedFlows(NamedTuple):
    """Flows anchored at the intermediate time step, full resolution."""

    to_first: FlowField
    to_second: FlowField


def refine_flows(
    kernel_net: KernelPredictionNet,
    feature_net: FeatureNet,
    init: InitialFlows,
    alpha,
    frames: tuple[Frame, Frame] | None = None,
) -> RefinedFlows:
    """Refine the blended flows with content-adaptive per-pixel kernels.

    The side tensor is built from the half-resolution-derived flows while the
    blend uses the full-resolution ones. Both directions share one predicted
    kernel field because their conditioning is identical. When the feature
    net is configured to see frame content (`frames` given), the input frames
    are concatenated to each blended flow before feature extraction.
    """
    a = as_alpha(alpha)
    shape = (init.full_fwd.height, init.full_fwd.width)
    for field in init:
        if (field.height, field.width) != shape:
            raise InvalidInputError("initial flow fields must share the full resolution")

    blended_first, blended_second = blend_flows(init.full_fwd, init.full_bwd, a)
    side = build_side_tensor(init.half_fwd_up, init.half_bwd_up, a)
    kernels = kernel_net(side)

    extra: list[torch.Tensor] = []
    if feature_net.in_channels > 2:
        if frames is None:
            raise InvalidInputError(
                "feature net expects frame content but no frames were supplied"
            )
        extra = [frames[0].data, frames[1].data]

    refined = []
    for blended in (blended_first, blended_second):
        features_in = torch.cat([blended.data, *extra], dim=2) if extra else blended.data
        features = feature_net(features_in)
        refined.append(FlowField(adaptive_conv(features, kernels)))
    return RefinedFlows(to_first=refined[0], to_second=refined[1])
