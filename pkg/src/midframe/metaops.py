"""Meta-learning machinery shared by the flow-refinement and synthesis stages.

Side tensors (H x W x 6) pack the per-pixel conditioning: two flow fields
plus the time step and its complement. Kernel-prediction networks map a side
tensor to one spatial kernel per pixel (H x W x k*k, row-major within the
kernel); the spatially-adaptive convolution applies those kernels depthwise
to a feature map. Feature networks are residual-dense stacks with a global
input-to-output projection.

Everything runs in float64 on single images (no batch axis in the public
surface) and is differentiable end to end.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .frames import DTYPE, FlowField, InvalidInputError


def build_side_tensor(flow_a: FlowField, flow_b: FlowField, alpha: float) -> torch.Tensor:
    """Stack two flows and the time-step channels into an H x W x 6 tensor.

    Per-pixel layout: (flow_a.u, flow_a.v, flow_b.u, flow_b.v, alpha,
    1 - alpha). The last two channels are spatially constant and sum to 1.
    """
    if (flow_a.height, flow_a.width) != (flow_b.height, flow_b.width):
        raise InvalidInputError("flows must share shape to build a side tensor")
    a = float(alpha)
    h, w = flow_a.height, flow_a.width
    alpha_plane = torch.full((h, w, 1), a, dtype=DTYPE)
    complement = torch.full((h, w, 1), 1.0 - a, dtype=DTYPE)
    return torch.cat([flow_a.data, flow_b.data, alpha_plane, complement], dim=2)


def _check_kernel_field(kernels: torch.Tensor) -> int:
    if kernels.ndim != 3:
        raise InvalidInputError(f"kernel field must be HxWxk^2, got shape {tuple(kernels.shape)}")
    k = math.isqrt(kernels.shape[2])
    if k * k != kernels.shape[2] or k % 2 == 0:
        raise InvalidInputError(
            f"kernel field channel count {kernels.shape[2]} is not an odd square"
        )
    return k


def adaptive_conv(features: torch.Tensor, kernels: torch.Tensor) -> torch.Tensor:
    """Apply one spatial kernel per pixel, shared across channels.

    ``out[i, j, c] = sum_uv kernels[i, j, u*k+v] * features[i+u-k//2, j+v-k//2, c]``
    with replicate padding. Differentiable in both arguments.
    """
    if features.ndim != 3:
        raise InvalidInputError(f"features must be HxWxC, got shape {tuple(features.shape)}")
    k = _check_kernel_field(kernels)
    if features.shape[:2] != kernels.shape[:2]:
        raise InvalidInputError(
            f"feature/kernel spatial shapes differ: {tuple(features.shape[:2])} vs "
            f"{tuple(kernels.shape[:2])}"
        )
    h, w, c = features.shape
    x = features.permute(2, 0, 1).unsqueeze(0)
    pad = k // 2
    if pad:
        x = F.pad(x, (pad, pad, pad, pad), mode="replicate")
    patches = F.unfold(x, kernel_size=k).view(c, k * k, h, w)
    weights = kernels.permute(2, 0, 1).unsqueeze(0)
    return (patches * weights).sum(dim=1).permute(1, 2, 0)


def _he_uniform_(tensor: torch.Tensor, fan_in: int, gen: torch.Generator) -> None:
    bound = math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=gen)


def _conv(in_ch: int, out_ch: int, kernel: int) -> nn.Conv2d:
    conv = nn.Conv2d(
        in_ch,
        out_ch,
        kernel,
        padding=kernel // 2,
        padding_mode="replicate" if kernel > 1 else "zeros",
    )
    return conv.to(DTYPE)


def _init_conv(conv: nn.Conv2d, gen: torch.Generator, zero: bool = False) -> None:
    with torch.no_grad():
        conv.bias.zero_()
        if zero:
            conv.weight.zero_()
        else:
            fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
            _he_uniform_(conv.weight, fan_in, gen)


class KernelPredictionNet(nn.Module):
    """Two shared 3x3 convolutions followed by two per-pixel dense layers.

    Consumes an H x W x 6 side tensor and emits an H x W x k*k kernel field,
    rectified-linear between layers and linear on the output.
    """

    def __init__(
        self,
        kernel_size: int = 3,
        in_channels: int = 6,
        conv_channels: int = 32,
        dense_width: int = 64,
    ):
        super().__init__()
        if kernel_size % 2 == 0 or kernel_size < 1:
            raise InvalidInputError(f"kernel size must be odd and >= 1, got {kernel_size}")
        self.kernel_size = kernel_size
        self.in_channels = in_channels
        self.conv1 = _conv(in_channels, conv_channels, 3)
        self.conv2 = _conv(conv_channels, conv_channels, 3)
        self.dense1 = _conv(conv_channels, dense_width, 1)
        self.dense2 = _conv(dense_width, kernel_size * kernel_size, 1)

    def reset_parameters(self, gen: torch.Generator, output: str = "delta") -> None:
        """Seeded init. ``output='delta'`` zeroes the last layer and sets its
        bias to the centre-tap kernel so the net starts as an identity
        filter; ``'random'`` uses the fan-in bound throughout."""
        for conv in (self.conv1, self.conv2, self.dense1):
            _init_conv(conv, gen)
        _init_conv(self.dense2, gen, zero=(output == "delta"))
        if output == "delta":
            with torch.no_grad():
                centre = (self.kernel_size * self.kernel_size) // 2
                self.dense2.bias[centre] = 1.0

    def forward(self, side: torch.Tensor) -> torch.Tensor:
        if side.ndim != 3 or side.shape[2] != self.in_channels:
            raise InvalidInputError(
                f"side tensor must be HxWx{self.in_channels}, got shape {tuple(side.shape)}"
            )
        x = side.permute(2, 0, 1).unsqueeze(0)
        x = F.relu(self.conv1(x))
        x = F.relu(self.conv2(x))
        x = F.relu(self.dense1(x))
        x = self.dense2(x)
        return x.squeeze(0).permute(1, 2, 0)


def predict_kernels(net: KernelPredictionNet, side: torch.Tensor) -> torch.Tensor:
    """Run a kernel-prediction network on a side tensor."""
    return net(side)


class _DenseBlock(nn.Module):
    """Densely connected convolutions with local fusion and residual add."""

    def __init__(self, channels: int, layers: int):
        super().__init__()
        self.convs = nn.ModuleList(
            _conv(channels * (1 + i), channels, 3) for i in range(layers)
        )
        self.fuse = _conv(channels * (1 + layers), channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = [x]
        for conv in self.convs:
            feats.append(F.relu(conv(torch.cat(feats, dim=1))))
        return x + self.fuse(torch.cat(feats, dim=1))


class FeatureNet(nn.Module):
    """Residual-dense feature extractor with a global input projection.

    `blocks` dense blocks of `layers` convolutions at `channels` width feed a
    global fusion stage; the trunk output is added to a 1x1 projection of the
    input, so zeroing the trunk leaves exactly that projection.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        blocks: int = 4,
        layers: int = 4,
        channels: int = 32,
    ):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.head = _conv(in_channels, channels, 3)
        self.blocks = nn.ModuleList(_DenseBlock(channels, layers) for _ in range(blocks))
        self.fuse = _conv(channels * blocks, channels, 1)
        self.post = _conv(channels, channels, 3)
        self.tail = _conv(channels, out_channels, 3)
        self.skip = _conv(in_channels, out_channels, 1)

    def reset_parameters(
        self,
        gen: torch.Generator,
        skip_matrix: torch.Tensor | None = None,
        output: str = "zero",
    ) -> None:
        """Seeded init. The tail convolution is zeroed by default so the net
        starts as its skip projection; `skip_matrix` (out x in) fixes the
        projection to a structured prior instead of a random one."""
        for module in self.modules():
            if isinstance(module, nn.Conv2d) and module not in (self.tail, self.skip):
                _init_conv(module, gen)
        _init_conv(self.tail, gen, zero=(output == "zero"))
        if skip_matrix is None:
            _init_conv(self.skip, gen)
        else:
            if tuple(skip_matrix.shape) != (self.out_channels, self.in_channels):
                raise InvalidInputError("skip matrix must be out_channels x in_channels")
            with torch.no_grad():
                self.skip.weight.copy_(skip_matrix.to(DTYPE).view(*skip_matrix.shape, 1, 1))
                self.skip.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 3 or x.shape[2] != self.in_channels:
            raise InvalidInputError(
                f"feature net expects HxWx{self.in_channels}, got shape {tuple(x.shape)}"
            )
        planes = x.permute(2, 0, 1).unsqueeze(0)
        shallow = self.head(planes)
        outs = []
        y = shallow
        for block in self.blocks:
            y = block(y)
            outs.append(y)
        trunk = self.post(self.fuse(torch.cat(outs, dim=1))) + shallow
        result = self.tail(trunk) + self.skip(planes)
        return result.squeeze(0).permute(1, 2, 0)


def extract_features(net: FeatureNet, data: torch.Tensor) -> torch.Tensor:
    """Run a feature network on an H x W x C_in tensor."""
    return net(data)


class ParamSet:
    """Flat, name-addressable view over a model's learnable parameters.

    Backs the optimizer and the finite-difference harness: parameters can be
    flattened to (and restored from) a single float64 vector, and individual
    entries can be perturbed in place.
    """

    def __init__(self, named_params: dict[str, nn.Parameter]):
        names = list(named_params)
        if len(set(names)) != len(names):
            raise InvalidInputError("parameter names must be unique")
        self._params = dict(named_params)
        self._order = names
        self.spans: dict[str, tuple[int, int]] = {}
        offset = 0
        for name in names:
            n = self._params[name].numel()
            self.spans[name] = (offset, n)
            offset += n
        self.size = offset

    @property
    def names(self) -> list[str]:
        return list(self._order)

    def tensor(self, name: str) -> nn.Parameter:
        return self._params[name]

    def flatten(self) -> np.ndarray:
        chunks = [self._params[n].detach().numpy().ravel() for n in self._order]
        return np.concatenate(chunks) if chunks else np.zeros(0)

    def unflatten(self, vector: np.ndarray) -> None:
        if vector.shape != (self.size,):
            raise InvalidInputError(f"expected a vector of length {self.size}")
        with torch.no_grad():
            for name in self._order:
                off, n = self.spans[name]
                p = self._params[name]
                p.copy_(torch.from_numpy(np.ascontiguousarray(vector[off : off + n])).view(p.shape))

    def grad_vector(self) -> np.ndarray:
        chunks = []
        for name in self._order:
            p = self._params[name]
            if p.grad is None:
                chunks.append(np.zeros(p.numel()))
            else:
                chunks.append(p.grad.detach().numpy().ravel())
        return np.concatenate(chunks) if chunks else np.zeros(0)

    def zero_grads(self) -> None:
        for p in self._params.values():
            if p.grad is not None:
                p.grad = None

    def add_to_entry(self, name: str, index: int, delta: float) -> None:
        with torch.no_grad():
            flat = self._params[name].view(-1)
            flat[index] += delta

    def get_entry(self, name: str, index: int) -> float:
        return float(self._params[name].detach().view(-1)[index])


def save_archive(path, arrays: dict[str, np.ndarray], header: dict) -> None:
    """Write named float64 arrays plus a JSON header as an ``.npz`` archive."""
    payload = {name: np.asarray(arr, dtype=np.float64) for name, arr in arrays.items()}
    payload["__header__"] = np.array(json.dumps(header, sort_keys=True))
    np.savez(Path(path), **payload)


def load_archive(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read an archive written by :func:`save_archive`."""
    with np.load(Path(path), allow_pickle=False) as blob:
        header = json.loads(str(blob["__header__"][()]))
        arrays = {name: blob[name] for name in blob.files if name != "__header__"}
    return arrays, header
