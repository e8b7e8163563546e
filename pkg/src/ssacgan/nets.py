"""Generators, patch discriminators and the paired discriminator.

Layer tables (``ngf``/``ndf`` default to 32):

Generator::

    reflect-pad 3, conv7x7 1->ngf, IN, relu
    conv3x3/2 ngf->2ngf, IN, relu ; conv3x3/2 2ngf->4ngf, IN, relu
    n_res x [conv3x3 4ngf->4ngf, IN, relu, conv3x3, IN] + skip
    convT3x3/2 4ngf->2ngf, IN, relu ; convT3x3/2 2ngf->ngf, IN, relu
    reflect-pad 3, conv7x7 ngf->1, tanh

PatchDiscriminator::

    conv4x4/2 1->ndf, lrelu ; conv4x4/2 ndf->2ndf, IN, lrelu ;
    conv4x4/2 2ndf->4ndf, IN, lrelu          <- shared features
    conv3x3/1 4ndf->1                         <- patch map

PairedDiscriminator (input: D_X features ++ D_Y features)::

    conv4x4/2 8ndf->4ndf, IN, lrelu ; conv4x4/2 4ndf->4ndf, IN, lrelu ; conv3x3/1 ->1
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Iterator, List, Tuple

import numpy as np

from . import functional as fn
from .optim import Rng, glorot_init
from .tensor import DTYPE, Tensor, concat, leaky_relu, no_grad, relu, tanh

LEAK = 0.2


@dataclass(frozen=True)
class ArchConfig:
    ngf: int = 32
    ndf: int = 32
    n_res: int = 6

    def to_dict(self) -> dict:
        return asdict(self)


class Module:
    """Parameter bookkeeping shared by every layer and network."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=DTYPE)
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name!r}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Conv(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: Rng, stride: int = 1,
                 padding: int = 0, pad_mode: str = "zeros"):
        self.weight = glorot_init((cout, cin, kernel, kernel), rng)
        self.bias = Tensor(np.zeros(cout, dtype=DTYPE), requires_grad=True)
        self.stride = stride
        self.padding = padding
        self.pad_mode = pad_mode

    def __call__(self, x: Tensor) -> Tensor:
        if self.pad_mode == "reflect":
            x = fn.pad2d(x, self.padding, "reflect")
            return fn.conv2d(x, self.weight, self.bias, self.stride, 0)
        return fn.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose(Module):
    """Stride-2 upsampling that exactly doubles the spatial dims."""

    def __init__(self, cin: int, cout: int, rng: Rng, kernel: int = 3, stride: int = 2):
        self.weight = glorot_init((cin, cout, kernel, kernel), rng)
        self.bias = Tensor(np.zeros(cout, dtype=DTYPE), requires_grad=True)
        self.stride = stride
        self.padding = (kernel - 1) // 2
        self.output_padding = stride - 1

    def __call__(self, x: Tensor) -> Tensor:
        return fn.conv_transpose2d(x, self.weight, self.bias, self.stride,
                                   self.padding, self.output_padding)


class ResidualBlock(Module):
    def __init__(self, channels: int, rng: Rng):
        self.conv1 = Conv(channels, channels, 3, rng.child("conv1"), padding=1)
        self.conv2 = Conv(channels, channels, 3, rng.child("conv2"), padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        h = relu(fn.instance_norm(self.conv1(x)))
        return x + fn.instance_norm(self.conv2(h))


class Generator(Module):
    def __init__(self, rng: Rng, ngf: int = 32, n_res: int = 6, channels: int = 1):
        self.front = Conv(channels, ngf, 7, rng.child("front"), padding=3, pad_mode="reflect")
        self.down = [
            Conv(ngf, 2 * ngf, 3, rng.child("down0"), stride=2, padding=1),
            Conv(2 * ngf, 4 * ngf, 3, rng.child("down1"), stride=2, padding=1),
        ]
        self.core = [ResidualBlock(4 * ngf, rng.child(f"res{i}")) for i in range(n_res)]
        self.up = [
            ConvTranspose(4 * ngf, 2 * ngf, rng.child("up0")),
            ConvTranspose(2 * ngf, ngf, rng.child("up1")),
        ]
        self.head = Conv(ngf, channels, 7, rng.child("head"), padding=3, pad_mode="reflect")

    def __call__(self, image: Tensor) -> Tensor:
        return generator_forward(self, image)


def generator_forward(net: Generator, image: Tensor) -> Tensor:
    """Translate ``image[N,1,H,W]`` to the other domain; H and W must divide by 4."""
    h, w = image.shape[2:]
    if h % 4 or w % 4:
        raise ValueError(f"generator input dims must be divisible by 4, got {h}x{w}")
    x = relu(fn.instance_norm(net.front(image)))
    for layer in net.down:
        x = relu(fn.instance_norm(layer(x)))
    for block in net.core:
        x = block(x)
    for layer in net.up:
        x = relu(fn.instance_norm(layer(x)))
    return tanh(net.head(x))


class PatchDiscriminator(Module):
    n_down = 3

    def __init__(self, rng: Rng, ndf: int = 32, channels: int = 1):
        widths = [channels, ndf, 2 * ndf, 4 * ndf]
        self.trunk_layers = [
            Conv(widths[i], widths[i + 1], 4, rng.child(f"trunk{i}"), stride=2, padding=1)
            for i in range(self.n_down)
        ]
        self.head = Conv(4 * ndf, 1, 3, rng.child("head"), padding=1)

    @property
    def feature_channels(self) -> int:
        return self.head.weight.shape[1]

    def trunk_parameters(self) -> List[Tensor]:
        return [p for layer in self.trunk_layers for p in layer.parameters()]

    def trunk(self, image: Tensor) -> Tensor:
        """Second-last-layer feature map (the input to the patch head)."""
        min_size = 2 ** self.n_down
        h, w = image.shape[2:]
        if h < min_size or w < min_size or h % min_size or w % min_size:
            raise ValueError(f"discriminator input must be a multiple of {min_size} pixels, got {h}x{w}")
        x = image
        for i, layer in enumerate(self.trunk_layers):
            x = layer(x)
            if i > 0:
                x = fn.instance_norm(x)
            x = leaky_relu(x, LEAK)
        return x

    def __call__(self, image: Tensor) -> Tuple[Tensor, Tensor]:
        return discriminator_forward(self, image)


def discriminator_forward(net: PatchDiscriminator, image: Tensor) -> Tuple[Tensor, Tensor]:
    features = net.trunk(image)
    return net.head(features), features


class PairedDiscriminator(Module):
    def __init__(self, rng: Rng, feature_channels: int = 128):
        width = feature_channels
        self.blocks = [
            Conv(2 * feature_channels, width, 4, rng.child("block0"), stride=2, padding=1),
            Conv(width, width, 4, rng.child("block1"), stride=2, padding=1),
        ]
        self.head = Conv(width, 1, 3, rng.child("head"), padding=1)

    def __call__(self, dx_features: Tensor, dy_features: Tensor) -> Tensor:
        return paired_forward(self, dx_features, dy_features)


def paired_forward(net: PairedDiscriminator, dx_features: Tensor, dy_features: Tensor) -> Tensor:
    if dx_features.shape != dy_features.shape:
        raise ValueError(f"paired inputs differ in shape: {dx_features.shape} vs {dy_features.shape}")
    h, w = dx_features.shape[2:]
    if h < 4 or w < 4 or h % 4 or w % 4:
        raise ValueError(f"paired discriminator needs feature maps divisible by 4, got {h}x{w}")
    x = concat([dx_features, dy_features], axis=1)
    for block in net.blocks:
        x = leaky_relu(fn.instance_norm(block(x)), LEAK)
    return net.head(x)


NETWORK_NAMES = ("G", "F", "D_X", "D_Y", "D_pair")


class ModelBundle(Module):
    """G: X->Y, F: Y->X, D_X, D_Y and D_pair sharing the D_X/D_Y trunks."""

    def __init__(self, seed: int, arch: ArchConfig = ArchConfig()):
        root = Rng(seed).child("init")
        self.arch = arch
        self.G = Generator(root.child("G"), arch.ngf, arch.n_res)
        self.F = Generator(root.child("F"), arch.ngf, arch.n_res)
        self.D_X = PatchDiscriminator(root.child("D_X"), arch.ndf)
        self.D_Y = PatchDiscriminator(root.child("D_Y"), arch.ndf)
        self.D_pair = PairedDiscriminator(root.child("D_pair"), self.D_X.feature_channels)

    def network(self, name: str) -> Module:
        return getattr(self, name)

    def pair_score(self, x: Tensor, y: Tensor) -> Tensor:
        """D_pair on raw images, routed through the D_X and D_Y trunks."""
        return self.D_pair(self.D_X.trunk(x), self.D_Y.trunk(y))

    def translate(self, images: np.ndarray, direction: str, batch: int = 8) -> np.ndarray:
        """Apply G (``"x2y"``) or F (``"y2x"``) to a stack of 2-D slices."""
        net = {"x2y": self.G, "y2x": self.F}[direction]
        stack = np.asarray(images, dtype=DTYPE)
        out = np.empty_like(stack)
        with no_grad():
            for start in range(0, len(stack), batch):
                chunk = stack[start:start + batch, None]
                out[start:start + batch] = net(Tensor(chunk)).data[:, 0]
        return out
