"""Token-attention recalibration, count regression and density decoding.

TAM gates each channel of the patch feature map with a sigmoid weight
computed from the context feature F_c, on top of a skip connection. RTM
regresses the image count from F_c and only feeds the training loss. The
decoder upsamples features to a nonnegative single-channel density map.
"""

import math

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .losses import DensityMap
from .nn import Conv2d, ConvTranspose2d, Mlp
from .tensor import Module, Tensor, relu, reshape, sigmoid


@dataclass(frozen=True)
class HeadsConfig:
    tam: bool = True
    rtm: bool = True
    reduction: int = 4
    output_stride: int = 4
    decoder_width: int = 32
    final_bias: float = 0.1

    def __post_init__(self):
        if self.reduction < 1:
            raise ConfigError("TAM reduction ratio must be >= 1")
        if self.output_stride < 1:
            raise ConfigError("output stride must be >= 1")

    def upsample_stages(self, token_stride: int) -> int:
        ratio = token_stride / self.output_stride
        stages = int(round(math.log2(ratio))) if ratio >= 1 else -1
        if stages < 0 or 2 ** stages != ratio:
            raise ConfigError(
                f"output stride {self.output_stride} must divide the token stride {token_stride} "
                "by a power of two")
        return stages


class TokenAttention(Module):
    """Gate MLP (d -> d/r -> d, ReLU) plus the 3x3 convolution preparing F_p'."""

    def __init__(self, d: int, reduction: int, rng: np.random.Generator):
        self.gate_mlp = Mlp(d, max(1, d // reduction), d, rng, activation="relu")
        self.conv = Conv2d(d, d, 3, rng, stride=1, padding=1)
        self.d = d

    def forward(self, patches: Tensor, context: Tensor) -> Tensor:
        return tam_recalibrate(self, patches, tam_gate(self, context))


def tam_gate(tam: TokenAttention, context: Tensor) -> Tensor:
    """F_c' = sigmoid(MLP(F_c)), every component in (0, 1)."""

    return sigmoid(tam.gate_mlp(context))


def tam_recalibrate(tam: TokenAttention, patches: Tensor, gate: Tensor) -> Tensor:
    """F_f = F_p + conv(F_p) * gate, broadcast over spatial positions."""

    d = patches.shape[0]
    if gate.shape != (d,) or d != tam.d:
        raise ShapeError(f"gate {gate.shape} does not match {d} feature channels")
    return patches + tam.conv(patches) * reshape(gate, (d, 1, 1))


class RegressionToken(Module):
    """Two-layer ReLU MLP regressing the count from F_c."""

    def __init__(self, d: int, rng: np.random.Generator, hidden: int = 0):
        self.mlp = Mlp(d, hidden or d, 1, rng, activation="relu")

    def forward(self, context: Tensor) -> Tensor:
        return rtm_predict(self, context)


def rtm_predict(rtm: RegressionToken, context: Tensor) -> Tensor:
    return reshape(rtm.mlp(context), ())


class Decoder(Module):
    """Stride-2 transposed convolutions followed by a ReLU-gated 1x1 convolution."""

    def __init__(self, d: int, cfg: HeadsConfig, stages: int, rng: np.random.Generator):
        self.ups = []
        width = d
        for _ in range(stages):
            self.ups.append(ConvTranspose2d(width, cfg.decoder_width, 4, rng, stride=2, padding=1))
            width = cfg.decoder_width
        self.out = Conv2d(width, 1, 1, rng)
        self.out.bias.data[:] = cfg.final_bias
        self.cell_size = cfg.output_stride

    def forward(self, features: Tensor) -> DensityMap:
        return decode_density(self, features)


def decode_density(decoder: Decoder, features: Tensor) -> DensityMap:
    """[d, h2, w2] features -> nonnegative [h_d, w_d] density map."""

    x = features
    for up in decoder.ups:
        x = relu(up(x))
    density = relu(decoder.out(x))
    return DensityMap(reshape(density, density.shape[1:]), decoder.cell_size)
