"""Overlapping split and the tokens-reduction pipeline.

An image is cut into overlapping k x k windows (stride s < k). Two
reduction stages each run one single-head transformer layer, fold the
tokens back into their grid and split again, shrinking the grid while the
receptive field of every token grows. The last split is projected to the
backbone width, giving the fixed-length sequence T.
"""

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import Attention, LayerNorm, Linear, Mlp
from .tensor import Module, Tensor, reshape, transpose, unfold, window_grid


@dataclass(frozen=True)
class SplitSpec:
    k: int
    s: int
    p: int

    def __post_init__(self):
        if self.k < 1 or self.s < 1:
            raise ConfigError(f"split window and stride must be >= 1, got k={self.k} s={self.s}")
        if self.s >= self.k:
            raise ConfigError(f"split stride must be smaller than the window (s={self.s}, k={self.k})")
        if self.p < 0:
            raise ConfigError(f"split padding must be >= 0, got {self.p}")

    def grid(self, h: int, w: int) -> Tuple[int, int]:
        return window_grid(h, w, self.k, self.s, self.p)


DEFAULT_STAGES = (SplitSpec(7, 4, 3), SplitSpec(3, 2, 1), SplitSpec(3, 2, 1))


@dataclass(frozen=True)
class TokenizerConfig:
    stage_specs: Tuple[SplitSpec, ...] = DEFAULT_STAGES
    reduction_dim: int = 64
    final_dim: int = 64
    in_channels: int = 3

    def __post_init__(self):
        if len(self.stage_specs) != 3:
            raise ConfigError(f"tokenizer needs exactly 3 split stages, got {len(self.stage_specs)}")
        if self.reduction_dim < 1 or self.final_dim < 1:
            raise ConfigError("tokenizer dimensions must be positive")

    def grids(self, h: int, w: int) -> List[Tuple[int, int]]:
        """Grid shape after each split stage; raises naming the stage that collapses."""

        shapes = []
        for index, spec in enumerate(self.stage_specs):
            try:
                h, w = spec.grid(h, w)
            except ShapeError as e:
                raise ShapeError(f"split stage {index} collapses the grid: {e}") from e
            shapes.append((h, w))
        return shapes

    def sequence_length(self, h: int, w: int) -> int:
        gh, gw = self.grids(h, w)[-1]
        return gh * gw

    def stride(self, h: int, w: int) -> int:
        """Total downsampling factor from pixels to the final token grid."""

        return h // self.grids(h, w)[-1][0]


@dataclass
class TokenGrid:
    tokens: Tensor
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.tokens.ndim != 2 or self.tokens.shape[0] != self.grid_h * self.grid_w:
            raise ShapeError(
                f"token grid {self.grid_h}x{self.grid_w} does not match tokens {self.tokens.shape}")

    @property
    def n(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def to_image(self) -> Tensor:
        """Tokens as a channel-first [dim, grid_h, grid_w] map."""

        return reshape(transpose(self.tokens), (self.dim, self.grid_h, self.grid_w))


def overlapping_split(x: Tensor, spec: SplitSpec) -> TokenGrid:
    gh, gw = spec.grid(x.shape[1], x.shape[2])
    return TokenGrid(unfold(x, spec.k, spec.s, spec.p), gh, gw)


class ReductionLayer(Module):
    """One single-head transformer layer mapping in_dim tokens to out_dim.

    The value projection doubles as the residual path because input and
    output widths differ.
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, mlp_ratio: float = 1.0):
        self.norm1 = LayerNorm(in_dim)
        self.attn = Attention(in_dim, 1, rng, out_dim=out_dim)
        self.norm2 = LayerNorm(out_dim)
        self.mlp = Mlp(out_dim, max(1, int(round(out_dim * mlp_ratio))), out_dim, rng)
        self.in_dim = in_dim

    def forward(self, z: TokenGrid) -> TokenGrid:
        if z.dim != self.in_dim:
            raise ShapeError(f"reduction layer expects token dim {self.in_dim}, got {z.dim}")
        out, _, v = self.attn.attend(self.norm1(z.tokens))
        x = v + out
        x = x + self.mlp(self.norm2(x))
        return TokenGrid(x, z.grid_h, z.grid_w)


class Tokenizer(Module):
    def __init__(self, cfg: TokenizerConfig, rng: np.random.Generator):
        self.cfg = cfg
        s0, s1, s2 = cfg.stage_specs
        c, d = cfg.in_channels, cfg.reduction_dim
        self.reduce0 = ReductionLayer(c * s0.k * s0.k, d, rng)
        self.reduce1 = ReductionLayer(d * s1.k * s1.k, d, rng)
        self.project = Linear(d * s2.k * s2.k, cfg.final_dim, rng)

    def forward(self, image: Tensor) -> TokenGrid:
        return tokens_reduction(image, self)


def tokens_reduction(image: Tensor, tokenizer: Tokenizer) -> TokenGrid:
    """split -> reduce -> split -> reduce -> split -> project; returns T with N = h2 * w2."""

    cfg = tokenizer.cfg
    cfg.grids(image.shape[1], image.shape[2])
    s0, s1, s2 = cfg.stage_specs
    z = tokenizer.reduce0(overlapping_split(image, s0))
    z = tokenizer.reduce1(overlapping_split(z.to_image(), s1))
    z = overlapping_split(z.to_image(), s2)
    return TokenGrid(tokenizer.project(z.tokens), z.grid_h, z.grid_w)
