"""Main transformer with an appended context token."""

import logging

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import EncoderLayer, trunc_normal
from .tensor import Module, Parameter, Tensor, concat, matmul, reshape

logger = logging.getLogger(__name__)

FULL_DEPTH = 14
FULL_TAPS = (5, 8, 11)


def default_taps(layers: int) -> Tuple[int, ...]:
    """Tap layers scaled from the 14-layer placement to ``layers``."""

    if layers == FULL_DEPTH:
        return FULL_TAPS
    if layers < 2:
        return ()
    return tuple(sorted({min(layers - 1, max(1, round(layers * t / FULL_DEPTH))) for t in FULL_TAPS}))


@dataclass(frozen=True)
class BackboneConfig:
    d: int = 64
    layers: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    tap_layers: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError(f"backbone width {self.d} is not divisible by {self.heads} heads")
        if self.layers < 0:
            raise ConfigError("backbone layer count must be >= 0")
        for t in self.taps:
            if not 1 <= t <= self.layers:
                raise ConfigError(f"tap layer {t} outside [1, {self.layers}]")

    @property
    def taps(self) -> Tuple[int, ...]:
        return default_taps(self.layers) if self.tap_layers is None else tuple(self.tap_layers)


@dataclass
class Encoded:
    patches: Tensor
    context: Tensor
    taps: Dict[int, Tensor]


def interpolation_matrix(src: Tuple[int, int], dst: Tuple[int, int]) -> np.ndarray:
    """Bilinear resampling of a row-major src grid onto dst, as a [dst_n, src_n] matrix."""

    def axis_weights(n_src, n_dst):
        m = np.zeros((n_dst, n_src))
        if n_src == 1:
            m[:, 0] = 1.0
            return m
        # align_corners=False sampling positions
        pos = np.clip((np.arange(n_dst) + 0.5) * n_src / n_dst - 0.5, 0, n_src - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_src - 1)
        frac = pos - lo
        m[np.arange(n_dst), lo] += 1.0 - frac
        m[np.arange(n_dst), hi] += frac
        return m

    return np.kron(axis_weights(src[0], dst[0]), axis_weights(src[1], dst[1]))


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, grid: Tuple[int, int], rng: np.random.Generator):
        """Builds the encoder for a fixed training token grid.

        Args:
            cfg: Width, depth, heads and tap layers
            grid: (h2, w2) token grid the position embedding is learned for
            rng: Initialisation generator
        """

        self.cfg = cfg
        self.grid = tuple(grid)
        n = grid[0] * grid[1]
        self.context_token = Parameter(trunc_normal(rng, (cfg.d,)))
        self.pos_embed = Parameter(trunc_normal(rng, (n + 1, cfg.d)))
        self.layers = [EncoderLayer(cfg.d, cfg.heads, cfg.mlp_ratio, rng) for _ in range(cfg.layers)]
        self.warned_grids = set()

    def position_embedding(self, grid: Tuple[int, int]) -> Tensor:
        if tuple(grid) == self.grid:
            return self.pos_embed
        if tuple(grid) not in self.warned_grids:
            self.warned_grids.add(tuple(grid))
            logger.warning("token grid %s differs from training grid %s; interpolating position embedding",
                           grid, self.grid)
        n = self.grid[0] * self.grid[1]
        resample = interpolation_matrix(self.grid, grid)
        patch_rows = matmul(Tensor(resample), self.pos_embed[:n])
        return concat([patch_rows, self.pos_embed[n:]], axis=0)

    def forward(self, tokens, grid: Tuple[int, int]) -> Encoded:
        return encode(self, tokens, grid)


def append_context(tokens: Tensor, context_token: Tensor, pos_embed: Tensor) -> Tensor:
    """T0 = [T; t_con] + E, context token last."""

    n, d = tokens.shape
    if pos_embed.shape != (n + 1, d):
        raise ShapeError(f"position embedding {pos_embed.shape} does not fit {n} tokens of width {d}")
    return concat([tokens, reshape(context_token, (1, d))], axis=0) + pos_embed


def encoder_layer(layer: EncoderLayer, x: Tensor) -> Tensor:
    return layer(x)


def encode(backbone: Backbone, tokens: Tensor, grid: Tuple[int, int]) -> Encoded:
    """Runs all layers; returns F_p [N, d], F_c [d] and patch-token taps."""

    n = tokens.shape[0]
    if n != grid[0] * grid[1]:
        raise ShapeError(f"{n} tokens do not fill grid {grid}")
    x = append_context(tokens, backbone.context_token, backbone.position_embedding(grid))
    taps = {}
    wanted = set(backbone.cfg.taps)
    for index, layer in enumerate(backbone.layers, start=1):
        x = encoder_layer(layer, x)
        if index in wanted:
            taps[index] = x[:n]
    return Encoded(patches=x[:n], context=x[n], taps=taps)
