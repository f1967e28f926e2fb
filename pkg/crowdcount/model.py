"""The assembled counting network.

tokenizer -> backbone -> (TAM) -> decoder gives the main density map; RTM
regresses a count from the context feature and one auxiliary decoder per
tapped layer supervises intermediate patch features. Parameter names are
prefixed ``tokenizer.``, ``backbone.``, ``tam.``, ``rtm.``, ``decoder.``
and ``aux<layer>.`` (e.g. ``aux1.out.weight``).
"""

from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from .backbone import Backbone, BackboneConfig
from .errors import ConfigError
from .heads import (Decoder, HeadsConfig, RegressionToken, TokenAttention, decode_density, rtm_predict,
                    tam_gate, tam_recalibrate)
from .losses import DensityMap
from .tensor import Module, Tensor, as_tensor, no_grad, reshape, transpose
from .tokenizer import Tokenizer, TokenizerConfig

ABLATIONS = {
    "baseline": (False, False),
    "tam": (True, False),
    "tam+rtm": (True, True),
}


@dataclass(frozen=True)
class ModelConfig:
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    heads: HeadsConfig = field(default_factory=HeadsConfig)
    image_h: int = 64
    image_w: int = 64

    def __post_init__(self):
        if self.tokenizer.final_dim != self.backbone.d:
            raise ConfigError(f"tokenizer width {self.tokenizer.final_dim} must equal backbone "
                              f"width {self.backbone.d}")
        grid = self.token_grid
        if (grid[0] * self.token_stride, grid[1] * self.token_stride) != (self.image_h, self.image_w):
            raise ConfigError(f"image {self.image_h}x{self.image_w} does not tile into the "
                              f"{grid[0]}x{grid[1]} token grid")
        self.heads.upsample_stages(self.token_stride)

    @property
    def token_grid(self):
        return self.tokenizer.grids(self.image_h, self.image_w)[-1]

    @property
    def token_stride(self) -> int:
        return self.tokenizer.stride(self.image_h, self.image_w)

    @property
    def output_grid(self):
        s = self.heads.output_stride
        return -(-self.image_h // s), -(-self.image_w // s)

    def with_ablation(self, name: str) -> "ModelConfig":
        if name not in ABLATIONS:
            raise ConfigError(f"unknown ablation {name!r}; choose from {', '.join(ABLATIONS)}")
        tam, rtm = ABLATIONS[name]
        return replace(self, heads=replace(self.heads, tam=tam, rtm=rtm))


@dataclass
class Prediction:
    density: DensityMap
    aux: List[DensityMap] = field(default_factory=list)
    count: Optional[Tensor] = None
    gate: Optional[Tensor] = None


def _as_feature_map(tokens: Tensor, grid) -> Tensor:
    """[N, d] patch tokens -> [d, h2, w2]."""

    return reshape(transpose(tokens), (tokens.shape[1], grid[0], grid[1]))


class CrowdCounter(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        """Builds every submodule from one seeded generator, in a fixed order.

        Args:
            cfg: Architecture configuration
            seed: Initialisation seed
        """

        rng = np.random.default_rng(seed)
        self.cfg = cfg
        d = cfg.backbone.d
        stages = cfg.heads.upsample_stages(cfg.token_stride)
        self.tokenizer = Tokenizer(cfg.tokenizer, rng)
        self.backbone = Backbone(cfg.backbone, cfg.token_grid, rng)
        self.tam = TokenAttention(d, cfg.heads.reduction, rng) if cfg.heads.tam else None
        self.rtm = RegressionToken(d, rng) if cfg.heads.rtm else None
        self.decoder = Decoder(d, cfg.heads, stages, rng)
        for tap in cfg.backbone.taps:
            setattr(self, f"aux{tap}", Decoder(d, cfg.heads, stages, rng))
        self.assign_names()

    def forward(self, image, with_aux: bool = True, bypass_tam: bool = False) -> Prediction:
        """Runs the network on a [3, h, w] image.

        Args:
            image: Image array or Tensor
            with_aux: Also produce RTM count and auxiliary density maps (training only)
            bypass_tam: Decode F_p directly even when TAM exists

        Returns:
            Prediction with the main density map and, if requested, the training-only outputs
        """

        image = as_tensor(image)
        tokens = self.tokenizer(image)
        grid = (tokens.grid_h, tokens.grid_w)
        encoded = self.backbone(tokens.tokens, grid)
        features = _as_feature_map(encoded.patches, grid)

        gate = None
        if self.tam is not None and not bypass_tam:
            gate = tam_gate(self.tam, encoded.context)
            features = tam_recalibrate(self.tam, features, gate)
        prediction = Prediction(decode_density(self.decoder, features), gate=gate)
        if not with_aux:
            return prediction
        if self.rtm is not None:
            prediction.count = rtm_predict(self.rtm, encoded.context)
        for tap, tap_tokens in sorted(encoded.taps.items()):
            prediction.aux.append(decode_density(self.aux_decoder(tap), _as_feature_map(tap_tokens, grid)))
        return prediction

    def aux_decoder(self, tap: int) -> Decoder:
        return getattr(self, f"aux{tap}")

    def count(self, image) -> float:
        """Inference count: the sum over the main density map."""

        with no_grad():
            return self(image, with_aux=False).density.count

    def parameter_names(self) -> List[str]:
        return [name for name, _ in self.named_parameters()]
