import io
import logging
import os

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import questionary

from dotenv import dotenv_values

from .backbone import BackboneConfig
from .errors import ConfigError
from .format_utils import themed
from .heads import HeadsConfig
from .losses import LossWeights, SinkhornConfig
from .model import ABLATIONS, ModelConfig
from .optim import AdamState
from .synth import AugmentConfig, SceneConfig
from .tokenizer import SplitSpec, TokenizerConfig

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_FILE = "crowdcount.conf"

DEFAULTS = {
    "PRESET": "desk",
    "IMAGE_H": "64",
    "IMAGE_W": "64",
    "STAGE_SPECS": "7,4,3;3,2,1;3,2,1",
    "REDUCTION_DIM": "64",
    "EMBED_DIM": "64",
    "LAYERS": "4",
    "HEADS": "4",
    "MLP_RATIO": "2.0",
    "TAP_LAYERS": "",
    "TAM": "true",
    "RTM": "true",
    "TAM_REDUCTION": "4",
    "OUTPUT_STRIDE": "4",
    "DECODER_WIDTH": "32",
    "FINAL_BIAS": "0.1",
    "LAMBDA_RTM": "0.1",
    "LAMBDA_OT": "0.1",
    "LAMBDA_TV": "0.01",
    "AUX_WEIGHT": "1.0",
    "TV_SCALE_BY_COUNT": "true",
    "SINKHORN_EPSILON": "0.01",
    "SINKHORN_ITERS": "200",
    "SINKHORN_TOL": "1e-07",
    "SCENE_H": "80",
    "SCENE_W": "80",
    "CROP_H": "64",
    "CROP_W": "64",
    "HFLIP_PROB": "0.5",
    "COUNT_MIN": "5",
    "COUNT_MAX": "60",
    "SIZE_GRADIENT": "0.5",
    "BASE_SIZE": "4.0",
    "LR": "0.0002",
    "WEIGHT_DECAY": "0.0001",
    "BETA1": "0.9",
    "BETA2": "0.999",
    "ADAM_EPS": "1e-08",
    "EPOCHS": "100",
    "BATCH_SIZE": "4",
    "SEED": "0",
    "CHECKPOINT_EVERY": "10",
    "EVAL_WORKERS": "2",
    "RUN_DIR": "runs/latest",
}

# Keys each preset overrides on top of DEFAULTS
PRESETS = {
    "desk": {},
    "full": {
        "EMBED_DIM": "384",
        "LAYERS": "14",
        "HEADS": "6",
        "MLP_RATIO": "3.0",
        "TAP_LAYERS": "5,8,11",
        "LR": "1e-05",
    },
}


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 2e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("learning rate must be > 0 and weight decay >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")

    def adam_state(self) -> AdamState:
        return AdamState(lr=self.lr, weight_decay=self.weight_decay, beta1=self.beta1,
                         beta2=self.beta2, eps=self.eps)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    preset: str = "desk"
    epochs: int = 100
    batch_size: int = 4
    seed: int = 0
    checkpoint_every: int = 10
    eval_workers: int = 2
    run_dir: str = "runs/latest"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.checkpoint_every < 1 or self.eval_workers < 1:
            raise ConfigError("epochs must be >= 0; batch size, checkpoint cadence and workers >= 1")
        if (self.augment.crop_h, self.augment.crop_w) != (self.model.image_h, self.model.image_w):
            raise ConfigError(f"crop {self.augment.crop_h}x{self.augment.crop_w} must equal the model "
                              f"input size {self.model.image_h}x{self.model.image_w}")
        if self.augment.crop_h > self.scene.image_h or self.augment.crop_w > self.scene.image_w:
            raise ConfigError(f"crop {self.augment.crop_h}x{self.augment.crop_w} does not fit the "
                              f"{self.scene.image_h}x{self.scene.image_w} scenes")

    def to_flat(self) -> Dict[str, str]:
        m = self.model
        taps = m.backbone.tap_layers
        return {
            "PRESET": self.preset,
            "IMAGE_H": str(m.image_h),
            "IMAGE_W": str(m.image_w),
            "STAGE_SPECS": ";".join(f"{s.k},{s.s},{s.p}" for s in m.tokenizer.stage_specs),
            "REDUCTION_DIM": str(m.tokenizer.reduction_dim),
            "EMBED_DIM": str(m.backbone.d),
            "LAYERS": str(m.backbone.layers),
            "HEADS": str(m.backbone.heads),
            "MLP_RATIO": repr(m.backbone.mlp_ratio),
            "TAP_LAYERS": "" if taps is None else (",".join(map(str, taps)) or "none"),
            "TAM": _format_bool(m.heads.tam),
            "RTM": _format_bool(m.heads.rtm),
            "TAM_REDUCTION": str(m.heads.reduction),
            "OUTPUT_STRIDE": str(m.heads.output_stride),
            "DECODER_WIDTH": str(m.heads.decoder_width),
            "FINAL_BIAS": repr(m.heads.final_bias),
            "LAMBDA_RTM": repr(self.losses.rtm),
            "LAMBDA_OT": repr(self.losses.ot),
            "LAMBDA_TV": repr(self.losses.tv),
            "AUX_WEIGHT": repr(self.losses.aux),
            "TV_SCALE_BY_COUNT": _format_bool(self.losses.tv_scale_by_count),
            "SINKHORN_EPSILON": repr(self.sinkhorn.epsilon),
            "SINKHORN_ITERS": str(self.sinkhorn.max_iters),
            "SINKHORN_TOL": repr(self.sinkhorn.tol),
            "SCENE_H": str(self.scene.image_h),
            "SCENE_W": str(self.scene.image_w),
            "CROP_H": str(self.augment.crop_h),
            "CROP_W": str(self.augment.crop_w),
            "HFLIP_PROB": repr(self.augment.hflip_prob),
            "COUNT_MIN": str(self.scene.count_range[0]),
            "COUNT_MAX": str(self.scene.count_range[1]),
            "SIZE_GRADIENT": repr(self.scene.size_gradient),
            "BASE_SIZE": repr(self.scene.base_size),
            "LR": repr(self.optim.lr),
            "WEIGHT_DECAY": repr(self.optim.weight_decay),
            "BETA1": repr(self.optim.beta1),
            "BETA2": repr(self.optim.beta2),
            "ADAM_EPS": repr(self.optim.eps),
            "EPOCHS": str(self.epochs),
            "BATCH_SIZE": str(self.batch_size),
            "SEED": str(self.seed),
            "CHECKPOINT_EVERY": str(self.checkpoint_every),
            "EVAL_WORKERS": str(self.eval_workers),
            "RUN_DIR": self.run_dir,
        }

    def to_text(self) -> str:
        return "".join(f"{key}={value}\n" for key, value in self.to_flat().items())

    def with_overrides(self, **flat) -> "RunConfig":
        values = self.to_flat()
        values.update({key: str(value) for key, value in flat.items()})
        return build_run_config(values)


# --- value parsers ---

def _format_bool(value: bool) -> str:
    return "true" if value else "false"


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_specs(text: str) -> Tuple[SplitSpec, ...]:
    specs = []
    for chunk in text.split(";"):
        k, s, p = (int(v) for v in chunk.split(","))
        specs.append(SplitSpec(k, s, p))
    return tuple(specs)


def _parse_taps(text: str) -> Optional[Tuple[int, ...]]:
    text = text.strip()
    if not text:
        return None
    if text.lower() == "none":
        return ()
    return tuple(int(v) for v in text.split(","))


def _get(flat: Dict[str, str], key: str, parse: Callable):
    try:
        return parse(flat[key])
    except KeyError:
        raise ConfigError(f"missing config key {key}")
    except ConfigError as e:
        raise ConfigError(f"{key}: {e}") from e
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key}: cannot parse {flat[key]!r} ({e})") from e


def build_run_config(flat: Dict[str, str]) -> RunConfig:
    """Typed RunConfig from a complete flat key=value mapping."""

    def g(key, parse=str):
        return _get(flat, key, parse)

    d = g("EMBED_DIM", int)
    model = ModelConfig(
        tokenizer=TokenizerConfig(stage_specs=g("STAGE_SPECS", _parse_specs),
                                  reduction_dim=g("REDUCTION_DIM", int), final_dim=d),
        backbone=BackboneConfig(d=d, layers=g("LAYERS", int), heads=g("HEADS", int),
                                mlp_ratio=g("MLP_RATIO", float), tap_layers=g("TAP_LAYERS", _parse_taps)),
        heads=HeadsConfig(tam=g("TAM", _parse_bool), rtm=g("RTM", _parse_bool),
                          reduction=g("TAM_REDUCTION", int), output_stride=g("OUTPUT_STRIDE", int),
                          decoder_width=g("DECODER_WIDTH", int), final_bias=g("FINAL_BIAS", float)),
        image_h=g("IMAGE_H", int), image_w=g("IMAGE_W", int))
    return RunConfig(
        model=model,
        losses=LossWeights(rtm=g("LAMBDA_RTM", float), ot=g("LAMBDA_OT", float), tv=g("LAMBDA_TV", float),
                           aux=g("AUX_WEIGHT", float), tv_scale_by_count=g("TV_SCALE_BY_COUNT", _parse_bool)),
        sinkhorn=SinkhornConfig(epsilon=g("SINKHORN_EPSILON", float), max_iters=g("SINKHORN_ITERS", int),
                                tol=g("SINKHORN_TOL", float)),
        augment=AugmentConfig(crop_h=g("CROP_H", int), crop_w=g("CROP_W", int),
                              hflip_prob=g("HFLIP_PROB", float)),
        scene=SceneConfig(image_h=g("SCENE_H", int), image_w=g("SCENE_W", int),
                          count_range=(g("COUNT_MIN", int), g("COUNT_MAX", int)),
                          size_gradient=g("SIZE_GRADIENT", float), base_size=g("BASE_SIZE", float)),
        optim=OptimConfig(lr=g("LR", float), weight_decay=g("WEIGHT_DECAY", float), beta1=g("BETA1", float),
                          beta2=g("BETA2", float), eps=g("ADAM_EPS", float)),
        preset=g("PRESET"),
        epochs=g("EPOCHS", int),
        batch_size=g("BATCH_SIZE", int),
        seed=g("SEED", int),
        checkpoint_every=g("CHECKPOINT_EVERY", int),
        eval_workers=g("EVAL_WORKERS", int),
        run_dir=g("RUN_DIR"),
    )


# --- layered loading ---

def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """key=value lines (``#`` comments) as a dict; unknown keys raise ConfigError."""

    values = dotenv_values(stream=io.StringIO(text), interpolate=False)
    unknown = sorted(key for key in values if key not in DEFAULTS)
    if unknown:
        raise ConfigError(f"{source}: unknown config key {unknown[0]}")
    missing = [key for key, value in values.items() if value is None]
    if missing:
        raise ConfigError(f"{source}: key {missing[0]} has no value")
    return dict(values)


def parse_overrides(pairs) -> Dict[str, str]:
    """``KEY=VALUE`` strings from ``--set`` flags."""

    overrides = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        key = key.strip().upper()
        if not sep or not key:
            raise ConfigError(f"override {pair!r} is not KEY=VALUE")
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key}")
        overrides[key] = value.strip()
    return overrides


def preset_defaults(preset: str) -> Dict[str, str]:
    if preset not in PRESETS:
        raise ConfigError(f"PRESET: unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    return {**DEFAULTS, **PRESETS[preset], "PRESET": preset}


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None) -> Dict[str, str]:
    """
    Loads the layered flat configuration: preset defaults, then the config
    file, then overrides. Without ``path`` the default file is used when it
    exists.
    """

    file_values = {}
    if path is None and os.path.exists(DEFAULT_CONFIG_FILE):
        path = DEFAULT_CONFIG_FILE
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as file:
                text = file.read()
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        file_values = parse_config_text(text, str(path))
    else:
        logger.debug("no config file; using built-in defaults")

    overrides = overrides or {}
    preset = overrides.get("PRESET") or file_values.get("PRESET") or DEFAULTS["PRESET"]
    return {**preset_defaults(preset), **file_values, **overrides}


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    return build_run_config(load_config(path, overrides))


# --- wizard ---

def render_config_file(flat: Dict[str, str]) -> str:
    sections = [
        ("Preset (desk/full)", ["PRESET"]),
        ("Input and tokenizer", ["IMAGE_H", "IMAGE_W", "STAGE_SPECS", "REDUCTION_DIM"]),
        ("Backbone", ["EMBED_DIM", "LAYERS", "HEADS", "MLP_RATIO", "TAP_LAYERS"]),
        ("Heads", ["TAM", "RTM", "TAM_REDUCTION", "OUTPUT_STRIDE", "DECODER_WIDTH", "FINAL_BIAS"]),
        ("Losses", ["LAMBDA_RTM", "LAMBDA_OT", "LAMBDA_TV", "AUX_WEIGHT", "TV_SCALE_BY_COUNT",
                    "SINKHORN_EPSILON", "SINKHORN_ITERS", "SINKHORN_TOL"]),
        ("Data and augmentation", ["SCENE_H", "SCENE_W", "CROP_H", "CROP_W", "HFLIP_PROB", "COUNT_MIN",
                                   "COUNT_MAX", "SIZE_GRADIENT", "BASE_SIZE"]),
        ("Optimizer", ["LR", "WEIGHT_DECAY", "BETA1", "BETA2", "ADAM_EPS"]),
        ("Run", ["EPOCHS", "BATCH_SIZE", "SEED", "CHECKPOINT_EVERY", "EVAL_WORKERS", "RUN_DIR"]),
    ]
    lines = ["# crowdcount configuration", "# ------------------------"]
    for title, keys in sections:
        lines.append(f"# {title}")
        lines.extend(f"{key}={flat[key]}" for key in keys)
    return "\n".join(lines) + "\n"


def setup_wizard(path: str = DEFAULT_CONFIG_FILE) -> Optional[RunConfig]:
    """Interactive configuration setup wizard."""

    if os.path.exists(path):
        overwrite = questionary.confirm(f"{path} already exists. Overwrite it?").ask()
        if not overwrite:
            print(themed('warning', "⚠️ Keeping the existing configuration. Exiting setup."))
            return None

    preset = questionary.select(
        "Select model size:",
        choices=[
            "desk (4 layers, width 64, trains on a laptop core)",
            "full (14 layers, width 384, taps at 5/8/11)"
        ]
    ).ask()
    if not preset:
        print(themed('warning', "⚠️ Preset selection cancelled. Exiting setup."))
        return None
    preset = preset.split()[0]

    ablation = questionary.select(
        "Select architecture variant:",
        choices=list(ABLATIONS),
        default="tam+rtm"
    ).ask()
    if not ablation:
        print(themed('warning', "⚠️ Variant selection cancelled. Exiting setup."))
        return None

    def valid_weight(text):
        try:
            return float(text) >= 0 or "Weight must be >= 0"
        except ValueError:
            return "Enter a number"

    lambda_rtm = "0.0"
    if ABLATIONS[ablation][1]:
        lambda_rtm = questionary.text("RTM loss weight (lambda):", default="0.1",
                                      validate=valid_weight).ask()
        if lambda_rtm is None:
            print(themed('warning', "⚠️ Weight input cancelled. Exiting setup."))
            return None

    tam, rtm = ABLATIONS[ablation]
    flat = {**preset_defaults(preset), "TAM": _format_bool(tam), "RTM": _format_bool(rtm),
            "LAMBDA_RTM": lambda_rtm.strip()}
    cfg = build_run_config(flat)

    with open(path, "w", encoding="utf-8") as file:
        file.write(render_config_file(cfg.to_flat()))

    print(themed('success', f"\n✅ Configuration saved to {path}"))
    print(themed('info', f"Model: {preset}, variant {ablation}, "
                          f"{cfg.model.backbone.layers} layers of width {cfg.model.backbone.d}"))
    return cfg
