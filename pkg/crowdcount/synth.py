"""Synthetic crowd scenes with dot annotations.

Scenes are pure functions of their seed: person count, positions and sizes
come from one generator, the background texture from another seeded by
``background_seed``. Rendered images are quantised to 8 bits so they survive
a PPM round trip unchanged.
"""

from dataclasses import dataclass
from typing import Iterator, List, Tuple

import numpy as np

from scipy import ndimage

from .errors import ConfigError, ContractError
from .losses import GroundTruthGrid

HEAD_TONE = np.array([0.95, 0.80, 0.70])


@dataclass(frozen=True)
class Person:
    x: int
    y: int
    size: float


@dataclass(frozen=True)
class Scene:
    persons: Tuple[Person, ...]
    image_h: int
    image_w: int
    background_seed: int

    def __post_init__(self):
        for p in self.persons:
            if not (0 <= p.x < self.image_w and 0 <= p.y < self.image_h) or p.size <= 0:
                raise ContractError(f"person {p} outside a {self.image_h}x{self.image_w} scene")

    @property
    def dots(self) -> np.ndarray:
        return np.array([(p.x, p.y) for p in self.persons], dtype=np.int64).reshape(-1, 2)


@dataclass
class CrowdSample:
    image: np.ndarray
    dots: np.ndarray
    gt: GroundTruthGrid
    sample_id: str = ""

    @property
    def count(self) -> int:
        return int(len(self.dots))


@dataclass(frozen=True)
class SceneConfig:
    image_h: int = 64
    image_w: int = 64
    count_range: Tuple[int, int] = (5, 60)
    size_gradient: float = 0.5
    base_size: float = 4.0

    def __post_init__(self):
        lo, hi = self.count_range
        if lo < 0 or hi < lo:
            raise ConfigError(f"invalid count range {self.count_range}")
        if not 0 <= self.size_gradient < 1:
            raise ConfigError("size gradient must be in [0, 1)")


@dataclass(frozen=True)
class AugmentConfig:
    crop_h: int = 64
    crop_w: int = 64
    hflip_prob: float = 0.5

    def __post_init__(self):
        if self.crop_h < 1 or self.crop_w < 1:
            raise ConfigError("crop size must be positive")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError("hflip probability must be in [0, 1]")


def generate_scene(seed: int, count_range: Tuple[int, int] = (5, 60), size_gradient: float = 0.5,
                   image_h: int = 64, image_w: int = 64, base_size: float = 4.0) -> Scene:
    """Uniform person count in ``count_range``; size shrinks linearly with y by ``size_gradient``."""

    lo, hi = count_range
    rng = np.random.default_rng(seed)
    count = int(rng.integers(lo, hi + 1))
    xs = rng.integers(0, image_w, size=count)
    ys = rng.integers(0, image_h, size=count)
    sizes = base_size * (1.0 - size_gradient * ys / max(1, image_h - 1))
    persons = tuple(Person(int(x), int(y), float(s)) for x, y, s in zip(xs, ys, sizes))
    return Scene(persons, image_h, image_w, int(rng.integers(0, 2 ** 31 - 1)))


def _background(scene: Scene) -> np.ndarray:
    rng = np.random.default_rng(scene.background_seed)
    h, w = scene.image_h, scene.image_w
    base = rng.uniform(0.2, 0.3, size=(3, 1, 1))
    texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, size=(3, h, w)), sigma=(0, 4, 4))
    texture /= max(1e-12, np.abs(texture).max())
    ramp = np.linspace(0.0, 0.05, h)[None, :, None]
    return base + 0.06 * texture + ramp


def render(scene: Scene) -> np.ndarray:
    """[3, h, w] image in [0, 1]: textured background plus a head/body glyph per person."""

    h, w = scene.image_h, scene.image_w
    image = _background(scene)
    yy, xx = np.mgrid[0:h, 0:w]
    tones = np.random.default_rng(scene.background_seed + 1)
    for p in scene.persons:
        body_tone = tones.uniform(0.2, 0.8, size=3)
        sigma_head = p.size / 2.0
        head = np.exp(-((xx - p.x) ** 2 + (yy - p.y) ** 2) / (2.0 * sigma_head ** 2))
        body_y = p.y + 1.5 * p.size
        body = np.exp(-((xx - p.x) ** 2 / (2.0 * (0.6 * p.size) ** 2)
                        + (yy - body_y) ** 2 / (2.0 * p.size ** 2)))
        image += 0.5 * HEAD_TONE[:, None, None] * head + 0.2 * body_tone[:, None, None] * body
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def bin_dots(dots: np.ndarray, h: int, w: int, stride: int) -> GroundTruthGrid:
    """Count dots per stride x stride cell; the total is preserved exactly."""

    if stride < 1:
        raise ContractError("stride must be >= 1")
    dots = np.asarray(dots, dtype=np.int64).reshape(-1, 2)
    grid = np.zeros((-(-h // stride), -(-w // stride)), dtype=np.int64)
    if len(dots):
        xs, ys = dots[:, 0], dots[:, 1]
        if np.any((xs < 0) | (xs >= w) | (ys < 0) | (ys >= h)):
            raise ContractError(f"dot outside the {h}x{w} image")
        np.add.at(grid, (ys // stride, xs // stride), 1)
    return GroundTruthGrid(grid, stride)


def build_sample(scene: Scene, stride: int, sample_id: str = "") -> CrowdSample:
    dots = scene.dots
    return CrowdSample(render(scene), dots, bin_dots(dots, scene.image_h, scene.image_w, stride),
                       sample_id)


def scene_seeds(seed: int, n: int, stream: int = 0) -> List[int]:
    """Per-scene seeds; different ``stream`` values give independent sequences (train/val splits)."""

    sequence = np.random.SeedSequence(seed, spawn_key=(stream,))
    return [int(s) for s in sequence.generate_state(n)] if n else []


def iter_samples(seed: int, n: int, cfg: SceneConfig, stride: int, start_index: int = 0,
                 stream: int = 0) -> Iterator[CrowdSample]:
    """``n`` samples whose scenes are seeded from ``seed``; ids are zero-padded indices."""

    for offset, scene_seed in enumerate(scene_seeds(seed, n, stream)):
        scene = generate_scene(scene_seed, cfg.count_range, cfg.size_gradient, cfg.image_h,
                               cfg.image_w, cfg.base_size)
        yield build_sample(scene, stride, f"{start_index + offset:04d}")


def generate_samples(seed: int, n: int, cfg: SceneConfig, stride: int,
                     start_index: int = 0, stream: int = 0) -> List[CrowdSample]:
    return list(iter_samples(seed, n, cfg, stride, start_index, stream))


def augment(sample: CrowdSample, cfg: AugmentConfig, rng: np.random.Generator) -> CrowdSample:
    """Random crop (uniform offset) and horizontal flip; ground truth is re-binned."""

    _, h, w = sample.image.shape
    if cfg.crop_h > h or cfg.crop_w > w:
        raise ContractError(f"crop {cfg.crop_h}x{cfg.crop_w} larger than image {h}x{w}")
    y0 = int(rng.integers(0, h - cfg.crop_h + 1))
    x0 = int(rng.integers(0, w - cfg.crop_w + 1))
    flip = bool(rng.random() < cfg.hflip_prob)

    image = sample.image[:, y0:y0 + cfg.crop_h, x0:x0 + cfg.crop_w]
    dots = sample.dots.reshape(-1, 2)
    inside = ((dots[:, 0] >= x0) & (dots[:, 0] < x0 + cfg.crop_w)
              & (dots[:, 1] >= y0) & (dots[:, 1] < y0 + cfg.crop_h))
    dots = dots[inside] - np.array([x0, y0])
    if flip:
        image = image[:, :, ::-1]
        dots = np.column_stack([cfg.crop_w - 1 - dots[:, 0], dots[:, 1]])
    dots = dots.astype(np.int64).reshape(-1, 2)
    return CrowdSample(np.ascontiguousarray(image), dots,
                       bin_dots(dots, cfg.crop_h, cfg.crop_w, sample.gt.cell_size), sample.sample_id)
