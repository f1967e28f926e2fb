"""Central finite-difference checks of the autodiff primitives and the full objective.

Each row reports the worst relative error ``max|a - n| / max(max|a|, max|n|)``
between analytic gradients ``a`` and numeric gradients ``n``. Two extra rows
check gradients that must vanish exactly: the RTM head under a zero loss
weight, and the TAM gate MLP when TAM is bypassed.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from rich.table import Table

from . import tensor as T
from .backbone import BackboneConfig
from .heads import HeadsConfig
from .losses import LossWeights, SinkhornConfig, density_loss, total_loss
from .model import CrowdCounter, ModelConfig
from .synth import SceneConfig, generate_samples
from .tokenizer import TokenizerConfig

STEP = 1e-5
THRESHOLD = 1e-4
OT_THRESHOLD = 1e-3


@dataclass(frozen=True)
class GradcheckRow:
    name: str
    error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.error < self.threshold if self.threshold > 0 else self.error == 0.0


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    if scale < 1e-12:
        return 0.0
    return float(np.max(np.abs(analytic - numeric))) / scale


def numeric_gradient(f: Callable[[], float], array: np.ndarray, indices, step: float = STEP) -> np.ndarray:
    """d f / d array[index] for each index, perturbing ``array`` in place."""

    grads = []
    for index in indices:
        original = array[index]
        array[index] = original + step
        plus = f()
        array[index] = original - step
        minus = f()
        array[index] = original
        grads.append((plus - minus) / (2.0 * step))
    return np.array(grads)


def check_primitive(fn: Callable, inputs: Sequence[np.ndarray], rng: np.random.Generator) -> float:
    """Worst relative error of d sum(R * fn(inputs)) / d inputs for a random R."""

    leaves = [T.Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    weights = rng.normal(size=out.shape)
    T.tensor_sum(out * T.Tensor(weights)).backward()

    arrays = [x.copy() for x in inputs]

    def f():
        with T.no_grad():
            return float(np.sum(fn(*[T.Tensor(a) for a in arrays]).data * weights))

    worst = 0.0
    for leaf, array in zip(leaves, arrays):
        indices = list(np.ndindex(array.shape))
        numeric = numeric_gradient(f, array, indices).reshape(array.shape)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(array)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def _away_from_zero(rng, shape, low=0.2):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, 1.0, size=shape)


def _embed_block(x):
    return T.embed(x, np.array([0, 2]), np.array([1, 3]), (3, 4))


# name -> (function of input tensors, input generator)
PRIMITIVES: Dict[str, Tuple[Callable, Callable]] = {
    "add": (T.add, lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))]),
    "sub": (T.sub, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 1))]),
    "mul": (T.mul, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "div": (T.div, lambda r: [r.normal(size=(3, 4)), r.uniform(0.5, 2.0, size=(3, 4))]),
    "exp": (T.exp, lambda r: [r.normal(size=(3, 4))]),
    "log": (T.log, lambda r: [r.uniform(0.5, 2.0, size=(3, 4))]),
    "abs": (T.tensor_abs, lambda r: [_away_from_zero(r, (3, 4))]),
    "relu": (T.relu, lambda r: [_away_from_zero(r, (3, 4))]),
    "sigmoid": (T.sigmoid, lambda r: [r.normal(size=(3, 4))]),
    "gelu": (T.gelu, lambda r: [r.normal(size=(3, 4))]),
    "sum": (lambda x: T.tensor_sum(x, axis=1), lambda r: [r.normal(size=(3, 4))]),
    "mean": (lambda x: T.mean(x, axis=0), lambda r: [r.normal(size=(3, 4))]),
    "logsumexp": (lambda x: T.logsumexp(x, axis=-1), lambda r: [r.normal(size=(3, 4))]),
    "softmax": (lambda x: T.softmax(x, axis=0), lambda r: [r.normal(size=(3, 4))]),
    "softmax_rows": (T.softmax_rows, lambda r: [r.normal(size=(3, 4))]),
    "matmul": (T.matmul, lambda r: [r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))]),
    "reshape": (lambda x: T.reshape(x, (4, 6)), lambda r: [r.normal(size=(2, 3, 4))]),
    "transpose": (lambda x: T.transpose(x, (2, 0, 1)), lambda r: [r.normal(size=(2, 3, 4))]),
    "concat": (lambda a, b: T.concat([a, b], axis=0), lambda r: [r.normal(size=(2, 3)), r.normal(size=(1, 3))]),
    "slice": (lambda x: T.getitem(x, (slice(1, 3), slice(None, None, 2))), lambda r: [r.normal(size=(4, 5))]),
    "embed": (_embed_block, lambda r: [r.normal(size=(2, 2))]),
    "layer_norm": (T.layer_norm, lambda r: [r.normal(size=(3, 5)), r.normal(size=(5,)), r.normal(size=(5,))]),
    "unfold": (lambda x: T.unfold(x, 3, 2, 1), lambda r: [r.normal(size=(2, 5, 5))]),
    "fold": (lambda c: T.fold(c, (2, 5, 5), 3, 2, 1), lambda r: [r.normal(size=(9, 18))]),
    "conv2d": (lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1),
               lambda r: [r.normal(size=(2, 5, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=(3,))]),
    "conv_transpose2d": (lambda x, w, b: T.conv_transpose2d(x, w, b, stride=2, padding=1),
                         lambda r: [r.normal(size=(2, 3, 3)), r.normal(size=(2, 3, 4, 4)), r.normal(size=(3,))]),
    "avg_pool2d": (lambda x: T.avg_pool2d(x, 2), lambda r: [r.normal(size=(2, 4, 4))]),
}


def tiny_model_config(tam: bool = True, rtm: bool = True) -> ModelConfig:
    """A 32x32 model small enough for exhaustive finite differences."""

    return ModelConfig(
        tokenizer=TokenizerConfig(reduction_dim=4, final_dim=8),
        backbone=BackboneConfig(d=8, layers=2, heads=2, mlp_ratio=2.0, tap_layers=(1,)),
        heads=HeadsConfig(tam=tam, rtm=rtm, reduction=2, decoder_width=4),
        image_h=32, image_w=32)


def _objective(model: CrowdCounter, sample, weights: LossWeights, sinkhorn: SinkhornConfig,
               bypass_tam: bool = False, aux: bool = True):
    prediction = model(sample.image, bypass_tam=bypass_tam)
    if not aux:
        return density_loss(prediction.density.grid, sample.gt, weights, sinkhorn)[0]
    return total_loss(prediction.density.grid, [m.grid for m in prediction.aux], sample.gt,
                      prediction.count, weights, sinkhorn).total


def end_to_end_rows(seed: int, entries: int = 4) -> List[GradcheckRow]:
    """dL/d(context token, position embedding, sampled weights) against finite differences."""

    rng = np.random.default_rng(seed)
    cfg = tiny_model_config()
    model = CrowdCounter(cfg, seed)
    sample = generate_samples(seed, 1, SceneConfig(image_h=32, image_w=32, count_range=(3, 8)),
                              cfg.heads.output_stride)[0]
    sinkhorn = SinkhornConfig(epsilon=0.1, max_iters=30, tol=0.0)
    variants = {
        "end-to-end (count, tv, rtm, aux)": (LossWeights(ot=0.0), THRESHOLD),
        "end-to-end (with OT)": (LossWeights(), OT_THRESHOLD),
    }
    params = dict(model.named_parameters())
    checked = ["backbone.context_token", "backbone.pos_embed", "tokenizer.reduce0.attn.wq",
               "backbone.layers.0.mlp.fc1.weight", "tam.gate_mlp.fc1.weight", "rtm.mlp.fc2.weight",
               "decoder.out.weight", "aux1.out.weight"]

    rows = []
    for name, (weights, threshold) in variants.items():
        model.zero_grad()
        _objective(model, sample, weights, sinkhorn).backward()

        def f():
            with T.no_grad():
                return _objective(model, sample, weights, sinkhorn).item()

        worst = 0.0
        for pname in checked:
            param = params[pname]
            flat = [np.unravel_index(i, param.shape) for i in rng.choice(param.size, entries, replace=False)]
            numeric = numeric_gradient(f, param.data, flat)
            analytic = np.array([param.grad[i] for i in flat])
            worst = max(worst, relative_error(analytic, numeric))
        rows.append(GradcheckRow(name, worst, threshold))
    return rows


def vanishing_rows(seed: int) -> List[GradcheckRow]:
    """Gradients that must be exactly zero: RTM at zero weight, gate MLP with TAM bypassed."""

    cfg = tiny_model_config()
    sample = generate_samples(seed, 1, SceneConfig(image_h=32, image_w=32, count_range=(3, 8)),
                              cfg.heads.output_stride)[0]
    sinkhorn = SinkhornConfig(epsilon=0.1, max_iters=10, tol=0.0)

    model = CrowdCounter(cfg, seed)
    _objective(model, sample, LossWeights(rtm=0.0), sinkhorn).backward()
    rtm_grad = max(float(np.max(np.abs(p.grad))) for p in model.rtm.parameters())

    model = CrowdCounter(cfg, seed)
    _objective(model, sample, LossWeights(), sinkhorn, bypass_tam=True, aux=False).backward()
    gate_grad = max((float(np.max(np.abs(p.grad))) if p.grad is not None else 0.0)
                    for p in model.tam.gate_mlp.parameters())

    return [GradcheckRow("rtm weights at lambda=0", rtm_grad, 0.0),
            GradcheckRow("gate MLP with TAM bypassed", gate_grad, 0.0)]


def gradcheck(seed: int = 0, end_to_end: bool = True) -> List[GradcheckRow]:
    rng = np.random.default_rng(seed)
    rows = []
    for name, (fn, make_inputs) in PRIMITIVES.items():
        rows.append(GradcheckRow(name, check_primitive(fn, make_inputs(rng), rng), THRESHOLD))
    if end_to_end:
        rows.extend(end_to_end_rows(seed))
        rows.extend(vanishing_rows(seed))
    return rows


def render_table(rows: List[GradcheckRow]) -> Table:
    table = Table(title="Gradient check")
    table.add_column("check")
    table.add_column("worst rel. error", justify="right")
    table.add_column("threshold", justify="right")
    table.add_column("result")
    for row in rows:
        threshold = f"{row.threshold:.0e}" if row.threshold > 0 else "exact 0"
        result = "[green]pass" if row.passed else "[red]FAIL"
        table.add_row(row.name, f"{row.error:.2e}", threshold, result)
    return table
