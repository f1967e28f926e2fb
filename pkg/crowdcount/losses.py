"""Training objectives and count metrics.

The density objective is
``L_d = |sum(D') - sum(D)| + w_ot * OT(D', D) + w_tv * TV(D', D)``
and the full objective adds ``w_rtm * |D_hat - sum(D)|`` plus one L_d per
auxiliary decoder. OT is entropic optimal transport between the two maps
normalised to unit mass; its Sinkhorn iterations run in the log domain and
are unrolled through autodiff.
"""

import functools
import logging
import math

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .tensor import (Tensor, embed, exp, log, logsumexp, reshape, tensor_abs, tensor_sum)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    rtm: float = 0.1
    ot: float = 0.1
    tv: float = 0.01
    aux: float = 1.0
    tv_scale_by_count: bool = True

    def __post_init__(self):
        for name in ("rtm", "ot", "tv", "aux"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be >= 0")


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 0.01
    max_iters: int = 200
    tol: float = 1e-7

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigError("sinkhorn epsilon must be > 0")
        if self.max_iters < 1:
            raise ConfigError("sinkhorn max_iters must be >= 1")


@dataclass
class DensityMap:
    grid: Tensor
    cell_size: int

    @property
    def count(self) -> float:
        return float(self.grid.data.sum())


@dataclass
class GroundTruthGrid:
    grid: np.ndarray
    cell_size: int = 1

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.int64)
        if self.grid.ndim != 2 or np.any(self.grid < 0):
            raise ContractError("ground-truth grid must be a 2-D array of nonnegative counts")

    @property
    def total(self) -> int:
        return int(self.grid.sum())

    @property
    def shape(self):
        return self.grid.shape


def _check_shapes(pred: Tensor, gt: GroundTruthGrid):
    if pred.shape != gt.shape:
        raise ShapeError(f"density map {pred.shape} and ground truth {gt.shape} differ")


def count_loss(pred: Tensor, gt: GroundTruthGrid) -> Tensor:
    """| ||D'||_1 - ||D||_1 |"""

    _check_shapes(pred, gt)
    return tensor_abs(tensor_sum(pred) - float(gt.total))


@functools.lru_cache(maxsize=16)
def _cost_array(h: int, w: int) -> np.ndarray:
    ys, xs = np.divmod(np.arange(h * w), w)
    d2 = (ys[:, None] - ys[None, :]) ** 2 + (xs[:, None] - xs[None, :]) ** 2
    diag2 = (h - 1) ** 2 + (w - 1) ** 2
    cost = d2 / diag2 if diag2 else np.zeros_like(d2, dtype=np.float64)
    cost = cost.astype(np.float64)
    cost.setflags(write=False)
    return cost


def cost_matrix(h: int, w: int) -> Tensor:
    """Squared distance between cell centres over the squared grid diagonal, in [0, 1]."""

    if h < 1 or w < 1:
        raise ShapeError(f"cost matrix needs a non-empty grid, got {h}x{w}")
    return Tensor(_cost_array(h, w))


@dataclass
class SinkhornResult:
    plan: Tensor
    iterations: int
    marginal_error: float
    errors: List[float] = field(default_factory=list)
    tol: float = 0.0

    @property
    def converged(self) -> bool:
        return self.marginal_error < self.tol


def _check_marginal(x: Tensor, label: str):
    if np.any(x.data < 0):
        raise ContractError(f"sinkhorn {label} marginal has negative entries")
    total = float(x.data.sum())
    if total <= 0:
        raise ContractError(f"sinkhorn {label} marginal has zero mass")
    if abs(total - 1.0) > 1e-9:
        raise ContractError(f"sinkhorn {label} marginal sums to {total}, expected 1")


def _sinkhorn_support(a: Tensor, b: Tensor, cost: np.ndarray, cfg: SinkhornConfig):
    """Log-domain Sinkhorn restricted to the positive supports of a and b.

    Returns (plan on the support block, row indices, column indices, errors).
    Row marginals are exact after each sweep; the recorded error is the L1
    violation of the column marginal.
    """

    rows = np.flatnonzero(a.data > 0)
    cols = np.flatnonzero(b.data > 0)
    a_s, b_s = a[rows], b[cols]
    log_k = Tensor(-cost[np.ix_(rows, cols)] / cfg.epsilon)
    log_a, log_b = log(a_s), log(b_s)

    u = Tensor(np.zeros(len(rows)))
    v = Tensor(np.zeros(len(cols)))
    errors = []
    for _ in range(cfg.max_iters):
        v = log_b - logsumexp(log_k + reshape(u, (-1, 1)), axis=0)
        u = log_a - logsumexp(log_k + reshape(v, (1, -1)), axis=1)
        col_mass = np.exp(log_k.data + u.data[:, None] + v.data[None, :]).sum(axis=0)
        errors.append(float(np.abs(col_mass - b_s.data).sum()))
        if errors[-1] < cfg.tol:
            break
    plan = exp(log_k + reshape(u, (-1, 1)) + reshape(v, (1, -1)))
    return plan, rows, cols, errors


def sinkhorn_plan(a: Tensor, b: Tensor, cost: Tensor, cfg: SinkhornConfig) -> SinkhornResult:
    """Entropic OT plan between probability vectors a and b under ``cost``."""

    _check_marginal(a, "source")
    _check_marginal(b, "target")
    n, m = cost.shape
    if a.shape != (n,) or b.shape != (m,):
        raise ShapeError(f"marginals {a.shape}, {b.shape} do not fit cost {cost.shape}")
    block, rows, cols, errors = _sinkhorn_support(a, b, cost.data, cfg)
    return SinkhornResult(embed(block, rows, cols, (n, m)), len(errors), errors[-1], errors, cfg.tol)


def _normalised(pred: Tensor) -> Tensor:
    flat = reshape(pred, (-1,))
    return flat / tensor_sum(flat)


def ot_loss(pred: Tensor, gt: GroundTruthGrid, cfg: SinkhornConfig) -> Tensor:
    """<C, P> for the Sinkhorn plan between the normalised maps; 0 when either is empty."""

    _check_shapes(pred, gt)
    if pred.data.sum() <= 0 or gt.total == 0:
        return Tensor(0.0)
    a = _normalised(pred)
    b = Tensor(gt.grid.reshape(-1) / gt.total)
    cost = _cost_array(*gt.shape)
    block, rows, cols, errors = _sinkhorn_support(a, b, cost, cfg)
    if cfg.tol > 0 and errors[-1] >= cfg.tol:
        logger.debug("sinkhorn stopped after %d iterations with marginal error %.3g (tol %.3g)",
                     len(errors), errors[-1], cfg.tol)
    return tensor_sum(block * Tensor(cost[np.ix_(rows, cols)]))


def tv_loss(pred: Tensor, gt: GroundTruthGrid, scale_by_count: bool = True) -> Tensor:
    """||D||_1 * 0.5 * || D'/||D'||_1 - D/||D||_1 ||_1; 0 when either map is empty."""

    _check_shapes(pred, gt)
    if pred.data.sum() <= 0 or gt.total == 0:
        return Tensor(0.0)
    target = Tensor(gt.grid.reshape(-1) / gt.total)
    distance = tensor_sum(tensor_abs(_normalised(pred) - target)) * 0.5
    return distance * float(gt.total) if scale_by_count else distance


def rtm_loss(pred_count: Tensor, gt: GroundTruthGrid) -> Tensor:
    """|D_hat - ||D||_1|, zero subgradient at equality."""

    return tensor_abs(reshape(pred_count, ()) - float(gt.total))


@dataclass
class LossBreakdown:
    total: Tensor
    count: float
    ot: float
    tv: float
    rtm: float
    aux: List[float]

    def as_record(self) -> Dict[str, object]:
        return {"count": self.count, "ot": self.ot, "tv": self.tv, "rtm": self.rtm,
                "aux": list(self.aux), "total": self.total.item()}


def density_loss(pred: Tensor, gt: GroundTruthGrid, weights: LossWeights, cfg: SinkhornConfig):
    """L_d and its unweighted terms (count, ot, tv). Zero-weight terms are skipped."""

    count = count_loss(pred, gt)
    loss = count
    terms = {"count": count.item(), "ot": 0.0, "tv": 0.0}
    if weights.ot > 0:
        ot = ot_loss(pred, gt, cfg)
        loss = loss + ot * weights.ot
        terms["ot"] = ot.item()
    if weights.tv > 0:
        tv = tv_loss(pred, gt, weights.tv_scale_by_count)
        loss = loss + tv * weights.tv
        terms["tv"] = tv.item()
    return loss, terms


def total_loss(main: Tensor, aux: Sequence[Tensor], gt: GroundTruthGrid, pred_count: Optional[Tensor],
               weights: LossWeights, cfg: SinkhornConfig) -> LossBreakdown:
    """L_d(main) + w_rtm * L_r + w_aux * sum L_d(aux_i)."""

    total, terms = density_loss(main, gt, weights, cfg)
    rtm_value = 0.0
    if pred_count is not None:
        rtm = rtm_loss(pred_count, gt)
        total = total + rtm * weights.rtm
        rtm_value = rtm.item()
    aux_values = []
    for pred in aux:
        aux_loss, _ = density_loss(pred, gt, weights, cfg)
        total = total + aux_loss * weights.aux
        aux_values.append(aux_loss.item())
    return LossBreakdown(total, terms["count"], terms["ot"], terms["tv"], rtm_value, aux_values)


@dataclass(frozen=True)
class CountMetrics:
    mae: float
    mse: float
    nae: Optional[float]
    n: int
    nae_excluded: int = 0


def metrics(pred_counts: Sequence[float], gt_counts: Sequence[float]) -> CountMetrics:
    """MAE, root-mean-square error (reported as MSE) and NAE over per-image counts.

    Images with a zero ground-truth count are left out of NAE and counted in
    ``nae_excluded``; NAE is None when no image qualifies.
    """

    pred = np.asarray(pred_counts, dtype=np.float64)
    gt = np.asarray(gt_counts, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 1 or pred.size == 0:
        raise ContractError("metrics need two equal-length, non-empty count lists")
    err = np.abs(pred - gt)
    positive = gt > 0
    nae = float(np.mean(err[positive] / gt[positive])) if positive.any() else None
    return CountMetrics(mae=float(err.mean()), mse=math.sqrt(float(np.mean(err ** 2))), nae=nae,
                        n=int(pred.size), nae_excluded=int((~positive).sum()))
