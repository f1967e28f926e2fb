"""Training loop, evaluation, single-image inference and parameter sweeps.

A run directory holds ``loss.jsonl`` (one record per optimizer step),
``epochs.jsonl`` (per-epoch metrics) and ``checkpoints/`` with
``last.ckpt``, ``epoch_XXXX.ckpt`` every ``checkpoint_every`` epochs and
``best.ckpt`` by validation MAE. Evaluation always runs on the
single-precision parameters a checkpoint stores, so a count computed during
training equals the one recomputed from the saved file.
"""

import json
import logging
import math

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint, load_into, save_checkpoint, snapshot
from .dataset import read_image, write_pgm16
from .errors import ConfigError, ContractError, DatasetIOError, NumericAbort
from .losses import CountMetrics, metrics, total_loss
from .model import ABLATIONS, CrowdCounter, ModelConfig
from .optim import Adam
from .setup import RunConfig, build_run_config, parse_config_text
from .spinner_progress_utils import progress_bar
from .synth import CrowdSample, augment
from .tensor import no_grad

logger = logging.getLogger(__name__)

LOSS_LOG = "loss.jsonl"
EPOCH_LOG = "epochs.jsonl"
CHECKPOINT_DIR = "checkpoints"
DEFAULT_LAMBDAS = (0.01, 0.1, 1.0)


class JsonLog:
    """Append-only JSON-lines file."""

    def __init__(self, path: Path, append: bool = False):
        self.path = Path(path)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not (append and self.path.exists()):
                self.path.write_text("")
        except OSError as e:
            raise DatasetIOError(f"cannot create log {self.path}: {e}") from e

    def write(self, record: Dict):
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(record) + "\n")


def read_json_lines(path) -> List[Dict]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


# --- model helpers ---

def model_from_tensors(cfg: ModelConfig, tensors: Dict[str, np.ndarray]) -> CrowdCounter:
    model = CrowdCounter(cfg)
    load_into(model, tensors)
    return model


def run_config_from_checkpoint(text: str) -> RunConfig:
    if not text:
        raise ConfigError("checkpoint carries no run configuration")
    return build_run_config(parse_config_text(text, "<checkpoint config>"))


def predict_densities(model: CrowdCounter, images: Sequence[np.ndarray], workers: int = 1) -> List[np.ndarray]:
    """Main density maps for ``images``, in input order.

    Images are sharded across ``workers`` threads that only read the
    parameters; each thread builds its own graph-free forward pass.
    """

    def run(image):
        with no_grad():
            return model(image, with_aux=False).density.grid.data

    if workers <= 1 or len(images) <= 1:
        return [run(image) for image in images]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, images))


def predict_counts(model: CrowdCounter, samples: Sequence[CrowdSample], workers: int = 1) -> List[float]:
    return [float(d.sum()) for d in predict_densities(model, [s.image for s in samples], workers)]


# --- training ---

@dataclass
class TrainResult:
    run_dir: Path
    records: List[Dict] = field(default_factory=list)
    train_mae: Optional[float] = None
    best_val_mae: Optional[float] = None

    @property
    def last_checkpoint(self) -> Path:
        return self.run_dir / CHECKPOINT_DIR / "last.ckpt"


class Trainer:
    def __init__(self, cfg: RunConfig, train_samples: List[CrowdSample],
                 val_samples: Optional[List[CrowdSample]] = None, run_dir=None, resume_from=None):
        """Owns the model, optimizer and logs of one training run.

        Args:
            cfg: Complete run configuration
            train_samples: Training set; every ground-truth grid must use the model's output stride
            val_samples: Optional validation set for best-checkpoint selection
            run_dir: Output directory (default: cfg.run_dir)
            resume_from: Checkpoint with optimizer state to continue from; logs are appended
        """

        if not train_samples:
            raise ContractError("training needs at least one sample")
        stride = cfg.model.heads.output_stride
        for sample in list(train_samples) + list(val_samples or []):
            if sample.gt.cell_size != stride:
                raise ConfigError(f"sample {sample.sample_id} is binned at stride {sample.gt.cell_size}, "
                                  f"the model outputs stride {stride}")

        self.cfg = cfg
        self.train_samples = list(train_samples)
        self.val_samples = list(val_samples or [])
        self.run_dir = Path(run_dir or cfg.run_dir)
        self.model = CrowdCounter(cfg.model, cfg.seed)
        self.optimizer = Adam(self.model.parameters(), cfg.optim.adam_state())
        self.data_rng = np.random.default_rng([cfg.seed, 1])
        self.loss_log = JsonLog(self.run_dir / LOSS_LOG, append=resume_from is not None)
        self.epoch_log = JsonLog(self.run_dir / EPOCH_LOG, append=resume_from is not None)
        self.step = 0
        self.start_epoch = 1
        if resume_from is not None:
            self.restore(resume_from)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.train_samples) / self.cfg.batch_size)

    def restore(self, path):
        """Loads parameters and Adam state from a checkpoint written at the end of an epoch."""

        ckpt = load_checkpoint(path)
        if ckpt.step is None:
            raise ContractError(f"{path} carries no optimizer state")
        if ckpt.step % self.steps_per_epoch:
            raise ContractError(f"{path} was saved at step {ckpt.step}, not at the end of an epoch "
                                f"of {self.steps_per_epoch} steps")
        load_into(self.model, ckpt.tensors)
        o = self.cfg.optim
        state = ckpt.adam_state(lr=o.lr, weight_decay=o.weight_decay, beta1=o.beta1, beta2=o.beta2, eps=o.eps)
        self.optimizer = Adam(self.model.parameters(), state)
        self.step = ckpt.step
        self.start_epoch = ckpt.step // self.steps_per_epoch + 1
        self.data_rng = np.random.default_rng([self.cfg.seed, 1, self.start_epoch])
        logger.info("resuming from %s at epoch %d (step %d)", path, self.start_epoch, self.step)

    def previous_best(self) -> Optional[float]:
        if self.start_epoch == 1 or not self.epoch_log.path.exists():
            return None
        scores = [e["val_mae"] for e in read_json_lines(self.epoch_log.path)
                  if "val_mae" in e and e["epoch"] < self.start_epoch]
        return min(scores, default=None)

    def save(self, name: str) -> Path:
        path = self.run_dir / CHECKPOINT_DIR / name
        save_checkpoint(path, snapshot(self.model), self.optimizer.state, self.cfg.to_text())
        return path

    def snapshot_model(self) -> CrowdCounter:
        """A copy of the model carrying exactly the parameters a checkpoint would store."""

        return model_from_tensors(self.cfg.model, snapshot(self.model))

    def train_step(self, batch: List[CrowdSample], epoch: int) -> Dict:
        """Augments, forwards and backpropagates each sample, then applies one Adam update.

        Samples are backpropagated one at a time with weight 1/len(batch), so
        the accumulated gradient is that of the batch-mean loss while only one
        graph is alive.
        """

        cfg = self.cfg
        scale = 1.0 / len(batch)
        record = {"step": self.step + 1, "epoch": epoch, "count": 0.0, "ot": 0.0, "tv": 0.0,
                  "rtm": 0.0, "aux": [], "total": 0.0}
        for sample in batch:
            sample = augment(sample, cfg.augment, self.data_rng)
            prediction = self.model(sample.image)
            breakdown = total_loss(prediction.density.grid, [m.grid for m in prediction.aux], sample.gt,
                                   prediction.count, cfg.losses, cfg.sinkhorn)
            if not math.isfinite(breakdown.total.item()):
                raise NumericAbort(f"non-finite loss at step {self.step + 1}")
            (breakdown.total * scale).backward()
            for key, value in breakdown.as_record().items():
                if key == "aux":
                    record["aux"] = [a + v * scale for a, v in
                                     zip(record["aux"] or [0.0] * len(value), value)]
                else:
                    record[key] += value * scale
        self.optimizer.step()
        self.step += 1
        self.loss_log.write(record)
        return record

    def validate(self, model: CrowdCounter) -> Optional[CountMetrics]:
        if not self.val_samples:
            return None
        counts = predict_counts(model, self.val_samples, self.cfg.eval_workers)
        return metrics(counts, [s.count for s in self.val_samples])

    @progress_bar(description="Training...")
    def run(self):
        """Trains for cfg.epochs epochs; yields (step, total) for the progress bar.

        Returns:
            TrainResult with the loss records and final train/val MAE
        """

        cfg = self.cfg
        total_steps = cfg.epochs * self.steps_per_epoch
        result = TrainResult(self.run_dir, best_val_mae=self.previous_best())
        self.save("last.ckpt")
        logger.info("training %d parameters for %d steps in %s",
                    sum(p.size for p in self.model.parameters()), total_steps, self.run_dir)

        for epoch in range(self.start_epoch, cfg.epochs + 1):
            order = self.data_rng.permutation(len(self.train_samples))
            try:
                for start in range(0, len(order), cfg.batch_size):
                    batch = [self.train_samples[i] for i in order[start:start + cfg.batch_size]]
                    result.records.append(self.train_step(batch, epoch))
                    yield self.step, total_steps
            except NumericAbort:
                logger.error("numeric abort at step %d; keeping %s", self.step + 1, result.last_checkpoint)
                raise

            self.save("last.ckpt")
            summary = {"epoch": epoch, "step": self.step, "loss": result.records[-1]["total"]}
            final = epoch == cfg.epochs
            if epoch % cfg.checkpoint_every == 0 or final:
                if epoch % cfg.checkpoint_every == 0:
                    self.save(f"epoch_{epoch:04d}.ckpt")
                evaluated = self.snapshot_model()
                val = self.validate(evaluated)
                if val is not None:
                    summary["val_mae"] = val.mae
                    if result.best_val_mae is None or val.mae < result.best_val_mae:
                        result.best_val_mae = val.mae
                        self.save("best.ckpt")
                if final:
                    train = metrics(predict_counts(evaluated, self.train_samples, cfg.eval_workers),
                                    [s.count for s in self.train_samples])
                    result.train_mae = summary["train_mae"] = train.mae
            self.epoch_log.write(summary)
            logger.debug("epoch %d: %s", epoch, summary)
        return result


def train(cfg: RunConfig, train_samples: List[CrowdSample], val_samples: Optional[List[CrowdSample]] = None,
          run_dir=None, resume_from=None) -> TrainResult:
    return Trainer(cfg, train_samples, val_samples, run_dir, resume_from).run()


# --- evaluation ---

@dataclass(frozen=True)
class EvalRow:
    sample_id: str
    pred: float
    gt: int


@dataclass
class EvalReport:
    rows: List[EvalRow]
    metrics: CountMetrics

    @classmethod
    def from_rows(cls, rows: List[EvalRow]) -> "EvalReport":
        return cls(rows, metrics([r.pred for r in rows], [r.gt for r in rows]))

    @property
    def n(self) -> int:
        return len(self.rows)

    def to_dict(self) -> Dict:
        return {**asdict(self.metrics), "rows": [asdict(r) for r in self.rows]}

    def write(self, path):
        try:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(json.dumps(self.to_dict(), indent=2))
        except OSError as e:
            raise DatasetIOError(f"cannot write report {path}: {e}") from e


def load_model(checkpoint_path, model_cfg: Optional[ModelConfig] = None):
    """Model and run config from a checkpoint; ``model_cfg`` overrides the stored architecture."""

    ckpt = load_checkpoint(checkpoint_path)
    run_cfg = run_config_from_checkpoint(ckpt.config_text)
    return model_from_tensors(model_cfg or run_cfg.model, ckpt.tensors), run_cfg


def evaluate(checkpoint_path, samples: List[CrowdSample], workers: int = 1,
             model_cfg: Optional[ModelConfig] = None, export_dir=None) -> EvalReport:
    """Counts every sample as the sum of its density map (RTM is not used)."""

    if not samples:
        raise ContractError("evaluation needs at least one sample")
    model, _ = load_model(checkpoint_path, model_cfg)
    densities = predict_densities(model, [s.image for s in samples], workers)
    if export_dir is not None:
        for sample, density in zip(samples, densities):
            export_density(density, Path(export_dir) / f"{sample.sample_id}.pgm")
    rows = [EvalRow(s.sample_id, float(d.sum()), s.count) for s, d in zip(samples, densities)]
    return EvalReport.from_rows(rows)


# --- inference ---

@dataclass(frozen=True)
class DensityExport:
    count: float
    h_d: int
    w_d: int
    scale: float

    def sidecar_text(self) -> str:
        return f"count={self.count!r}\nh_d={self.h_d}\nw_d={self.w_d}\nscale={self.scale!r}\n"

    @classmethod
    def parse(cls, text: str) -> "DensityExport":
        values = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        return cls(float(values["count"]), int(values["h_d"]), int(values["w_d"]), float(values["scale"]))


def sidecar_path(map_path) -> Path:
    return Path(map_path).with_suffix(".txt")


def export_density(density: np.ndarray, out_path) -> DensityExport:
    """Writes the map as a 16-bit graymap (values * scale) plus a key=value sidecar.

    ``scale`` maps the largest cell to 65535; an all-zero map uses scale 1.
    """

    peak = float(density.max()) if density.size else 0.0
    scale = 65535.0 / peak if peak > 0 else 1.0
    write_pgm16(out_path, np.round(density * scale).astype(np.int64))
    export = DensityExport(float(density.sum()), density.shape[0], density.shape[1], scale)
    try:
        sidecar_path(out_path).write_text(export.sidecar_text())
    except OSError as e:
        raise DatasetIOError(f"cannot write {sidecar_path(out_path)}: {e}") from e
    return export


def infer(checkpoint_path, image_path, out_path) -> DensityExport:
    model, _ = load_model(checkpoint_path)
    image = read_image(image_path)
    density = predict_densities(model, [image])[0]
    export = export_density(density, out_path)
    logger.info("estimated %.2f persons in %s", export.count, image_path)
    return export


# --- sweeps ---

@dataclass(frozen=True)
class SweepRow:
    name: str
    tam: bool
    rtm: bool
    lambda_rtm: float
    val_mae: float
    val_mse: float


def sweep_variants(cfg: RunConfig, lambdas: Optional[Sequence[float]] = None,
                   ablations: bool = False) -> Dict[str, RunConfig]:
    """Named configs: the ablation lattice, or one run per RTM weight."""

    if ablations:
        variants = {}
        for name, (tam, rtm) in ABLATIONS.items():
            variants[name] = cfg.with_overrides(TAM=str(tam).lower(), RTM=str(rtm).lower(),
                                                LAMBDA_RTM=cfg.losses.rtm if rtm else 0.0)
        return variants
    return {f"lambda={lam!r}": cfg.with_overrides(LAMBDA_RTM=repr(float(lam)))
            for lam in (lambdas or DEFAULT_LAMBDAS)}


def sweep(cfg: RunConfig, train_samples: List[CrowdSample], val_samples: List[CrowdSample],
          lambdas: Optional[Sequence[float]] = None, ablations: bool = False, run_dir=None) -> List[SweepRow]:
    """Trains each variant from the same seed and data; writes ``sweep.json``."""

    if not val_samples:
        raise ContractError("a sweep needs validation samples")
    root = Path(run_dir or cfg.run_dir)
    rows = []
    for index, (name, variant) in enumerate(sweep_variants(cfg, lambdas, ablations).items()):
        logger.info("sweep run %s", name)
        run_path = root / f"run_{index:02d}"
        result = train(variant, train_samples, val_samples, run_path)
        report = evaluate(result.last_checkpoint, val_samples, cfg.eval_workers)
        rows.append(SweepRow(name, variant.model.heads.tam, variant.model.heads.rtm, variant.losses.rtm,
                             report.metrics.mae, report.metrics.mse))
    try:
        root.mkdir(parents=True, exist_ok=True)
        (root / "sweep.json").write_text(json.dumps([asdict(r) for r in rows], indent=2))
    except OSError as e:
        raise DatasetIOError(f"cannot write sweep summary in {root}: {e}") from e
    return rows
