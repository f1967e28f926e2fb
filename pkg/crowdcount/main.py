import argparse
import logging
import sys

from pathlib import Path

from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from .dataset import read_dataset, write_dataset
from .errors import ConfigError, CrowdCountError
from .format_utils import themed
from .gradcheck import gradcheck, render_table
from .setup import DEFAULT_CONFIG_FILE, load_run_config, parse_overrides, setup_wizard
from .spinner_progress_utils import progress_bar, spinner
from .synth import iter_samples
from .trainer import evaluate, infer, sweep, train
from .version import get_version

logger = logging.getLogger("crowdcount")


def configure_logging(verbose: bool = False):
    """Human diagnostics through rich on stderr; DEBUG with --verbose."""

    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crowdcount",
                                     description="Transformer crowd counting on synthetic scenes.")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    def with_config(sub):
        sub.add_argument("--config", help=f"key=value config file (default: ./{DEFAULT_CONFIG_FILE} if present)")
        sub.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                         help="override one config key; repeatable")
        return sub

    gen = with_config(commands.add_parser("gen-data", help="write a synthetic dataset"))
    gen.add_argument("out", help="output directory (train/ and val/ are created inside)")
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--count", type=int, default=200, help="training scenes")
    gen.add_argument("--val-count", type=int, default=0, help="validation scenes")

    tr = with_config(commands.add_parser("train", help="train a model"))
    tr.add_argument("data", help="training dataset directory")
    tr.add_argument("--seed", type=int, required=True)
    tr.add_argument("--val", help="validation dataset directory (enables best.ckpt)")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--run-dir")
    tr.add_argument("--resume", help="continue from this checkpoint (e.g. RUN_DIR/checkpoints/last.ckpt)")

    ev = with_config(commands.add_parser("eval", help="evaluate a checkpoint"))
    ev.add_argument("checkpoint")
    ev.add_argument("data")
    ev.add_argument("--workers", type=int, help="evaluation threads (default: EVAL_WORKERS)")
    ev.add_argument("--report", help="write the JSON report here")
    ev.add_argument("--export-maps", help="write one density graymap per image into this directory")

    inf = commands.add_parser("infer", help="estimate the density map of one image")
    inf.add_argument("checkpoint")
    inf.add_argument("image", help="PPM or PGM image")
    inf.add_argument("out", help="output .pgm path; the sidecar goes next to it as .txt")

    gc = commands.add_parser("gradcheck", help="finite-difference gradient checks")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--primitives-only", action="store_true")

    sw = with_config(commands.add_parser("sweep", help="train several variants and compare val error"))
    sw.add_argument("data")
    sw.add_argument("val")
    sw.add_argument("--seed", type=int, required=True)
    sw.add_argument("--lambdas", help="comma-separated RTM weights (default: 0.01,0.1,1.0)")
    sw.add_argument("--ablations", action="store_true", help="run baseline, tam and tam+rtm instead")
    sw.add_argument("--epochs", type=int)
    sw.add_argument("--run-dir")

    init = commands.add_parser("init-config", help="interactive configuration wizard")
    init.add_argument("path", nargs="?", default=DEFAULT_CONFIG_FILE)
    return parser


def _run_config(args, **flags):
    overrides = parse_overrides(args.set)
    overrides.update({key: str(value) for key, value in flags.items() if value is not None})
    return load_run_config(args.config, overrides)


@spinner(message=" [cyan]Loading dataset...")
def _load(path):
    return read_dataset(path)


def _load_split(path, stride):
    samples, data_stride = _load(path)
    if data_stride != stride:
        raise ConfigError(f"{path} is binned at stride {data_stride}, the model outputs stride {stride}")
    return samples


def cmd_gen_data(args):
    cfg = _run_config(args)
    stride = cfg.model.heads.output_stride
    root = Path(args.out)

    @progress_bar(description="Generating scenes...")
    def generate(n, stream):
        samples = []
        for sample in iter_samples(args.seed, n, cfg.scene, stride, stream=stream):
            samples.append(sample)
            yield len(samples), n
        return samples

    splits = [("train", args.count, 0)] + ([("val", args.val_count, 1)] if args.val_count else [])
    for name, n, stream in splits:
        write_dataset(root / name, generate(n, stream), stride)
        print(themed('success', f"✅ {n} {name} scenes written to {root / name}"))


def cmd_train(args):
    cfg = _run_config(args, SEED=args.seed, EPOCHS=args.epochs, RUN_DIR=args.run_dir)
    stride = cfg.model.heads.output_stride
    train_samples = _load_split(args.data, stride)
    val_samples = _load_split(args.val, stride) if args.val else None
    result = train(cfg, train_samples, val_samples, resume_from=args.resume)
    print(themed('success', f"✅ Training finished: {len(result.records)} steps"))
    if result.train_mae is not None:
        print(themed('metric', f"train MAE {result.train_mae:.4f}"))
    if result.best_val_mae is not None:
        print(themed('metric', f"best val MAE {result.best_val_mae:.4f}"))
    print(themed('info', f"checkpoints in {result.run_dir / 'checkpoints'}"))


def cmd_eval(args):
    overridden = args.config or args.set
    cfg = _run_config(args)
    samples, _ = _load(args.data)
    report = evaluate(args.checkpoint, samples, args.workers or cfg.eval_workers,
                      cfg.model if overridden else None, args.export_maps)
    table = Table(title=f"Evaluation on {report.n} images")
    for column in ("MAE", "MSE", "NAE", "NAE excluded"):
        table.add_column(column, justify="right")
    m = report.metrics
    table.add_row(f"{m.mae:.4f}", f"{m.mse:.4f}", "n/a" if m.nae is None else f"{m.nae:.4f}",
                  str(m.nae_excluded))
    Console().print(table)
    if args.report:
        report.write(args.report)
        print(themed('info', f"report written to {args.report}"))


def cmd_infer(args):
    export = infer(args.checkpoint, args.image, args.out)
    print(themed('success', f"✅ Estimated count: {export.count:.2f}"))
    print(themed('info', f"density map {export.h_d}x{export.w_d} written to {args.out}"))


def cmd_gradcheck(args):
    rows = gradcheck(args.seed, end_to_end=not args.primitives_only)
    Console().print(render_table(rows))
    failed = [row.name for row in rows if not row.passed]
    if failed:
        print(themed('error', f"⚠️ {len(failed)} checks failed: {', '.join(failed)}"))
    else:
        print(themed('success', f"✅ All {len(rows)} gradient checks passed"))


def cmd_sweep(args):
    cfg = _run_config(args, SEED=args.seed, EPOCHS=args.epochs, RUN_DIR=args.run_dir)
    stride = cfg.model.heads.output_stride
    try:
        lambdas = [float(v) for v in args.lambdas.split(",")] if args.lambdas else None
    except ValueError:
        raise ConfigError(f"--lambdas must be comma-separated numbers, got {args.lambdas!r}")
    rows = sweep(cfg, _load_split(args.data, stride), _load_split(args.val, stride), lambdas, args.ablations)
    table = Table(title="Sweep")
    for column in ("variant", "TAM", "RTM", "lambda", "val MAE", "val MSE"):
        table.add_column(column)
    for row in rows:
        table.add_row(row.name, str(row.tam), str(row.rtm), f"{row.lambda_rtm:g}",
                      f"{row.val_mae:.4f}", f"{row.val_mse:.4f}")
    Console().print(table)


def cmd_init_config(args):
    setup_wizard(args.path)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
    "init-config": cmd_init_config,
}


def main(argv=None) -> int:
    """Entry point of the crowdcount command."""

    argv = sys.argv[1:] if argv is None else argv

    # Check for version flag
    if argv and argv[0] == "--version":
        print(f"crowdcount v{get_version()}")
        return 0

    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        COMMANDS[args.command](args)
    except CrowdCountError as e:
        logger.debug("command failed", exc_info=True)
        print(themed('error', f"⚠️ {type(e).__name__}: {e}", bold=True), file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        print(themed('info', "\nTerminating...", bold=True), file=sys.stderr)
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())
