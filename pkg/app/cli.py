"""``tcc`` command line: train | eval | flops | gradcheck | trace."""
import argparse
import json
import logging
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - Python 3.10 backport with identical API
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from pydantic import ValidationError

from app.core.config import settings
from app.core.exceptions import ConfigError, TccError
from app.core.logging import setup_logging
from app.models.config import RunConfig
from app.services.checkpoint import load_checkpoint, save_checkpoint
from app.services.complexity_analyzer import compare, compare_refinements, key_count_sweep, report_writer, variant_reports
from app.services.context_trace import export_context_trace, write_trace
from app.services.detector import DetectorModel
from app.services.evaluation import eval_recall
from app.services.gradcheck_suite import DEFAULT_SIZES, run_gradcheck
from app.services.io_utils import atomic_write_text
from app.services.synth_data import benchmark_scenes, gen_scene
from app.services.trainer import Trainer

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.tcc"
METRICS_NAME = "metrics.csv"


def _field_path(loc: Sequence[Any]) -> str:
    return ".".join(str(part) for part in loc) or "config"


def parse_config(data: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise ConfigError(first["msg"], location=_field_path(first["loc"]))


def load_config(path: Optional[Path], seed: Optional[int] = None) -> RunConfig:
    """Read a TOML run config; ``seed`` overrides every seed it contains."""
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            data = tomllib.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError("config file not found", location=str(path))
        except UnicodeDecodeError:
            raise ConfigError("config file is not UTF-8", location=str(path))
        except tomllib.TOMLDecodeError as exc:
            # tomllib reports "(at line N, column M)"
            raise ConfigError(str(exc), location=str(path))
    config = parse_config(data)
    if seed is not None:
        merged = config.model_dump()
        merged["seed"] = seed
        merged["backbone"]["seed"] = seed
        merged["train"]["seed"] = seed
        config = parse_config(merged)
    return config


def _out_dir(args: argparse.Namespace, config: RunConfig) -> Path:
    out = Path(args.out or config.output_dir or settings.get_output_dir())
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model(config: RunConfig, checkpoint: Optional[str]) -> DetectorModel:
    model = DetectorModel(config)
    if checkpoint:
        load_checkpoint(model, Path(checkpoint))
    return model


def cmd_train(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.seed)
    out = _out_dir(args, config)
    model = _model(config, args.checkpoint)
    scenes = benchmark_scenes(config.scenes, config.train.num_scenes)
    result = Trainer(model, scenes, config.train).fit(metrics_path=out / METRICS_NAME)
    save_checkpoint(model, out / CHECKPOINT_NAME)
    if result.losses:
        print(f"trained {len(result.losses)} steps: loss {result.initial_loss:.6f} -> {result.final_loss:.6f}")
    else:
        print("no training steps requested; saved initial parameters")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.seed)
    out = _out_dir(args, config)
    model = _model(config, args.checkpoint)
    scenes = benchmark_scenes(config.scenes, args.scenes or config.train.num_scenes)
    recall = eval_recall(model, scenes, config.train.score_threshold, config.train.radius_cells)
    atomic_write_text(out / "eval.json", json.dumps({"recall": recall, "scenes": len(scenes)}, indent=2) + "\n")
    print(f"recall {recall:.4f} over {len(scenes)} scenes")
    return 0


def cmd_flops(args: argparse.Namespace) -> int:
    config = load_config(args.config, args.seed)
    out = _out_dir(args, config)
    placement = config.placement
    reports = variant_reports(config.flops, config.tcc, placement)
    for name, report in reports.items():
        report_writer.write(out, f"flops_{name}", report)
    comparison = compare_refinements(config.flops, config.tcc, placement)
    sweep = key_count_sweep(config.flops, config.tcc, placement)
    atomic_write_text(out / "flops_comparison.json", comparison.model_dump_json(indent=2) + "\n")
    atomic_write_text(
        out / "flops_key_sweep.json",
        json.dumps([row.model_dump() for row in sweep], indent=2) + "\n",
    )
    text = report_writer.render_comparison(comparison, sweep)
    atomic_write_text(out / "flops_comparison.txt", text)
    atomic_write_text(
        out / "flops_none_vs_none.json",
        compare(reports["none"], reports["none"]).model_dump_json(indent=2) + "\n",
    )
    print(text, end="")
    return 0


def parse_size(text: str) -> Tuple[int, int, int, int]:
    """``NxCxHxW`` with four positive extents, e.g. ``1x4x5x5``."""
    try:
        extents = tuple(int(part) for part in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size '{text}' is not of the form NxCxHxW")
    if len(extents) != 4 or any(extent < 1 for extent in extents):
        raise argparse.ArgumentTypeError(f"size '{text}' needs four positive extents NxCxHxW")
    n, c, h, w = extents
    return n, c, h, w


def cmd_gradcheck(args: argparse.Namespace) -> int:
    seed = settings.DEFAULT_SEED if args.seed is None else args.seed
    rows = run_gradcheck(seed=seed, sizes=args.sizes or DEFAULT_SIZES)
    width = max(len(row.name) for row in rows)
    for row in rows:
        status = "ok" if row.passed else "FAIL"
        shape = "x".join(map(str, row.shape))
        print(f"{row.name:<{width}}  {shape:<10}  {row.max_rel_error:.3e}  {status}")
    failed = [row for row in rows if not row.passed]
    if failed:
        logger.error(f"{len(failed)} of {len(rows)} gradient checks failed")
        return 1
    return 0


def cmd_trace(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    out = _out_dir(args, config)
    model = _model(config, args.checkpoint)
    seed = config.seed if args.seed is None else args.seed
    records = export_context_trace(model, gen_scene(seed, config.scenes), deepest_only=args.deepest_only)
    write_trace(out / "trace.jsonl", records)
    print(f"{len(records)} trace records")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tcc", description="Context-condensation feature pyramid toolkit.")
    parser.add_argument("--log-level", default=None, help="logging level (default from TCC_LOG_LEVEL)")
    commands = parser.add_subparsers(dest="command", required=True)

    def add(name: str, handler, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--config", type=Path, default=None, help="TOML run configuration")
        sub.add_argument("--out", default=None, help="output directory")
        sub.add_argument("--seed", type=int, default=None, help="override every seed")
        sub.set_defaults(handler=handler)
        return sub

    add("train", cmd_train, "train on the synthetic benchmark").add_argument("--checkpoint", default=None)
    evaluate = add("eval", cmd_eval, "recall on the synthetic benchmark")
    evaluate.add_argument("--checkpoint", default=None)
    evaluate.add_argument("--scenes", type=int, default=None, help="number of benchmark scenes")
    add("flops", cmd_flops, "analytical FLOPs reports and refinement deltas")
    add("gradcheck", cmd_gradcheck, "finite-difference checks of every primitive").add_argument(
        "--sizes", type=parse_size, nargs="+", default=None, metavar="NxCxHxW",
        help="input shapes to check at (default: three built-in shapes)",
    )
    trace = add("trace", cmd_trace, "export the context trace of one scene")
    trace.add_argument("--checkpoint", default=None)
    trace.add_argument("--deepest-only", action="store_true", help="last round of the deepest level only")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except TccError as exc:
        logger.error(f"{args.command} failed: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
