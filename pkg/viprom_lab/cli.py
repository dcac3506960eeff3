"""Command-line entry point.

Every subcommand resolves the run configuration (defaults < ``--config`` file
< flags), seeds all RNG streams from ``global.seed``, writes a resolved-config
snapshot beside its outputs and prints a JSON summary on stdout. Failures are
reported as JSON on stderr with a nonzero exit status.

Usage:
    viprom synth-corpus --out runs/corpus
    viprom pretrain-contrastive --data runs/corpus --out runs/contrastive
    viprom gen-pseudo-labels --data runs/corpus --out runs/labels
    viprom pretrain-supervised --ckpt runs/contrastive/encoder.pt \\
        --labels runs/labels/pseudo_labels.jsonl --data runs/corpus --out runs/supervised
    viprom bc-eval --ckpt runs/supervised/encoder.pt --tasks all --seeds 100,125,150
    viprom bench run --spec grid.yaml --workers 2 --out runs/bench
    viprom report --result runs/bench --format table-text

Note (RU): Интерфейс командной строки.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from viprom_lab.base import VipromModel
from viprom_lab.bench import RESULT_FILENAME, BenchResult, GridSpec, emit_report, run_grid
from viprom_lab.config import RunConfig, load_config, snapshot_config
from viprom_lab.contrastive import train_contrastive
from viprom_lab.dataset.manifest import build_manifest, load_narrations
from viprom_lab.dataset.store import MANIFEST_FILENAME, open_store
from viprom_lab.dataset.synthetic import generate_synthetic_corpus
from viprom_lab.encoder import init_encoder, load_checkpoint, save_checkpoint
from viprom_lab.enums import Architecture, ReportFormat, TaskId
from viprom_lab.exceptions import ConfigError, InvalidInputError, VipromError
from viprom_lab.imitation import run_protocol
from viprom_lab.supervised import (
    OracleTeacher,
    Teacher,
    generate_pseudo_labels,
    load_pseudo_labels,
    save_pseudo_labels,
    train_supervised,
    train_teacher,
)
from viprom_lab.toyenv import collect_demos, make_task, save_demos
from viprom_lab.utils.metrics import MetricsWriter
from viprom_lab.utils.optim import default_dtype
from viprom_lab.utils.seeding import derive_seed, seed_everything
from viprom_lab.version import __version__

logger = logging.getLogger(__name__)

CHECKPOINT_FILENAME = "encoder.pt"
METRICS_FILENAME = "metrics.jsonl"
LABELS_FILENAME = "pseudo_labels.jsonl"
REPORT_FILENAME = "eval_report.json"

HandlerFunc = Callable[[RunConfig, argparse.Namespace], Dict[str, Any]]
CommandDef = Dict[str, Any]

# ========== Helpers ==========


def serialize_result(obj: Any) -> Any:
    """JSON-compatible form of a handler result."""
    if obj is None:
        return None
    if isinstance(obj, VipromModel):
        return obj.to_dict()
    if isinstance(obj, (list, tuple)):
        return [serialize_result(item) for item in obj]
    if isinstance(obj, dict):
        return {k: serialize_result(v) for k, v in obj.items()}
    if isinstance(obj, (str, int, float, bool)):
        return obj
    return str(obj)


def print_result(result: Any, pretty: bool = False) -> None:
    indent = 2 if pretty else None
    print(json.dumps(serialize_result(result), ensure_ascii=False, indent=indent, sort_keys=True))


def error_exit(message: str, code: int = 1, key: Optional[str] = None) -> int:
    """Print the error as JSON on stderr and return ``code``."""
    payload: Dict[str, Any] = {"error": message}
    if key is not None:
        payload["key"] = key
    print(json.dumps(payload, ensure_ascii=False), file=sys.stderr)
    return code


def out_dir(config: RunConfig, args: argparse.Namespace, command: str) -> Path:
    """``--out`` or ``<out_root>/<command>``."""
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(config.global_.out_root) / command


def data_dir(config: RunConfig, args: argparse.Namespace) -> Path:
    path = getattr(args, "data", None) or config.global_.data_root
    if not path:
        raise ConfigError("No corpus directory: pass --data or set global.data_root", key="data")
    # --manifest may point at the manifest file inside the store
    if Path(path).is_file():
        return Path(path).parent
    return Path(path)


def relative(path: Path, config: RunConfig) -> str:
    """``path`` relative to ``out_root`` when it lies inside it."""
    try:
        return Path(path).resolve().relative_to(Path(config.global_.out_root).resolve()).as_posix()
    except ValueError:
        return Path(path).as_posix()


def parse_tasks(value: str) -> List[TaskId]:
    if value == "all":
        return list(TaskId)
    try:
        return [TaskId(v.strip()) for v in value.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"Unknown task in {value!r}", key="tasks") from e


def parse_seeds(value: str) -> List[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(
            f"Seeds must be comma-separated integers, got {value!r}", key="seeds"
        ) from e


# ========== Handlers ==========


def handle_build_manifest(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    target = out_dir(config, args, "manifest")
    narrations, durations = load_narrations(args.narrations)
    manifest = build_manifest(
        narrations,
        fps=config.dataset.fps,
        clip_duration_s=config.dataset.clip_duration_s,
        downsample_factor=config.dataset.downsample_factor,
        video_durations=durations,
    )
    path = manifest.save(target / MANIFEST_FILENAME)
    fingerprint = snapshot_config(config, target)
    return {
        "manifest": relative(path, config),
        "clips": len(manifest),
        "retained_frames": manifest.total_retained_frames,
        "skipped_narrations": manifest.metadata["skipped_narrations"],
        "config_fingerprint": fingerprint,
    }


def handle_synth_corpus(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    target = out_dir(config, args, "corpus")
    settings = config.dataset
    manifest, store = generate_synthetic_corpus(
        seed=derive_seed(config.global_.seed, "corpus"),
        n_clips=settings.n_clips,
        n_classes=settings.n_classes,
        fps=settings.fps,
        duration_s=settings.clip_duration_s,
        downsample_factor=settings.downsample_factor,
        image_hw=settings.image_hw,
        kind=settings.kind,
    )
    store.save(target, manifest)
    fingerprint = snapshot_config(config, target)
    return {
        "corpus": relative(target, config),
        "clips": len(manifest),
        "retained_frames": manifest.total_retained_frames,
        "manifest_fingerprint": manifest.fingerprint(),
        "config_fingerprint": fingerprint,
    }


def handle_pretrain_contrastive(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    target = out_dir(config, args, "contrastive")
    manifest, store = open_store(data_dir(config, args))
    seed = config.global_.seed
    scratch = init_encoder(config.encoder, derive_seed(seed, "encoder"))
    metrics = MetricsWriter(_fresh(target / METRICS_FILENAME))
    checkpoint = train_contrastive(
        manifest, store, config.contrastive, seed, checkpoint=scratch, metrics=metrics
    )
    path = save_checkpoint(checkpoint, target / CHECKPOINT_FILENAME)
    fingerprint = snapshot_config(config, target)
    return {
        "checkpoint": relative(path, config),
        "stage": checkpoint.stage.value,
        "params_digest": checkpoint.params_digest,
        "steps": len(metrics.records),
        "final_loss": metrics.series("loss")[-1] if metrics.records else None,
        "config_fingerprint": fingerprint,
    }


def handle_gen_pseudo_labels(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    target = out_dir(config, args, "pseudo-labels")
    manifest, store = open_store(data_dir(config, args))
    teacher: Teacher
    if args.teacher == "classifier":
        teacher = train_teacher(
            manifest,
            store,
            derive_seed(config.global_.seed, "teacher"),
            config.teacher,
            input_hw=config.encoder.input_hw,
        )
    else:
        teacher = OracleTeacher(manifest)
    records = generate_pseudo_labels(teacher, manifest, store, soft=args.soft)
    path = save_pseudo_labels(records, target / LABELS_FILENAME)
    fingerprint = snapshot_config(config, target)
    return {
        "labels": relative(path, config),
        "records": len(records),
        "teacher": teacher.teacher_id,
        "config_fingerprint": fingerprint,
    }


def handle_pretrain_supervised(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    target = out_dir(config, args, "supervised")
    manifest, store = open_store(data_dir(config, args))
    checkpoint = load_checkpoint(args.ckpt)
    labels = load_pseudo_labels(args.labels)
    metrics = MetricsWriter(_fresh(target / METRICS_FILENAME))
    result = train_supervised(
        checkpoint, manifest, store, labels, config.supervised, config.global_.seed, metrics
    )
    path = save_checkpoint(result, target / CHECKPOINT_FILENAME)
    fingerprint = snapshot_config(config, target)
    return {
        "checkpoint": relative(path, config),
        "stage": result.stage.value,
        "params_digest": result.params_digest,
        "steps": len(metrics.records),
        "config_fingerprint": fingerprint,
    }


def handle_collect_demos(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    task = make_task(args.task, image_hw=config.dataset.image_hw)
    demos = collect_demos(task, args.n, config.global_.seed)
    if args.out:
        path = Path(args.out)
    else:
        path = Path(config.global_.out_root) / "demos" / f"{task.task_id.value}.npz"
    save_demos(demos, path, task)
    fingerprint = snapshot_config(config, path.parent)
    return {
        "demos": relative(path, config),
        "task": task.task_id.value,
        "lengths": [len(d) for d in demos],
        "config_fingerprint": fingerprint,
    }


def handle_bc_eval(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    target = out_dir(config, args, "bc-eval")
    checkpoint = load_checkpoint(args.ckpt)
    hw = checkpoint.config.input_hw
    tasks = [make_task(t, image_hw=hw, proprio=args.proprio) for t in parse_tasks(args.tasks)]
    report = run_protocol(
        checkpoint,
        tasks,
        parse_seeds(args.seeds),
        config.imitation,
        out_dir=target,
        workers=args.workers,
        proprio=args.proprio,
    )
    path = report.save(target / REPORT_FILENAME)
    fingerprint = snapshot_config(config, target)
    return {
        "report": relative(path, config),
        "aggregate": report.aggregate,
        "cells": len(report.cells),
        "config_fingerprint": fingerprint,
    }


def handle_bench(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    target = out_dir(config, args, "bench")
    spec = GridSpec.load(args.spec) if args.spec else config.bench
    if args.workers is not None:
        spec.workers = args.workers
    if config.global_.toy:
        spec.protocol.toy = True
    result = run_grid(spec, out_dir=target)
    fingerprint = snapshot_config(config, target)
    return {
        "result": relative(target / RESULT_FILENAME, config),
        "rows": [{"cell_id": r.cell_id, "aggregate": r.aggregate} for r in result.rows],
        "config_fingerprint": fingerprint,
    }


def handle_report(config: RunConfig, args: argparse.Namespace) -> Dict[str, Any]:
    source = Path(args.result)
    if source.is_dir():
        source = source / RESULT_FILENAME
    result = BenchResult.load(source)
    target = Path(args.out) if args.out else source.parent
    paths = emit_report(result, args.format, target)
    return {"files": [relative(p, config) for p in paths]}


def _fresh(path: Path) -> Path:
    # a rerun replaces the previous log instead of appending to it
    if path.exists():
        path.unlink()
    return path


# ========== Commands ==========

COMMANDS: List[CommandDef] = [
    {
        "name": "build-manifest",
        "help": "Build a clip manifest from a narration annotation file",
        "args": [
            {
                "flags": ["--narrations", "--annotations"],
                "required": True,
                "help": "Annotation JSON",
            },
            {"flags": ["--fps"], "type": int, "config": "dataset.fps"},
            {"flags": ["--duration"], "type": float, "config": "dataset.clip_duration_s"},
            {"flags": ["--downsample"], "type": int, "config": "dataset.downsample_factor"},
            {"flags": ["--out"], "help": "Output directory"},
        ],
        "handler": handle_build_manifest,
    },
    {
        "name": "synth-corpus",
        "help": "Render the synthetic labeled clip corpus",
        "args": [
            {"flags": ["--n-clips", "--clips"], "type": int, "config": "dataset.n_clips"},
            {"flags": ["--n-classes", "--classes"], "type": int, "config": "dataset.n_classes"},
            {"flags": ["--kind"], "choices": ["clips", "static"], "config": "dataset.kind"},
            {"flags": ["--out"], "help": "Output store directory"},
        ],
        "handler": handle_synth_corpus,
    },
    {
        "name": "pretrain-contrastive",
        "help": "Momentum-contrastive pre-training of a scratch encoder",
        "args": [
            {"flags": ["--data", "--manifest"], "help": "Frame store (default global.data_root)"},
            {
                "flags": ["--architecture", "--arch"],
                "choices": [a.value for a in Architecture],
                "config": "encoder.architecture",
            },
            {"flags": ["--epochs"], "type": int, "config": "contrastive.epochs"},
            {"flags": ["--max-steps"], "type": int, "config": "contrastive.max_steps"},
            {
                "flags": ["--batch-size", "--batch"],
                "type": int,
                "config": "contrastive.batch_size",
            },
            {"flags": ["--tau"], "type": float, "config": "contrastive.temperature"},
            {"flags": ["--momentum"], "type": float, "config": "contrastive.momentum"},
            {"flags": ["--out"], "help": "Output directory"},
        ],
        "handler": handle_pretrain_contrastive,
    },
    {
        "name": "gen-pseudo-labels",
        "help": "Label every retained frame with a teacher",
        "args": [
            {"flags": ["--data", "--manifest"], "help": "Frame store (default global.data_root)"},
            {"flags": ["--teacher"], "choices": ["oracle", "classifier"], "default": "oracle"},
            {"flags": ["--soft"], "action": "store_true", "help": "Keep teacher distributions"},
            {"flags": ["--out"], "help": "Output directory"},
        ],
        "handler": handle_gen_pseudo_labels,
    },
    {
        "name": "pretrain-supervised",
        "help": "Joint pseudo-label and frame-order fine-tuning",
        "args": [
            {"flags": ["--ckpt"], "required": True, "help": "Contrastive checkpoint"},
            {"flags": ["--labels"], "required": True, "help": "Pseudo-label file"},
            {"flags": ["--data", "--manifest"], "help": "Frame store (default global.data_root)"},
            {
                "flags": ["--lambda"],
                "dest": "lambda_",
                "type": float,
                "config": "supervised.lambda",
            },
            {"flags": ["--n-frames"], "type": int, "config": "supervised.n_frames"},
            {"flags": ["--epochs"], "type": int, "config": "supervised.epochs"},
            {"flags": ["--max-steps"], "type": int, "config": "supervised.max_steps"},
            {"flags": ["--out"], "help": "Output directory"},
        ],
        "handler": handle_pretrain_supervised,
    },
    {
        "name": "collect-demos",
        "help": "Record scripted expert demonstrations",
        "args": [
            {"flags": ["--task"], "required": True, "choices": [t.value for t in TaskId]},
            {"flags": ["--n"], "type": int, "default": 5, "help": "Number of demos"},
            {"flags": ["--out"], "help": "Output .npz file"},
        ],
        "handler": handle_collect_demos,
    },
    {
        "name": "bc-eval",
        "help": "Behavior-cloning evaluation of a frozen encoder",
        "args": [
            {"flags": ["--ckpt"], "required": True, "help": "Encoder checkpoint"},
            {"flags": ["--tasks"], "default": "all", "help": "Comma-separated task ids or 'all'"},
            {"flags": ["--seeds"], "default": "100,125,150", "help": "Evaluation seeds"},
            {"flags": ["--steps"], "type": int, "config": "imitation.steps"},
            {"flags": ["--n-demos"], "type": int, "config": "imitation.n_demos"},
            {"flags": ["--workers"], "type": int, "default": 1},
            {"flags": ["--proprio"], "action": "store_true", "help": "Append effector position"},
            {"flags": ["--out"], "help": "Output directory"},
        ],
        "handler": handle_bc_eval,
    },
    {
        "name": "bench",
        "help": "Run a benchmark grid",
        "args": [
            {"flags": ["action"], "nargs": "?", "choices": ["run"], "default": "run"},
            {"flags": ["--spec"], "help": "Grid document (default: the bench config section)"},
            {"flags": ["--workers"], "type": int},
            {"flags": ["--out"], "help": "Output directory"},
        ],
        "handler": handle_bench,
    },
    {
        "name": "report",
        "help": "Render a bench result",
        "args": [
            {"flags": ["--result"], "required": True, "help": "Bench result file or directory"},
            {
                "flags": ["--format"],
                "default": ReportFormat.TABLE_TEXT.value,
                "help": "table-text, delimited or plot",
            },
            {"flags": ["--out"], "help": "Output directory (default: beside the result)"},
        ],
        "handler": handle_report,
    },
]


def _add_common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default: Any = argparse.SUPPRESS if suppress else None
    parser.add_argument("-c", "--config", default=default, help="YAML/JSON config file")
    parser.add_argument("--seed", type=int, default=default, help="Global seed")
    parser.add_argument("--out-root", default=default, help="Root of all outputs")
    parser.add_argument("--data-root", default=default, help="Default corpus directory")
    parser.add_argument(
        "--toy",
        action=argparse.BooleanOptionalAction,
        default=default,
        help="Desk-scale budgets",
    )
    parser.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=argparse.SUPPRESS if suppress else 0,
        help="-v for info, -vv for debug logging",
    )
    parser.add_argument(
        "-p",
        "--pretty",
        action="store_true",
        default=argparse.SUPPRESS if suppress else False,
        help="Indent the JSON output",
    )


def _add_arg(
    parser: argparse.ArgumentParser, arg_def: Dict[str, Any]
) -> Optional[Tuple[str, str]]:
    """Add one argument; returns ``(dest, config_key)`` for config overrides."""
    spec = arg_def.copy()
    flags = spec.pop("flags")
    config_key = spec.pop("config", None)
    action = parser.add_argument(*flags, **spec)
    if config_key is None:
        return None
    return action.dest, config_key


def build_parser() -> argparse.ArgumentParser:
    """Build the parser from :data:`COMMANDS`."""
    parser = argparse.ArgumentParser(
        prog="viprom",
        description="Desk-scale cascade visual pre-training laboratory",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    _add_common(parser, suppress=False)

    subparsers = parser.add_subparsers(dest="command", help="Available commands")
    for cmd in COMMANDS:
        sub = subparsers.add_parser(cmd["name"], help=cmd["help"])
        _add_common(sub, suppress=True)
        overrides = [_add_arg(sub, arg_def) for arg_def in cmd.get("args", [])]
        sub.set_defaults(
            handler=cmd["handler"], overrides=[o for o in overrides if o is not None]
        )

    return parser


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Dotted config keys set by flags (unset flags are skipped)."""
    overrides: Dict[str, Any] = {}
    for dest, key in (
        ("seed", "global.seed"),
        ("out_root", "global.out_root"),
        ("data_root", "global.data_root"),
        ("toy", "global.toy"),
    ):
        if getattr(args, dest, None) is not None:
            overrides[key] = getattr(args, dest)
    for dest, key in getattr(args, "overrides", []):
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    return overrides


def configure_logging(verbosity: int) -> None:
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity > 1:
        level = logging.DEBUG
    logging.basicConfig(
        level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True
    )


# ========== Entry point ==========


def parse_and_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Run one command and return its exit status.

    ``0`` on success, ``1`` on a library error, ``2`` on usage or configuration
    errors and ``130`` on interruption.

    Note (RU): Разбор аргументов и запуск команды.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    if not args.command:
        parser.print_help()
        return 2

    configure_logging(args.verbose)
    try:
        config = load_config(args.config, collect_overrides(args))
        seed_everything(config.global_.seed)
        logger.info(f"{args.command}: config {config.fingerprint()}")
        with default_dtype(config.global_.dtype):
            result = args.handler(config, args)
        print_result(result, pretty=args.pretty)
    except ConfigError as e:
        return error_exit(str(e), code=2, key=e.key)
    except InvalidInputError as e:
        return error_exit(str(e), code=2)
    except VipromError as e:
        return error_exit(str(e), code=1)
    except KeyboardInterrupt:
        return 130
    except Exception as e:
        logger.debug("Unhandled error", exc_info=True)
        return error_exit(f"{type(e).__name__}: {e}", code=1)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> None:
    """Console entry point."""
    sys.exit(parse_and_dispatch(argv))


if __name__ == "__main__":
    main()
