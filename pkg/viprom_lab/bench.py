"""Grid runner over corpus × architecture × method × demonstration count.

Each grid cell pre-trains an encoder with the stages its method needs and
then runs the behavior-cloning protocol. Stage checkpoints are cached by
fingerprint, so cells sharing a prefix (e.g. the contrastive stage) train it
once, also when cells run concurrently.

Example:
    >>> spec = GridSpec(methods=[Method.SCRATCH, Method.VIPROM_FULL])
    >>> result = run_grid(spec, out_dir="runs/bench")
    >>> emit_report(result, ReportFormat.TABLE_TEXT, "runs/bench")

Note (RU): Запуск сетки экспериментов и отчёты.
"""

import itertools
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import pandas as pd
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure
from typing_extensions import Self

from viprom_lab.base import VipromModel, de_section, dump_document, fingerprint
from viprom_lab.contrastive import ContrastiveConfig, train_contrastive
from viprom_lab.dataset.manifest import ClipManifest
from viprom_lab.dataset.store import FrameStore, open_store
from viprom_lab.dataset.synthetic import generate_synthetic_corpus
from viprom_lab.encoder import (
    Checkpoint,
    EncoderConfig,
    init_encoder,
    load_checkpoint,
    save_checkpoint,
)
from viprom_lab.enums import (
    Architecture,
    CorpusKind,
    Method,
    ReportFormat,
    Stage,
    TaskId,
)
from viprom_lab.exceptions import (
    BenchError,
    ConfigError,
    UnknownFormatError,
    VipromError,
)
from viprom_lab.imitation import DEFAULT_SEEDS, BCConfig, EvalReport, run_protocol
from viprom_lab.supervised import (
    JointConfig,
    OracleTeacher,
    PseudoLabelRecord,
    Teacher,
    generate_pseudo_labels,
    train_supervised,
    train_teacher,
)
from viprom_lab.toyenv import make_task
from viprom_lab.utils import model
from viprom_lab.utils.io import PathLike, read_document, read_json, write_text
from viprom_lab.utils.seeding import derive_seed
from viprom_lab.version import __version__

logger = logging.getLogger(__name__)

RESULT_FILENAME = "bench_result.json"
REPORT_BASENAME = "report"

_METHOD_STAGES = {
    Method.SCRATCH: (),
    Method.CONTRASTIVE: (Stage.CONTRASTIVE,),
    Method.CONTRASTIVE_VS: (Stage.CONTRASTIVE, Stage.SUPERVISED),
    Method.CONTRASTIVE_TD: (Stage.CONTRASTIVE, Stage.SUPERVISED),
    Method.VIPROM_FULL: (Stage.CONTRASTIVE, Stage.SUPERVISED),
}


@model
class CorpusSettings(VipromModel):
    """Synthetic corpus used for the ``clips`` and ``static`` corpus values.

    Note (RU): Параметры синтетического корпуса.
    """

    n_clips: int = 48
    n_classes: int = 6
    image_hw: Tuple[int, int] = (32, 32)
    fps: int = 30
    duration_s: float = 1.0
    downsample_factor: int = 10


@model
class GridSpec(VipromModel):
    """Declarative grid.

    Attributes:
        corpora: ``clips``/``static`` (synthetic) or names in ``corpus_roots``.
        architectures: Backbone families.
        methods: Pre-training recipes.
        demos: Demonstration counts per cell.
        seeds: Evaluation seeds.
        tasks: Toy tasks every cell is evaluated on.
        pretrain_seed: Seed of corpora and pre-training stages.
        teacher: ``oracle`` or ``classifier``.
        corpus_roots: Frame store directories of named corpora.
        corpus: Synthetic corpus settings.
        encoder: Encoder settings; ``architecture`` comes from the axis.
        contrastive: Contrastive stage settings.
        supervised: Supervised stage settings; the method sets the loss terms.
        protocol: Behavior-cloning settings; ``n_demos`` comes from the axis.
        workers: Cells run concurrently.

    Note (RU): Описание сетки экспериментов.
    """

    corpora: List[str] = field(default_factory=lambda: [CorpusKind.CLIPS.value])
    architectures: List[Architecture] = field(default_factory=lambda: [Architecture.TINY_CONV])
    methods: List[Method] = field(default_factory=lambda: list(Method))
    demos: List[int] = field(default_factory=lambda: [5])
    seeds: List[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    tasks: List[TaskId] = field(default_factory=lambda: list(TaskId))
    pretrain_seed: int = 0
    teacher: str = "oracle"
    corpus_roots: Dict[str, str] = field(default_factory=dict)
    corpus: CorpusSettings = field(default_factory=CorpusSettings)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    supervised: JointConfig = field(default_factory=JointConfig)
    protocol: BCConfig = field(default_factory=lambda: BCConfig(toy=True))
    workers: int = 1

    def __post_init__(self) -> None:
        for key in ("corpora", "architectures", "methods", "demos", "seeds", "tasks"):
            if not getattr(self, key):
                raise ConfigError(f"Grid axis {key} must not be empty", key=key)
        try:
            self.architectures = [Architecture(a) for a in self.architectures]
            self.methods = [Method(m) for m in self.methods]
            self.tasks = [TaskId(t) for t in self.tasks]
        except ValueError as e:
            raise ConfigError(f"Unsupported grid value: {e}", key="methods") from e
        if any(n < 1 for n in self.demos):
            raise ConfigError("Demonstration counts must be positive", key="demos")
        if self.teacher not in ("oracle", "classifier"):
            raise ConfigError(f"Unknown teacher {self.teacher!r}", key="teacher")
        self.corpora = [str(c) for c in self.corpora]
        self.corpus.image_hw = (int(self.corpus.image_hw[0]), int(self.corpus.image_hw[1]))

    @classmethod
    def de_json(cls, data: Any, strict: bool = False) -> Optional[Self]:
        if not cls.is_dict_model_data(data):
            return None

        data_dict: Dict[str, Any] = data.copy()
        nested = {
            "corpus": CorpusSettings,
            "encoder": EncoderConfig,
            "contrastive": ContrastiveConfig,
            "supervised": JointConfig,
            "protocol": BCConfig,
        }
        for key, klass in nested.items():
            if key in data_dict:
                data_dict[key] = de_section(klass, data_dict[key], key, strict)

        return cls(**cls.cleanup_data(data_dict, strict=strict))

    @classmethod
    def load(cls, path: PathLike) -> "GridSpec":
        """Read a grid from a YAML or JSON document (unknown keys rejected)."""
        spec = cls.de_json(read_document(path), strict=True)
        if spec is None:
            raise ConfigError(f"{path} is not a grid document")
        return spec

    def cells(self) -> List["GridCell"]:
        return [
            GridCell(corpus=c, architecture=a, method=m, n_demos=n)
            for c, a, m, n in itertools.product(
                self.corpora, self.architectures, self.methods, self.demos
            )
        ]


@model
class GridCell(VipromModel):
    corpus: str = CorpusKind.CLIPS.value
    architecture: Architecture = Architecture.TINY_CONV
    method: Method = Method.SCRATCH
    n_demos: int = 5

    def __post_init__(self) -> None:
        self.architecture = Architecture(self.architecture)
        self.method = Method(self.method)
        self._id_attrs = (self.corpus, self.architecture, self.method, self.n_demos)

    @property
    def cell_id(self) -> str:
        return f"{self.corpus}/{self.architecture.value}/{self.method.value}/demos={self.n_demos}"


@model
class BenchRow(VipromModel):
    """One grid cell result.

    Attributes:
        cell_id: ``corpus/architecture/method/demos=N``.
        corpus: Corpus axis value.
        architecture: Architecture axis value.
        method: Method axis value.
        n_demos: Demonstration axis value.
        aggregate: Protocol aggregate (mean best success).
        per_seed: Mean best success over tasks, per evaluation seed.
        encoder_fingerprint: Fingerprint of the evaluated encoder.
        cell_fingerprint: Hash of the cell and every setting that feeds it.

    Note (RU): Строка результата.
    """

    cell_id: str = ""
    corpus: str = ""
    architecture: Architecture = Architecture.TINY_CONV
    method: Method = Method.SCRATCH
    n_demos: int = 0
    aggregate: float = 0.0
    per_seed: Dict[str, float] = field(default_factory=dict)
    encoder_fingerprint: str = ""
    cell_fingerprint: str = ""

    def __post_init__(self) -> None:
        self.architecture = Architecture(self.architecture)
        self.method = Method(self.method)
        self._id_attrs = (self.cell_fingerprint,)


@model
class BenchResult(VipromModel):
    """Append-only grid results.

    Attributes:
        rows: One row per cell, in grid order.
        provenance: ``{code_version, spec_fingerprint}`` and cache counters.

    Note (RU): Результаты сетки.
    """

    rows: List[BenchRow] = field(default_factory=list)
    provenance: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def de_json(cls, data: Any, strict: bool = False) -> Optional[Self]:
        if not cls.is_dict_model_data(data):
            return None

        data_dict: Dict[str, Any] = data.copy()
        data_dict["rows"] = BenchRow.de_list(data_dict.get("rows"), strict=strict)

        return cls(**cls.cleanup_data(data_dict, strict=strict))

    def add(self, row: BenchRow) -> bool:
        """Append ``row`` unless a row with the same fingerprint exists."""
        if any(r.cell_fingerprint == row.cell_fingerprint for r in self.rows):
            return False
        self.rows.append(row)
        return True

    def row(self, cell_id: str) -> BenchRow:
        for row in self.rows:
            if row.cell_id == cell_id:
                return row
        raise KeyError(cell_id)

    def to_frame(self) -> pd.DataFrame:
        """One record per row; ``seed_<s>`` columns hold per-seed aggregates."""
        records = []
        for row in self.rows:
            record: Dict[str, Any] = {
                "cell_id": row.cell_id,
                "corpus": row.corpus,
                "architecture": row.architecture.value,
                "method": row.method.value,
                "n_demos": row.n_demos,
                "aggregate": row.aggregate,
            }
            for seed, value in sorted(row.per_seed.items(), key=lambda kv: int(kv[0])):
                record[f"seed_{seed}"] = value
            records.append(record)
        return pd.DataFrame.from_records(records)

    def save(self, path: PathLike) -> Path:
        return write_text(path, dump_document(self), error_cls=BenchError)

    @classmethod
    def load(cls, path: PathLike) -> "BenchResult":
        result = cls.de_json(read_json(path, error_cls=BenchError))
        if result is None:
            raise BenchError(f"{path} is not a bench result")
        return result


class StageCache:
    """Stage checkpoints keyed by fingerprint.

    Computation of one key is serialized by a per-key lock; different keys
    compute concurrently. With ``root`` the checkpoints are also written to
    ``<root>/<key>.pt`` and read back on later runs.

    Note (RU): Кэш чекпойнтов стадий.
    """

    def __init__(self, root: Optional[PathLike] = None) -> None:
        self.root = Path(root) if root is not None else None
        self._entries: Dict[str, Checkpoint] = {}
        self._locks: Dict[str, threading.Lock] = {}
        self._guard = threading.Lock()
        self.hits = 0
        self.misses = 0

    def _lock(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def path(self, key: str) -> Optional[Path]:
        return self.root / f"{key}.pt" if self.root is not None else None

    def get_or_compute(self, key: str, compute: Callable[[], Checkpoint]) -> Checkpoint:
        with self._lock(key):
            if key in self._entries:
                self._count(hit=True)
                logger.info(f"Stage cache hit {key}")
                return self._entries[key]
            path = self.path(key)
            if path is not None and path.exists():
                checkpoint = load_checkpoint(path)
                self._count(hit=True)
                logger.info(f"Stage cache hit {key} (disk)")
            else:
                checkpoint = compute()
                self._count(hit=False)
                if path is not None:
                    save_checkpoint(checkpoint, path)
            self._entries[key] = checkpoint
            return checkpoint

    def _count(self, hit: bool) -> None:
        with self._guard:
            if hit:
                self.hits += 1
            else:
                self.misses += 1


class _Corpus:
    def __init__(self, name: str, manifest: ClipManifest, store: FrameStore) -> None:
        self.name = name
        self.manifest = manifest
        self.store = store
        self.fingerprint = manifest.fingerprint()


class GridRunner:
    """Executes a :class:`GridSpec`.

    Note (RU): Исполнитель сетки.
    """

    def __init__(
        self,
        spec: GridSpec,
        out_dir: Optional[PathLike] = None,
        cache: Optional[StageCache] = None,
    ) -> None:
        self.spec = spec
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if cache is None:
            cache = StageCache(self.out_dir / "stages" if self.out_dir is not None else None)
        self.cache = cache
        self._corpora: Dict[str, _Corpus] = {}
        self._labels: Dict[str, List[PseudoLabelRecord]] = {}
        self._guard = threading.Lock()

    def corpus(self, cell: GridCell) -> _Corpus:
        """Resolve (and memoize) the corpus of ``cell``.

        Raises:
            BenchError: Naming the cell when the corpus is unknown or unreadable.
        """
        with self._guard:
            if cell.corpus in self._corpora:
                return self._corpora[cell.corpus]
            settings = self.spec.corpus
            if cell.corpus in (CorpusKind.CLIPS.value, CorpusKind.STATIC.value):
                manifest, store = generate_synthetic_corpus(
                    seed=derive_seed(self.spec.pretrain_seed, "corpus"),
                    n_clips=settings.n_clips,
                    n_classes=settings.n_classes,
                    fps=settings.fps,
                    duration_s=settings.duration_s,
                    downsample_factor=settings.downsample_factor,
                    image_hw=settings.image_hw,
                    kind=CorpusKind(cell.corpus),
                )
                corpus = _Corpus(cell.corpus, manifest, store)
            elif cell.corpus in self.spec.corpus_roots:
                try:
                    manifest, disk = open_store(self.spec.corpus_roots[cell.corpus])
                except VipromError as e:
                    raise BenchError(f"Cell {cell.cell_id}: cannot open corpus: {e}") from e
                corpus = _Corpus(cell.corpus, manifest, disk)
            else:
                raise BenchError(f"Cell {cell.cell_id}: unknown corpus {cell.corpus!r}")
            self._corpora[cell.corpus] = corpus
            return corpus

    def pseudo_labels(self, corpus: _Corpus) -> List[PseudoLabelRecord]:
        with self._guard:
            if corpus.name not in self._labels:
                seed = derive_seed(self.spec.pretrain_seed, "teacher", corpus.name)
                teacher: Teacher
                if self.spec.teacher == "classifier":
                    teacher = train_teacher(
                        corpus.manifest, corpus.store, seed, input_hw=self.spec.corpus.image_hw
                    )
                else:
                    teacher = OracleTeacher(corpus.manifest)
                self._labels[corpus.name] = generate_pseudo_labels(
                    teacher, corpus.manifest, corpus.store
                )
            return self._labels[corpus.name]

    def encoder_config(self, cell: GridCell) -> EncoderConfig:
        data = self.spec.encoder.to_dict()
        data.update(architecture=cell.architecture.value, input_hw=self.spec.corpus.image_hw)
        return EncoderConfig(**EncoderConfig.cleanup_data(data, strict=True))

    def joint_config(self, method: Method) -> JointConfig:
        data = self.spec.supervised.to_dict()
        if method == Method.CONTRASTIVE_VS:
            data["lambda"] = 0.0
        elif method == Method.CONTRASTIVE_TD:
            data["use_vs"] = False
        return JointConfig(**JointConfig.cleanup_data(data, strict=True))

    def pretrain(self, cell: GridCell) -> Checkpoint:
        """Run (or fetch from the cache) every stage of the cell's method."""
        corpus = self.corpus(cell)
        seed = self.spec.pretrain_seed
        encoder_config = self.encoder_config(cell)
        key = fingerprint({"stage": "scratch", "encoder": encoder_config.to_dict(), "seed": seed})
        checkpoint = self.cache.get_or_compute(
            key, lambda: init_encoder(encoder_config, derive_seed(seed, "encoder"))
        )
        stages = _METHOD_STAGES[cell.method]
        if Stage.CONTRASTIVE in stages:
            parent = checkpoint
            key = fingerprint(
                {
                    "stage": "contrastive",
                    "parent": key,
                    "corpus": corpus.fingerprint,
                    "config": self.spec.contrastive.to_dict(),
                    "seed": seed,
                }
            )
            checkpoint = self.cache.get_or_compute(
                key,
                lambda: train_contrastive(
                    corpus.manifest, corpus.store, self.spec.contrastive, seed, checkpoint=parent
                ),
            )
        if Stage.SUPERVISED in stages:
            parent = checkpoint
            joint = self.joint_config(cell.method)
            key = fingerprint(
                {
                    "stage": "supervised",
                    "parent": key,
                    "corpus": corpus.fingerprint,
                    "config": joint.to_dict(),
                    "teacher": self.spec.teacher,
                    "seed": seed,
                }
            )
            checkpoint = self.cache.get_or_compute(
                key,
                lambda: train_supervised(
                    parent,
                    corpus.manifest,
                    corpus.store,
                    self.pseudo_labels(corpus),
                    joint,
                    seed,
                ),
            )
        return checkpoint

    def cell_fingerprint(self, cell: GridCell) -> str:
        spec = self.spec.to_dict()
        for axis in ("corpora", "architectures", "methods", "demos", "workers"):
            spec.pop(axis)
        return fingerprint({"cell": cell.to_dict(), "spec": spec})

    def cell_dir(self, cell: GridCell) -> Optional[Path]:
        if self.out_dir is None:
            return None
        slug = cell.cell_id.replace("/", "__").replace("=", "-")
        return self.out_dir / "cells" / slug

    def run_cell(self, cell: GridCell) -> BenchRow:
        logger.info(f"Running cell {cell.cell_id}")
        checkpoint = self.pretrain(cell)
        protocol = self.spec.protocol.to_dict()
        protocol["n_demos"] = cell.n_demos
        config = BCConfig(**protocol)
        tasks = [make_task(t, image_hw=self.spec.corpus.image_hw) for t in self.spec.tasks]
        cell_dir = self.cell_dir(cell)
        report = run_protocol(checkpoint, tasks, self.spec.seeds, config, out_dir=cell_dir)
        if cell_dir is not None:
            report.save(cell_dir / "eval_report.json")
        return _row(cell, report, self.cell_fingerprint(cell))

    def run(self, previous: Optional[BenchResult] = None) -> BenchResult:
        cells = self.spec.cells()
        known = {r.cell_fingerprint: r for r in (previous.rows if previous else [])}
        pending = [c for c in cells if self.cell_fingerprint(c) not in known]
        if len(pending) < len(cells):
            logger.info(f"Reusing {len(cells) - len(pending)} finished cells")

        if self.spec.workers > 1 and len(pending) > 1:
            with ThreadPoolExecutor(max_workers=self.spec.workers) as pool:
                fresh = list(pool.map(self.run_cell, pending))
        else:
            fresh = [self.run_cell(c) for c in pending]
        for row in fresh:
            known[row.cell_fingerprint] = row

        result = BenchResult(
            rows=[],
            provenance={
                "code_version": __version__,
                "spec_fingerprint": self.spec.fingerprint(),
            },
        )
        for row in previous.rows if previous else []:
            result.add(row)
        for cell in cells:
            result.add(known[self.cell_fingerprint(cell)])
        return result


def _row(cell: GridCell, report: EvalReport, cell_fingerprint: str) -> BenchRow:
    return BenchRow(
        cell_id=cell.cell_id,
        corpus=cell.corpus,
        architecture=cell.architecture,
        method=cell.method,
        n_demos=cell.n_demos,
        aggregate=report.aggregate,
        per_seed={str(s): round(v, 6) for s, v in report.per_seed().items()},
        encoder_fingerprint=report.encoder_fingerprint,
        cell_fingerprint=cell_fingerprint,
    )


def run_grid(
    spec: GridSpec,
    out_dir: Optional[PathLike] = None,
    cache: Optional[StageCache] = None,
) -> BenchResult:
    """Run every cell of ``spec``.

    With ``out_dir`` the result is stored as ``bench_result.json`` (rows of an
    existing file are kept and cells whose fingerprint is already there are
    not rerun) together with per-cell eval reports and cached stage
    checkpoints.

    Raises:
        BenchError: When a cell's corpus cannot be resolved.

    Note (RU): Запуск всей сетки.
    """
    runner = GridRunner(spec, out_dir, cache)
    previous = None
    result_path = Path(out_dir) / RESULT_FILENAME if out_dir is not None else None
    if result_path is not None and result_path.exists():
        previous = BenchResult.load(result_path)
    result = runner.run(previous)
    if result_path is not None:
        result.save(result_path)
    logger.info(
        f"Grid done: {len(result.rows)} rows, stage cache {runner.cache.hits} hits / "
        f"{runner.cache.misses} misses"
    )
    return result


def _plot(result: BenchResult, path: Path) -> None:
    frame = result.to_frame()
    fig = Figure(figsize=(6, 4), dpi=100)
    FigureCanvasAgg(fig)
    ax = fig.subplots()
    for (corpus, architecture, method), group in frame.groupby(
        ["corpus", "architecture", "method"], sort=True
    ):
        group = group.sort_values("n_demos")
        ax.plot(
            group["n_demos"],
            group["aggregate"] * 100.0,
            marker="o",
            label=f"{method} ({corpus}, {architecture})",
        )
    ax.set_xlabel("demonstrations")
    ax.set_ylabel("success rate (%)")
    ax.set_ylim(0, 100)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})


def emit_report(result: BenchResult, fmt: Any, out_dir: PathLike) -> List[Path]:
    """Render ``result`` into ``out_dir``.

    ``table-text`` writes ``report.txt``, ``delimited`` writes ``report.csv``
    and ``plot`` writes ``report.png`` (success vs. demonstrations per method).

    Raises:
        UnknownFormatError: On an unsupported format.
        BenchError: On an empty result.

    Note (RU): Формирование отчёта.
    """
    try:
        report_format = ReportFormat(fmt)
    except ValueError as e:
        raise UnknownFormatError(f"Unknown report format {fmt!r}") from e
    if not result.rows:
        raise BenchError("Cannot report an empty result")

    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    if report_format == ReportFormat.TABLE_TEXT:
        text = result.to_frame().to_string(index=False, float_format=lambda v: f"{v:.4f}")
        return [write_text(root / f"{REPORT_BASENAME}.txt", text + "\n", error_cls=BenchError)]
    if report_format == ReportFormat.DELIMITED:
        text = result.to_frame().to_csv(index=False, lineterminator="\n")
        return [write_text(root / f"{REPORT_BASENAME}.csv", text, error_cls=BenchError)]

    path = root / f"{REPORT_BASENAME}.png"
    try:
        _plot(result, path)
    except OSError as e:
        raise BenchError(f"Cannot write {path}: {e}") from e
    return [path]


__all__ = [
    "BenchResult",
    "BenchRow",
    "CorpusSettings",
    "GridCell",
    "GridRunner",
    "GridSpec",
    "StageCache",
    "emit_report",
    "run_grid",
]
