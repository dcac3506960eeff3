"""viprom-lab - desk-scale laboratory for cascade visual pre-training.

Contrastive pre-training, joint pseudo-label and frame-order fine-tuning,
and a frozen-encoder behavior-cloning benchmark on toy manipulation tasks.

Example:
    >>> from viprom_lab import ContrastiveConfig, generate_synthetic_corpus, train_contrastive
    >>>
    >>> manifest, store = generate_synthetic_corpus(seed=0, n_clips=48, n_classes=6)
    >>> checkpoint = train_contrastive(manifest, store, ContrastiveConfig(epochs=5), seed=0)
    >>> report = run_protocol(checkpoint, ["reach", "push"], config=BCConfig(toy=True))
    >>> print(report.aggregate)

Note (RU): viprom-lab - лаборатория каскадного визуального предобучения.
"""

from viprom_lab.base import VipromModel, VipromObject, canonical_json, fingerprint
from viprom_lab.bench import BenchResult, GridSpec, StageCache, emit_report, run_grid
from viprom_lab.config import RunConfig, load_config, snapshot_config
from viprom_lab.contrastive import (
    ContrastiveConfig,
    info_nce,
    momentum_update,
    train_contrastive,
)
from viprom_lab.dataset import (
    ClipEntry,
    ClipManifest,
    FrameImage,
    MemoryFrameStore,
    NarrationRecord,
    build_manifest,
    generate_synthetic_corpus,
    open_store,
    sample_clip_frames,
)
from viprom_lab.encoder import (
    Checkpoint,
    EncoderConfig,
    FrozenEncoder,
    encode,
    freeze,
    init_encoder,
    load_checkpoint,
    save_checkpoint,
)
from viprom_lab.enums import (
    Architecture,
    CorpusKind,
    HeadKind,
    Method,
    OptimizerKind,
    Precision,
    ReportFormat,
    Stage,
    TaskId,
)
from viprom_lab.exceptions import (
    ActionDimensionError,
    BenchError,
    CheckpointError,
    ConfigError,
    ExpertFailureError,
    FingerprintMismatchError,
    FrameStoreError,
    InvalidInputError,
    ManifestError,
    MissingPseudoLabelError,
    PseudoLabelError,
    SamplingError,
    ShapeMismatchError,
    StageTransitionError,
    ToyEnvError,
    TrainingDivergedError,
    UnknownFormatError,
    VipromError,
)
from viprom_lab.imitation import BCConfig, EvalReport, Policy, bc_train, evaluate, run_protocol
from viprom_lab.supervised import (
    JointConfig,
    OracleTeacher,
    PseudoLabelRecord,
    generate_pseudo_labels,
    joint_loss,
    loss_td,
    loss_vs,
    make_order_sample,
    train_supervised,
)
from viprom_lab.toyenv import (
    Demonstration,
    EnvState,
    TaskSpec,
    collect_demos,
    reset,
    scripted_expert,
    step,
)
from viprom_lab.version import __version__

__author__ = "viprom-lab contributors"

__all__ = [
    "__version__",
    # Base
    "VipromModel",
    "VipromObject",
    "canonical_json",
    "fingerprint",
    # Enums
    "Architecture",
    "CorpusKind",
    "HeadKind",
    "Method",
    "OptimizerKind",
    "Precision",
    "ReportFormat",
    "Stage",
    "TaskId",
    # Exceptions
    "ActionDimensionError",
    "BenchError",
    "CheckpointError",
    "ConfigError",
    "ExpertFailureError",
    "FingerprintMismatchError",
    "FrameStoreError",
    "InvalidInputError",
    "ManifestError",
    "MissingPseudoLabelError",
    "PseudoLabelError",
    "SamplingError",
    "ShapeMismatchError",
    "StageTransitionError",
    "ToyEnvError",
    "TrainingDivergedError",
    "UnknownFormatError",
    "VipromError",
    # Dataset
    "ClipEntry",
    "ClipManifest",
    "FrameImage",
    "MemoryFrameStore",
    "NarrationRecord",
    "build_manifest",
    "generate_synthetic_corpus",
    "open_store",
    "sample_clip_frames",
    # Encoder
    "Checkpoint",
    "EncoderConfig",
    "FrozenEncoder",
    "encode",
    "freeze",
    "init_encoder",
    "load_checkpoint",
    "save_checkpoint",
    # Stages
    "ContrastiveConfig",
    "info_nce",
    "momentum_update",
    "train_contrastive",
    "JointConfig",
    "OracleTeacher",
    "PseudoLabelRecord",
    "generate_pseudo_labels",
    "joint_loss",
    "loss_td",
    "loss_vs",
    "make_order_sample",
    "train_supervised",
    # Environment and evaluation
    "Demonstration",
    "EnvState",
    "TaskSpec",
    "collect_demos",
    "reset",
    "scripted_expert",
    "step",
    "BCConfig",
    "EvalReport",
    "Policy",
    "bc_train",
    "evaluate",
    "run_protocol",
    # Grid and config
    "BenchResult",
    "GridSpec",
    "StageCache",
    "emit_report",
    "run_grid",
    "RunConfig",
    "load_config",
    "snapshot_config",
]
