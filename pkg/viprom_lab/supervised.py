"""Supervised fine-tuning with pseudo-labels and frame-order prediction.

Two heads sit on the encoder: the semantics head ``h1`` predicts the teacher's
class of a frame, the order head ``h2`` predicts the original position of each
frame of a shuffled clip sample. The stage minimizes
``L = L_vs + λ · L_td``.

Note (RU): Дообучение с псевдо-метками и предсказанием порядка кадров.
"""

import logging
import math
from dataclasses import field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union, cast

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from viprom_lab.base import VipromModel, canonical_json
from viprom_lab.dataset.manifest import ClipEntry, ClipManifest, FrameRef
from viprom_lab.dataset.sampling import frames_to_tensor, iterate_batches, sample_clip_frames
from viprom_lab.dataset.store import FrameImage, FrameStore
from viprom_lab.encoder import (
    Checkpoint,
    EncoderConfig,
    FrozenEncoder,
    Head,
    build_head,
    check_frames,
    freeze,
    freeze_leading,
    init_encoder,
)
from viprom_lab.enums import HeadKind, OptimizerKind, Stage
from viprom_lab.exceptions import (
    ConfigError,
    InvalidInputError,
    MissingPseudoLabelError,
    PseudoLabelError,
    ShapeMismatchError,
    StageTransitionError,
)
from viprom_lab.utils import model
from viprom_lab.utils.io import PathLike, read_jsonl, write_text
from viprom_lab.utils.metrics import MetricsRecord, MetricsWriter
from viprom_lab.utils.optim import check_finite, make_optimizer
from viprom_lab.utils.seeding import derive_seed, make_generator, seeded

logger = logging.getLogger(__name__)

Scalar = Union[float, torch.Tensor]


@model
class PseudoLabelRecord(VipromModel):
    """Teacher label of one retained frame.

    Attributes:
        clip_id: Clip of the frame.
        frame_index: Frame index within the source video.
        label: Argmax class of the teacher.
        confidence: Teacher probability of ``label``.
        teacher_id: Teacher that produced the label.
        probs: Full teacher distribution, kept only for soft distillation.

    Note (RU): Псевдо-метка кадра.
    """

    clip_id: str = ""
    frame_index: int = 0
    label: int = 0
    confidence: float = 0.0
    teacher_id: str = ""
    probs: Optional[List[float]] = None

    def __post_init__(self) -> None:
        self._id_attrs = (self.clip_id, self.frame_index)

    @property
    def frame_ref(self) -> FrameRef:
        return self.clip_id, self.frame_index

    def to_dict(self) -> Dict[str, Any]:
        data = super().to_dict()
        if data.get("probs") is None:
            data.pop("probs", None)
        return data


class Teacher:
    """Source of class scores for frames.

    Attributes:
        teacher_id: Identifier written into pseudo-label records.
        n_classes: Number of classes.
        input_hw: Frame size the teacher accepts, ``None`` for any.

    Note (RU): Учитель, выдающий оценки классов.
    """

    teacher_id: str = "teacher"
    n_classes: int = 0
    input_hw: Optional[Tuple[int, int]] = None

    def scores(self, frames: Sequence[FrameImage]) -> torch.Tensor:
        """``len(frames) × n_classes`` class logits."""
        raise NotImplementedError

    def check_frames(self, frames: Sequence[FrameImage]) -> None:
        if self.input_hw is None:
            return
        expected = (*self.input_hw, 3)
        for frame in frames:
            if tuple(frame.pixels.shape) != expected:
                raise ShapeMismatchError(
                    f"Teacher {self.teacher_id} cannot label frame {frame.source}",
                    expected=expected,
                    actual=tuple(frame.pixels.shape),
                )


class OracleTeacher(Teacher):
    """Fixture teacher returning the synthetic ground truth (``label_hint``).

    Note (RU): Учитель-оракул по истинным меткам синтетического корпуса.
    """

    def __init__(self, manifest: ClipManifest, n_classes: Optional[int] = None) -> None:
        self.labels: Dict[str, int] = {}
        for clip in manifest.clips:
            if clip.label_hint is None:
                raise PseudoLabelError(f"Clip {clip.clip_id} has no label_hint")
            self.labels[clip.clip_id] = clip.label_hint
        self.n_classes = int(
            n_classes
            or manifest.metadata.get("n_classes")
            or max(self.labels.values(), default=0) + 1
        )
        self.teacher_id = "oracle"

    def scores(self, frames: Sequence[FrameImage]) -> torch.Tensor:
        try:
            labels = torch.as_tensor([self.labels[f.source[0]] for f in frames])
        except KeyError as e:
            raise PseudoLabelError(f"Oracle teacher does not know clip {e.args[0]}") from e
        return F.one_hot(labels, self.n_classes).to(torch.get_default_dtype()) * 10.0


class ClassifierTeacher(Teacher):
    """Frozen encoder with a classification head.

    Note (RU): Учитель-классификатор.
    """

    def __init__(
        self, encoder: FrozenEncoder, head: Head, teacher_id: Optional[str] = None
    ) -> None:
        self.encoder = encoder
        self.head = head.eval()
        self.head.requires_grad_(False)
        self.n_classes = head.out_features
        self.input_hw = encoder.config.input_hw
        self.teacher_id = teacher_id or f"classifier-{encoder.fingerprint[:8]}"

    def scores(self, frames: Sequence[FrameImage]) -> torch.Tensor:
        with torch.no_grad():
            return self.head(self.encoder.encode(frames))


@model
class TeacherConfig(VipromModel):
    """Desk-scale teacher training.

    Note (RU): Параметры обучения учителя.
    """

    steps: int = 400
    batch_size: int = 64
    lr: float = 3e-3
    embedding_dim: int = 64
    width: int = 16


def train_teacher(
    manifest: ClipManifest,
    store: FrameStore,
    seed: int,
    config: Optional[TeacherConfig] = None,
    input_hw: Tuple[int, int] = (32, 32),
) -> ClassifierTeacher:
    """Train a small classifier on the ``label_hint`` of retained frames.

    Raises:
        PseudoLabelError: When a clip has no ``label_hint``.

    Note (RU): Обучение настольного учителя.
    """
    config = config or TeacherConfig()
    if config.steps < 1:
        raise ConfigError(f"Teacher needs at least one step, got {config.steps}", key="steps")
    oracle = OracleTeacher(manifest)
    refs = manifest.frame_refs()
    if not refs:
        raise PseudoLabelError("Cannot train a teacher on an empty manifest")

    encoder_config = EncoderConfig(
        embedding_dim=config.embedding_dim, input_hw=input_hw, width=config.width
    )
    encoder = init_encoder(encoder_config, derive_seed(seed, "teacher", "encoder")).build_module()
    with seeded(derive_seed(seed, "teacher", "head")):
        head = build_head(HeadKind.CLASSIFIER_SEMANTICS, config.embedding_dim, oracle.n_classes)
    optimizer = torch.optim.Adam([*encoder.parameters(), *head.parameters()], lr=config.lr)

    step = 0
    epoch = 0
    while step < config.steps:
        batch_seed = derive_seed(seed, "teacher", "epoch", epoch)
        for frames in iterate_batches(refs, store, config.batch_size, seed=batch_seed):
            labels = torch.as_tensor([oracle.labels[f.source[0]] for f in frames])
            loss = F.cross_entropy(head(encoder(frames_to_tensor(frames))), labels)
            check_finite(loss, step)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            step += 1
            if step >= config.steps:
                break
        epoch += 1
    logger.info(f"Teacher trained for {step} steps, last loss {loss.detach().item():.4f}")

    checkpoint = Checkpoint(params=_state(encoder), config=encoder_config, stage=Stage.SUPERVISED)
    return ClassifierTeacher(freeze(checkpoint), head)


def _state(module: nn.Module) -> Dict[str, torch.Tensor]:
    return {k: v.detach().cpu().clone() for k, v in module.state_dict().items()}


def generate_pseudo_labels(
    teacher: Teacher,
    manifest: ClipManifest,
    store: FrameStore,
    batch_size: int = 256,
    soft: bool = False,
) -> List[PseudoLabelRecord]:
    """One record per retained frame, in manifest order.

    Args:
        teacher: Label source.
        manifest: Frames to label.
        store: Frame store of the manifest.
        batch_size: Frames scored per teacher call.
        soft: Keep the full teacher distribution in ``probs``.

    Raises:
        ShapeMismatchError: When frames do not fit the teacher.

    Note (RU): Генерация псевдо-меток.
    """
    refs = manifest.frame_refs()
    records: List[PseudoLabelRecord] = []
    for start in range(0, len(refs), batch_size):
        frames = store.load_many(refs[start : start + batch_size])
        teacher.check_frames(frames)
        probs = torch.softmax(teacher.scores(frames).to(torch.float64), dim=1)
        confidence, labels = probs.max(dim=1)
        for i, frame in enumerate(frames):
            records.append(
                PseudoLabelRecord(
                    clip_id=frame.source[0],
                    frame_index=frame.source[1],
                    label=int(labels[i]),
                    confidence=round(float(confidence[i]), 6),
                    teacher_id=teacher.teacher_id,
                    probs=[round(float(p), 6) for p in probs[i]] if soft else None,
                )
            )
    logger.info(f"Teacher {teacher.teacher_id} labeled {len(records)} frames")
    return records


def save_pseudo_labels(records: Sequence[PseudoLabelRecord], path: PathLike) -> Path:
    """Write records as canonical JSON lines."""
    text = "".join(canonical_json(r.to_dict()) + "\n" for r in records)
    return write_text(path, text, error_cls=PseudoLabelError)


def load_pseudo_labels(path: PathLike) -> List[PseudoLabelRecord]:
    """Read a pseudo-label file.

    Raises:
        PseudoLabelError: On malformed lines or duplicate frames.
    """
    records: List[PseudoLabelRecord] = []
    seen = set()
    for line in read_jsonl(path, error_cls=PseudoLabelError):
        try:
            record = PseudoLabelRecord.de_json(line, strict=True)
        except (ConfigError, TypeError) as e:
            raise PseudoLabelError(f"{path}: bad pseudo-label record: {e}") from e
        if record is None:
            continue
        if record.frame_ref in seen:
            raise PseudoLabelError(f"{path}: duplicate record for frame {record.frame_ref}")
        seen.add(record.frame_ref)
        records.append(record)
    return records


def index_pseudo_labels(records: Sequence[PseudoLabelRecord]) -> Dict[FrameRef, PseudoLabelRecord]:
    index: Dict[FrameRef, PseudoLabelRecord] = {}
    for record in records:
        if record.frame_ref in index:
            raise PseudoLabelError(f"Duplicate pseudo-label for frame {record.frame_ref}")
        index[record.frame_ref] = record
    return index


def loss_vs(
    student_logits: torch.Tensor, labels: Union[Sequence[int], torch.Tensor]
) -> torch.Tensor:
    """Mean cross-entropy of student logits against teacher labels.

    Raises:
        InvalidInputError: When ``C < 2``, shapes disagree or a label is not
            a class id.

    Note (RU): Функция потерь визуальной семантики.
    """
    if student_logits.dim() != 2 or student_logits.shape[1] < 2:
        raise InvalidInputError(
            f"student_logits must be B×C with C >= 2, got {tuple(student_logits.shape)}"
        )
    targets = torch.as_tensor(labels, dtype=torch.long, device=student_logits.device)
    if targets.shape != (student_logits.shape[0],):
        raise InvalidInputError(
            f"Expected {student_logits.shape[0]} labels, got {tuple(targets.shape)}"
        )
    n_classes = student_logits.shape[1]
    if bool((targets < 0).any()) or bool((targets >= n_classes).any()):
        raise InvalidInputError(f"Labels must be class ids in [0, {n_classes})")
    return F.cross_entropy(student_logits, targets)


def loss_vs_soft(student_logits: torch.Tensor, teacher_probs: torch.Tensor) -> torch.Tensor:
    """Cross-entropy against the full teacher distribution (soft distillation)."""
    if student_logits.shape != teacher_probs.shape:
        raise InvalidInputError(
            f"Logits {tuple(student_logits.shape)} and teacher probabilities "
            f"{tuple(teacher_probs.shape)} differ"
        )
    log_probs = F.log_softmax(student_logits, dim=1)
    return -(teacher_probs.to(log_probs.dtype) * log_probs).sum(dim=1).mean()


def permutation_from_seed(n: int, seed: int) -> List[int]:
    """Permutation of ``range(n)`` with Lehmer rank ``seed mod n!``.

    Seed 0 gives the identity; any ``n!`` consecutive seeds give every
    permutation once.
    """
    rank = int(seed) % math.factorial(n)
    remaining = list(range(n))
    permutation = []
    for position in range(n - 1, -1, -1):
        index, rank = divmod(rank, math.factorial(position))
        permutation.append(remaining.pop(index))
    return permutation


def is_permutation(labels: Sequence[int], n: int) -> bool:
    return sorted(int(x) for x in labels) == list(range(n))


@model
class OrderSample(VipromModel):
    """Frames of one clip in shuffled presentation order.

    Attributes:
        frames: ``N`` frames as presented.
        labels: ``labels[j]`` is the original temporal position of ``frames[j]``.
        permutation_seed: Seed that chose the shuffle.

    Note (RU): Перемешанная последовательность кадров.
    """

    frames: List[FrameImage] = field(default_factory=list)
    labels: List[int] = field(default_factory=list)
    permutation_seed: int = 0

    def __post_init__(self) -> None:
        n = len(self.labels)
        if len(self.frames) != n or not is_permutation(self.labels, n):
            raise InvalidInputError(f"Order labels must be a permutation, got {self.labels}")

    def ordered(self) -> List[FrameImage]:
        """Frames restored to temporal order."""
        restored: List[Optional[FrameImage]] = [None] * len(self.frames)
        for frame, position in zip(self.frames, self.labels):
            restored[position] = frame
        return [f for f in restored if f is not None]


def make_order_sample(clip: ClipEntry, store: FrameStore, n: int, seed: int) -> OrderSample:
    """Sample ``n`` frames of ``clip`` and shuffle them by a seeded permutation.

    Raises:
        SamplingError: When the clip has fewer than ``n`` frames.

    Note (RU): Построение примера для задачи порядка кадров.
    """
    frames = sample_clip_frames(clip, store, n)
    permutation = permutation_from_seed(n, seed)
    return OrderSample(
        frames=[frames[p] for p in permutation],
        labels=permutation,
        permutation_seed=seed,
    )


def loss_td(
    order_logits: torch.Tensor, labels: Union[Sequence[int], Sequence[Sequence[int]], torch.Tensor]
) -> torch.Tensor:
    """Mean per-frame cross-entropy of predicted original positions.

    Args:
        order_logits: ``N×N`` logits of one sample or ``S×N×N`` for a batch.
        labels: Original positions, ``N`` or ``S×N``; each row a permutation.

    Raises:
        InvalidInputError: On non-square logits or non-permutation labels.

    Note (RU): Функция потерь временной динамики.
    """
    logits = order_logits if order_logits.dim() == 3 else order_logits.unsqueeze(0)
    if logits.dim() != 3 or logits.shape[1] != logits.shape[2]:
        raise InvalidInputError(f"order_logits must be square, got {tuple(order_logits.shape)}")
    n = logits.shape[1]
    targets = torch.as_tensor(labels, dtype=torch.long, device=logits.device).reshape(-1, n)
    if targets.shape[0] != logits.shape[0]:
        raise InvalidInputError(
            f"Expected {logits.shape[0]} label rows, got {targets.shape[0]}"
        )
    for row in targets.tolist():
        if not is_permutation(row, n):
            raise InvalidInputError(f"Order labels must be a permutation of 0..{n - 1}, got {row}")
    return F.cross_entropy(logits.reshape(-1, n), targets.reshape(-1))


def joint_loss(l_vs: Scalar, l_td: Scalar, lambda_: float) -> Scalar:
    """``l_vs + λ · l_td``.

    Raises:
        InvalidInputError: When ``λ < 0``.
    """
    if lambda_ < 0:
        raise InvalidInputError(f"lambda must be non-negative, got {lambda_}")
    return l_vs + lambda_ * l_td


@model
class JointConfig(VipromModel):
    """Stage-2 hyperparameters.

    Attributes:
        lambda_: Weight of the order loss (``lambda`` in files).
        n_frames: Frames per order sample.
        teacher_ref: ``oracle``, ``classifier`` or a path to a label file.
        epochs: Passes over the retained frames.
        batch_size: Frames per semantics batch.
        order_batch: Order samples per step.
        lr: Learning rate.
        weight_decay: Optimizer weight decay.
        optimizer: Optimizer family.
        hidden_dim: Hidden width of both heads.
        freeze_depth: Leading backbone stages kept fixed.
        allow_scratch: Accept a scratch encoder (ablation).
        soft_labels: Distill the full teacher distribution.
        single_frame_order: Order head sees one frame only (ablation).
        use_vs: Keep the pseudo-label term; off trains the order task alone (ablation).
        n_classes: Class count; inferred from the labels when unset.
        max_steps: Optional cap on optimizer steps.

    Note (RU): Гиперпараметры совместного обучения.
    """

    lambda_: float = 0.33
    n_frames: int = 5
    teacher_ref: str = "oracle"
    epochs: int = 10
    batch_size: int = 32
    order_batch: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.0
    optimizer: OptimizerKind = OptimizerKind.ADAM
    hidden_dim: int = 128
    freeze_depth: int = 0
    allow_scratch: bool = False
    soft_labels: bool = False
    single_frame_order: bool = False
    use_vs: bool = True
    n_classes: Optional[int] = None
    max_steps: Optional[int] = None

    def __post_init__(self) -> None:
        self.optimizer = OptimizerKind(self.optimizer)
        if self.lambda_ < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lambda_}", key="lambda")
        if self.n_frames < 2:
            raise ConfigError(f"n_frames must be >= 2, got {self.n_frames}", key="n_frames")
        if self.batch_size < 1 or self.order_batch < 1:
            raise ConfigError("batch sizes must be positive", key="batch_size")


class OrderClassifier(nn.Module):
    """Order head over per-frame features.

    Each frame is classified from ``[f_j, mean_k f_k]`` (or ``f_j`` alone with
    ``single_frame``) into one of ``N`` original positions.

    Note (RU): Голова порядка кадров.
    """

    def __init__(
        self, embedding_dim: int, n_frames: int, hidden_dim: int, single_frame: bool
    ) -> None:
        super().__init__()
        self.single_frame = single_frame
        in_dim = embedding_dim if single_frame else 2 * embedding_dim
        self.head = build_head(HeadKind.CLASSIFIER_ORDER, in_dim, n_frames, hidden_dim)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """``S×N×d`` features to ``S×N×N`` logits."""
        if not self.single_frame:
            context = features.mean(dim=1, keepdim=True).expand_as(features)
            features = torch.cat([features, context], dim=-1)
        return self.head(features)


@model
class SupervisedFit(VipromModel):
    """Result of stage 2: the encoder checkpoint plus the trained heads.

    Note (RU): Результат совместного обучения.
    """

    checkpoint: Checkpoint = None  # type: ignore[assignment]
    semantics_head: Head = None  # type: ignore[assignment]
    order_head: OrderClassifier = None  # type: ignore[assignment]
    config: JointConfig = field(default_factory=JointConfig)
    trace: List[MetricsRecord] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "checkpoint": self.checkpoint.to_dict(),
            "config": self.config.to_dict(),
            "steps": len(self.trace),
        }


def _order_logits(
    encoder: nn.Module, order_head: OrderClassifier, samples: Sequence[OrderSample]
) -> torch.Tensor:
    n = len(samples[0].frames)
    images = frames_to_tensor([f for s in samples for f in s.frames])
    features = encoder(images).reshape(len(samples), n, -1)
    return order_head(features)


def _draw_order_samples(
    clips: Sequence[ClipEntry], store: FrameStore, n: int, count: int, seed: int
) -> List[OrderSample]:
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(clips), size=count, replace=len(clips) < count)
    perm_seeds = rng.integers(0, 2**31, size=count)
    return [make_order_sample(clips[int(i)], store, n, int(s)) for i, s in zip(picks, perm_seeds)]


def fit_supervised(
    checkpoint: Checkpoint,
    manifest: ClipManifest,
    store: FrameStore,
    pseudo_labels: Sequence[PseudoLabelRecord],
    config: JointConfig,
    seed: int,
    metrics: Optional[MetricsWriter] = None,
) -> SupervisedFit:
    """Joint pseudo-label and frame-order training of encoder and both heads.

    Args:
        checkpoint: Contrastive (or, with ``allow_scratch``, scratch) encoder.
        manifest: Training clips.
        store: Frame store.
        pseudo_labels: One record per retained frame of ``manifest``.
        config: Stage hyperparameters.
        seed: Global seed.
        metrics: Receives ``{loss, l_vs, l_td, lr}`` per step.

    Raises:
        StageTransitionError: On a checkpoint from the wrong stage.
        MissingPseudoLabelError: When a retained frame has no record.
        SamplingError: When a clip is shorter than ``n_frames``.

    Note (RU): Совместное обучение энкодера и двух голов.
    """
    if checkpoint.stage == Stage.SCRATCH and not config.allow_scratch:
        raise StageTransitionError(
            "Supervised stage needs a contrastive encoder (set allow_scratch for the ablation)"
        )
    if checkpoint.stage == Stage.SUPERVISED:
        raise StageTransitionError("Encoder already went through the supervised stage")
    if not manifest.clips:
        raise InvalidInputError("Supervised training needs a non-empty manifest")

    index = index_pseudo_labels(pseudo_labels)
    refs = manifest.frame_refs()
    missing = [ref for ref in refs if ref not in index]
    if missing:
        raise MissingPseudoLabelError(
            f"{len(missing)} frames have no pseudo-label, first: {missing[0]}"
        )
    if config.soft_labels and any(r.probs is None for r in index.values()):
        raise PseudoLabelError("Soft distillation needs pseudo-labels generated with probs")
    n_classes = config.n_classes or _infer_classes(index.values())
    if n_classes < 2:
        raise PseudoLabelError(f"Pseudo-labels must span at least 2 classes, got {n_classes}")

    encoder = checkpoint.build_module().train()
    freeze_leading(encoder, config.freeze_depth)
    dim = checkpoint.config.embedding_dim
    with seeded(derive_seed(seed, "supervised", "heads")):
        semantics_head = build_head(
            HeadKind.CLASSIFIER_SEMANTICS, dim, n_classes, config.hidden_dim
        )
        order_head = OrderClassifier(
            dim, config.n_frames, config.hidden_dim, config.single_frame_order
        )
    optimizer = make_optimizer(
        config.optimizer,
        [*encoder.parameters(), *semantics_head.parameters(), *order_head.parameters()],
        lr=config.lr,
        weight_decay=config.weight_decay,
    )

    batch_size = min(config.batch_size, len(refs))
    total_steps = math.ceil(len(refs) / batch_size) * config.epochs
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)
    writer = metrics or MetricsWriter()
    logger.info(
        f"Supervised stage: {len(refs)} frames, {n_classes} classes, {total_steps} steps, "
        f"lambda {config.lambda_}"
    )

    step = 0
    epoch = 0
    while step < total_steps:
        batches = iterate_batches(
            refs, store, batch_size, seed=derive_seed(seed, "supervised", "epoch", epoch)
        )
        for frames in batches:
            records = [index[f.source] for f in frames]
            logits = semantics_head(encoder(frames_to_tensor(frames)))
            if config.soft_labels:
                teacher_probs = torch.as_tensor([r.probs or [] for r in records])
                l_vs = loss_vs_soft(logits, teacher_probs)
            else:
                l_vs = loss_vs(logits, [r.label for r in records])

            if config.lambda_ > 0 or not config.use_vs:
                samples = _draw_order_samples(
                    manifest.clips,
                    store,
                    config.n_frames,
                    config.order_batch,
                    derive_seed(seed, "supervised", "order", step),
                )
                l_td = loss_td(
                    _order_logits(encoder, order_head, samples), [s.labels for s in samples]
                )
            else:
                l_td = torch.zeros((), dtype=l_vs.dtype)
            if config.use_vs:
                loss = cast(torch.Tensor, joint_loss(l_vs, l_td, config.lambda_))
            else:
                loss = l_td
            snapshot = {"l_vs": l_vs.detach().item(), "l_td": l_td.detach().item()}
            check_finite(loss, step, snapshot)

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            writer.log(
                step,
                loss=float(loss.detach()),
                l_vs=float(l_vs.detach()),
                l_td=float(l_td.detach()),
                lr=config.lr,
            )
            step += 1
            if step >= total_steps:
                break
        epoch += 1

    rng_state = make_generator(derive_seed(seed, "supervised", "rng")).get_state()
    result = checkpoint.advance(
        Stage.SUPERVISED, encoder, rng_state=rng_state, allow_skip=config.allow_scratch
    )
    return SupervisedFit(
        checkpoint=result,
        semantics_head=semantics_head.eval(),
        order_head=order_head.eval(),
        config=config,
        trace=list(writer.records),
    )


def _infer_classes(records: Any) -> int:
    n = 0
    for record in records:
        n = max(n, record.label + 1, len(record.probs or []))
    return n


def train_supervised(
    checkpoint: Checkpoint,
    manifest: ClipManifest,
    store: FrameStore,
    pseudo_labels: Sequence[PseudoLabelRecord],
    config: JointConfig,
    seed: int,
    metrics: Optional[MetricsWriter] = None,
) -> Checkpoint:
    """Stage-2 fine-tuning; returns the encoder only (heads are discarded).

    Note (RU): Дообучение энкодера, головы отбрасываются.
    """
    fit = fit_supervised(checkpoint, manifest, store, pseudo_labels, config, seed, metrics)
    return fit.checkpoint


def held_out_accuracy(
    fit: SupervisedFit,
    manifest: ClipManifest,
    store: FrameStore,
    pseudo_labels: Sequence[PseudoLabelRecord],
    seed: int = 0,
    samples_per_clip: int = 4,
) -> Dict[str, float]:
    """Pseudo-label agreement and per-frame order accuracy on ``manifest``.

    Returns:
        ``{"pseudo_label_agreement": ..., "order_accuracy": ...}``.

    Note (RU): Точность на отложенных клипах.
    """
    index = index_pseudo_labels(pseudo_labels)
    encoder = fit.checkpoint.module()
    refs = manifest.frame_refs()
    frames = store.load_many(refs)
    check_frames(fit.checkpoint.config, frames)

    with torch.no_grad():
        predicted = fit.semantics_head(encoder(frames_to_tensor(frames))).argmax(1).tolist()
    agree = [p == index[f.source].label for p, f in zip(predicted, frames) if f.source in index]

    n = fit.config.n_frames
    samples = [
        make_order_sample(clip, store, n, derive_seed(seed, "held-out", clip.clip_id, k))
        for clip in manifest.clips
        for k in range(samples_per_clip)
    ]
    correct = 0
    total = 0
    with torch.no_grad():
        for start in range(0, len(samples), 32):
            chunk = samples[start : start + 32]
            guesses = _order_logits(encoder, fit.order_head, chunk).argmax(-1)
            targets = torch.as_tensor([s.labels for s in chunk])
            correct += int((guesses == targets).sum())
            total += targets.numel()

    return {
        "pseudo_label_agreement": float(np.mean(agree)) if agree else 0.0,
        "order_accuracy": correct / total if total else 0.0,
    }
