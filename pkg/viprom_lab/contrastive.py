"""Momentum-contrastive pre-training with the InfoNCE objective.

The query tower is encoder → projection → prediction; the key tower is a
momentum copy of encoder → projection that never receives gradients.
Negatives are the other frames of the batch.

Note (RU): Контрастное предобучение с моментным энкодером.
"""

import copy
import logging
from dataclasses import field
from typing import Any, Dict, List, Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn
from torch.optim.lr_scheduler import LambdaLR
from torchvision.transforms import v2
from typing_extensions import Self

from viprom_lab.base import VipromModel, de_section
from viprom_lab.dataset.manifest import ClipManifest
from viprom_lab.dataset.sampling import (
    AugmentConfig,
    augment_views,
    build_augmentation,
    frames_to_tensor,
    iterate_batches,
)
from viprom_lab.dataset.store import FrameImage, FrameStore
from viprom_lab.encoder import (
    Checkpoint,
    EncoderConfig,
    Head,
    build_head,
    check_batch,
    init_encoder,
)
from viprom_lab.enums import HeadKind, OptimizerKind, Stage
from viprom_lab.exceptions import ConfigError, InvalidInputError, StageTransitionError
from viprom_lab.utils import model
from viprom_lab.utils.metrics import MetricsWriter
from viprom_lab.utils.optim import check_finite, make_optimizer, warmup_cosine
from viprom_lab.utils.seeding import derive_seed, make_generator, seeded

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-4


@model
class ContrastiveConfig(VipromModel):
    """Stage-1 hyperparameters.

    Attributes:
        epochs: Passes over the retained frames.
        batch_size: Frames per step.
        lr: Peak learning rate (before optional batch scaling).
        weight_decay: Optimizer weight decay.
        temperature: InfoNCE temperature τ.
        momentum: Key tower momentum m.
        warmup_fraction: Share of the run spent in linear warmup.
        scale_lr_by_batch: Use ``lr × batch_size / 256``.
        optimizer: Optimizer family.
        projection_dim: Output width of projection and prediction heads.
        hidden_dim: Hidden width of the heads.
        max_steps: Optional cap on optimizer steps.
        prefetch_workers: Threads loading frames ahead of the training loop.
        augment: Two-view augmentation recipe.

    Note (RU): Гиперпараметры контрастного этапа.
    """

    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-6
    temperature: float = 0.2
    momentum: float = 0.99
    warmup_fraction: float = 0.1
    scale_lr_by_batch: bool = False
    optimizer: OptimizerKind = OptimizerKind.ADAM
    projection_dim: int = 64
    hidden_dim: int = 128
    max_steps: Optional[int] = None
    prefetch_workers: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self) -> None:
        self.optimizer = OptimizerKind(self.optimizer)
        if self.temperature <= 0:
            raise ConfigError(
                f"temperature must be positive, got {self.temperature}", key="temperature"
            )
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError(f"momentum must be in [0, 1], got {self.momentum}", key="momentum")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}", key="batch_size")

    @classmethod
    def de_json(cls, data: Any, strict: bool = False) -> Optional[Self]:
        if not cls.is_dict_model_data(data):
            return None

        data_dict: Dict[str, Any] = data.copy()
        if "augment" in data_dict:
            data_dict["augment"] = de_section(
                AugmentConfig, data_dict["augment"], "augment", strict
            )

        return cls(**cls.cleanup_data(data_dict, strict=strict))

    @property
    def effective_lr(self) -> float:
        if self.scale_lr_by_batch:
            return self.lr * self.batch_size / 256
        return self.lr


def info_nce(queries: torch.Tensor, keys: torch.Tensor, temperature: float) -> torch.Tensor:
    """InfoNCE over in-batch negatives.

    ``mean_i -log(exp(q_i·k_i/τ) / Σ_j exp(q_i·k_j/τ))``, computed as a
    cross-entropy over the ``B×B`` similarity matrix.

    Args:
        queries: ``B×d`` L2-normalized rows.
        keys: ``B×d`` L2-normalized rows; row ``i`` is the positive of query ``i``.
        temperature: τ > 0.

    Raises:
        InvalidInputError: On shape mismatch, ``B < 2``, ``τ <= 0`` or rows
            whose norm deviates from 1 by more than 1e-4.

    Note (RU): Функция потерь InfoNCE.
    """
    if queries.dim() != 2 or queries.shape != keys.shape:
        raise InvalidInputError(
            f"queries and keys must be matching B×d matrices, got "
            f"{tuple(queries.shape)} and {tuple(keys.shape)}"
        )
    if queries.shape[0] < 2:
        raise InvalidInputError(f"InfoNCE needs at least 2 rows, got {queries.shape[0]}")
    if temperature <= 0:
        raise InvalidInputError(f"temperature must be positive, got {temperature}")
    for name, rows in (("queries", queries), ("keys", keys)):
        deviation = (rows.detach().norm(dim=1) - 1.0).abs().max()
        if deviation > NORM_TOLERANCE:
            raise InvalidInputError(
                f"{name} rows must be L2-normalized (max deviation {float(deviation):.2e})"
            )
    logits = queries @ keys.T / temperature
    targets = torch.arange(queries.shape[0], device=queries.device)
    return F.cross_entropy(logits, targets)


@torch.no_grad()
def momentum_update(
    key_params: Dict[str, torch.Tensor],
    query_params: Dict[str, torch.Tensor],
    m: float,
) -> Dict[str, torch.Tensor]:
    """In-place ``θ_k ← m·θ_k + (1 − m)·θ_q`` for every key parameter.

    ``query_params`` may hold extra entries (the prediction head); every key
    name must exist there with the same shape.

    Raises:
        InvalidInputError: On ``m`` outside ``[0, 1]`` or a structural mismatch.

    Note (RU): Моментное обновление ключевого энкодера.
    """
    if not 0.0 <= m <= 1.0:
        raise InvalidInputError(f"momentum must be in [0, 1], got {m}")
    for name, key in key_params.items():
        query = query_params.get(name)
        if query is None or query.shape != key.shape:
            raise InvalidInputError(f"Key parameter {name} has no matching query parameter")
    for name, key in key_params.items():
        key.mul_(m).add_(query_params[name], alpha=1.0 - m)
    return key_params


@model
class ContrastiveBatch(VipromModel):
    """Two augmented views of the same ``B`` frames.

    Attributes:
        views_a: ``B×3×H×W`` first views.
        views_b: ``B×3×H×W`` second views; ``views_b[i]`` comes from the same
            frame as ``views_a[i]``.
        sources: ``(clip_id, frame_index)`` of each frame.

    Note (RU): Батч пар аугментированных видов.
    """

    views_a: torch.Tensor = None  # type: ignore[assignment]
    views_b: torch.Tensor = None  # type: ignore[assignment]
    sources: List[Tuple[str, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.views_a.shape != self.views_b.shape:
            raise InvalidInputError("Both views must have the same shape")
        if self.sources and len(self.sources) != self.views_a.shape[0]:
            raise InvalidInputError("One source per view pair is required")

    def __len__(self) -> int:
        return int(self.views_a.shape[0])

    def to_dict(self) -> Dict[str, Any]:
        return {"size": len(self), "sources": [list(s) for s in self.sources]}

    @classmethod
    def from_frames(
        cls, frames: List[FrameImage], rng_seed: int, transform: v2.Compose
    ) -> "ContrastiveBatch":
        images = frames_to_tensor(frames)
        views_a, views_b = augment_views(images, rng_seed, transform)
        return cls(views_a=views_a, views_b=views_b, sources=[f.source for f in frames])


class ContrastiveState:
    """Query and key towers with their optimizer and schedule.

    Args:
        checkpoint: Initial encoder.
        config: Stage hyperparameters.
        total_steps: Length of the learning-rate schedule.
        seed: Seed of the head initialization.

    Note (RU): Состояние контрастного обучения.
    """

    def __init__(
        self, checkpoint: Checkpoint, config: ContrastiveConfig, total_steps: int, seed: int
    ) -> None:
        self.config = config
        self.encoder_config = checkpoint.config
        self.temperature = config.temperature
        self.momentum = config.momentum
        self.step = 0

        dim = checkpoint.config.embedding_dim
        with seeded(derive_seed(seed, "contrastive", "heads")):
            self.query_encoder = checkpoint.build_module().train()
            self.query_projection: Head = build_head(
                HeadKind.PROJECTION, dim, config.projection_dim, config.hidden_dim
            )
            self.predictor: Head = build_head(
                HeadKind.PREDICTION, config.projection_dim, config.projection_dim, config.hidden_dim
            )
        self.key_encoder = copy.deepcopy(self.query_encoder)
        self.key_projection = copy.deepcopy(self.query_projection)
        self.key_encoder.requires_grad_(False)
        self.key_projection.requires_grad_(False)

        self.optimizer = make_optimizer(
            config.optimizer,
            [
                *self.query_encoder.parameters(),
                *self.query_projection.parameters(),
                *self.predictor.parameters(),
            ],
            lr=config.effective_lr,
            weight_decay=config.weight_decay,
        )
        warmup = int(round(config.warmup_fraction * total_steps))
        self.scheduler = LambdaLR(self.optimizer, warmup_cosine(total_steps, warmup))

    @property
    def query_params(self) -> Dict[str, torch.Tensor]:
        return _named(
            encoder=self.query_encoder,
            projection=self.query_projection,
            prediction=self.predictor,
        )

    @property
    def key_params(self) -> Dict[str, torch.Tensor]:
        return _named(encoder=self.key_encoder, projection=self.key_projection)

    @property
    def lr(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])

    def query(self, images: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.predictor(self.query_projection(self.query_encoder(images))), dim=1)

    @torch.no_grad()
    def key(self, images: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.key_projection(self.key_encoder(images)), dim=1)


def _named(**modules: nn.Module) -> Dict[str, torch.Tensor]:
    return {
        f"{prefix}.{name}": param
        for prefix, module in modules.items()
        for name, param in module.named_parameters()
    }


def contrastive_step(
    state: ContrastiveState, batch: ContrastiveBatch
) -> Tuple[ContrastiveState, Dict[str, float]]:
    """One optimizer update on the query tower, then one momentum update.

    The loss is symmetrized over both view orderings.

    Returns:
        ``(state, metrics)`` with ``loss``, ``pos_sim`` and ``lr``; ``state`` is
        updated in place.

    Raises:
        TrainingDivergedError: When the loss is not finite.

    Note (RU): Один шаг контрастного обучения.
    """
    check_batch(state.encoder_config, batch.views_a)
    lr = state.lr
    q_a = state.query(batch.views_a)
    q_b = state.query(batch.views_b)
    k_a = state.key(batch.views_a)
    k_b = state.key(batch.views_b)

    loss = 0.5 * (info_nce(q_a, k_b, state.temperature) + info_nce(q_b, k_a, state.temperature))
    check_finite(loss, state.step, {"lr": lr, "batch_size": len(batch)})

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.scheduler.step()
    momentum_update(state.key_params, state.query_params, state.momentum)
    state.step += 1

    with torch.no_grad():
        pos_sim = 0.5 * ((q_a * k_b).sum(1).mean() + (q_b * k_a).sum(1).mean())
    return state, {"loss": float(loss.detach()), "pos_sim": float(pos_sim), "lr": lr}


def steps_per_epoch(n_frames: int, batch_size: int) -> int:
    """Batches per epoch; a trailing batch of one frame is skipped."""
    full, rest = divmod(n_frames, batch_size)
    return full + (1 if rest >= 2 else 0)


def train_contrastive(
    manifest: ClipManifest,
    store: FrameStore,
    config: ContrastiveConfig,
    seed: int,
    checkpoint: Optional[Checkpoint] = None,
    encoder_config: Optional[EncoderConfig] = None,
    metrics: Optional[MetricsWriter] = None,
) -> Checkpoint:
    """Stage-1 pre-training over the retained frames of ``manifest``.

    Args:
        manifest: Corpus to train on.
        store: Frame store of the corpus.
        config: Stage hyperparameters.
        seed: Global seed; shuffling, augmentation and head init derive from it.
        checkpoint: Scratch encoder to start from; initialized from
            ``encoder_config`` when omitted.
        encoder_config: Architecture used when ``checkpoint`` is omitted.
        metrics: Receives ``{loss, pos_sim, lr}`` for every step.

    Returns:
        Checkpoint with stage ``contrastive``.

    Raises:
        InvalidInputError: On an empty manifest or fewer than two frames.
        StageTransitionError: When ``checkpoint`` is not at stage ``scratch``.

    Note (RU): Контрастное предобучение.
    """
    refs = manifest.frame_refs()
    if not manifest.clips or len(refs) < 2:
        raise InvalidInputError("Contrastive training needs a manifest with at least two frames")
    if checkpoint is None:
        checkpoint = init_encoder(encoder_config or EncoderConfig(), derive_seed(seed, "encoder"))
    if checkpoint.stage != Stage.SCRATCH:
        raise StageTransitionError(
            f"Contrastive stage needs a scratch encoder, got {checkpoint.stage.value}"
        )

    batch_size = min(config.batch_size, len(refs))
    total_steps = total_contrastive_steps(len(refs), config)
    if total_steps < 1:
        raise InvalidInputError("Contrastive run has no steps")

    state = ContrastiveState(checkpoint, config, total_steps, seed)
    transform = build_augmentation(config.augment, checkpoint.config.input_hw)
    writer = metrics or MetricsWriter()
    logger.info(
        f"Contrastive stage: {len(refs)} frames, {total_steps} steps, "
        f"batch {batch_size}, lr {config.effective_lr:g}"
    )

    epoch = 0
    while state.step < total_steps:
        batches = iterate_batches(
            refs,
            store,
            batch_size,
            seed=derive_seed(seed, "contrastive", "epoch", epoch),
            prefetch_workers=config.prefetch_workers,
        )
        for frames in batches:
            if len(frames) < 2:
                continue
            batch = ContrastiveBatch.from_frames(
                frames, derive_seed(seed, "contrastive", "augment", state.step), transform
            )
            step = state.step
            _, step_metrics = contrastive_step(state, batch)
            writer.log(step, **step_metrics)
            if state.step >= total_steps:
                break
        epoch += 1

    final = writer.series("loss")
    if final:
        logger.info(f"Contrastive stage done: loss {final[0]:.4f} -> {final[-1]:.4f}")
    rng_state = make_generator(derive_seed(seed, "contrastive", "rng")).get_state()
    return checkpoint.advance(Stage.CONTRASTIVE, state.query_encoder, rng_state=rng_state)


def total_contrastive_steps(n_frames: int, config: ContrastiveConfig) -> int:
    """Number of optimizer steps :func:`train_contrastive` will run."""
    total = steps_per_epoch(n_frames, min(config.batch_size, n_frames)) * config.epochs
    if config.max_steps is not None:
        total = min(total, config.max_steps)
    return total if n_frames >= 2 else 0


__all__ = [
    "ContrastiveBatch",
    "ContrastiveConfig",
    "ContrastiveState",
    "contrastive_step",
    "info_nce",
    "momentum_update",
    "steps_per_epoch",
    "total_contrastive_steps",
    "train_contrastive",
    "warmup_cosine",
]
