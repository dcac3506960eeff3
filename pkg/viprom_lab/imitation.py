"""Behavior cloning on frozen features and the best-success evaluation protocol.

A policy is a two-layer perceptron over (standardized) frozen encoder
features. Each task×seed cell collects expert demos, clones them with an MSE
loss and keeps the best success rate over periodic evaluations; the report
aggregate is the mean of those maxima.

Example:
    >>> report = run_protocol(checkpoint, [TaskId.REACH], config=BCConfig(toy=True))
    >>> report.aggregate

Note (RU): Клонирование поведения и протокол оценки.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from typing_extensions import Self

from viprom_lab.base import VipromModel, dump_document, fingerprint
from viprom_lab.dataset.store import FrameImage
from viprom_lab.encoder import Checkpoint, FrozenEncoder, freeze
from viprom_lab.enums import TaskId
from viprom_lab.exceptions import ConfigError, InvalidInputError
from viprom_lab.toyenv import (
    ACTION_DIM,
    Demonstration,
    EnvState,
    TaskSpec,
    collect_demos,
    make_task,
    reset,
    scripted_expert,
    step,
)
from viprom_lab.utils import model
from viprom_lab.utils.io import PathLike, read_json, write_text
from viprom_lab.utils.metrics import MetricsRecord, MetricsWriter
from viprom_lab.utils.optim import check_finite
from viprom_lab.utils.seeding import derive_seed, make_generator, seeded

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = (100, 125, 150)
TOY_STEPS = 5000
STATE_DIM = 6


@model
class BCConfig(VipromModel):
    """Behavior-cloning hyperparameters.

    Attributes:
        steps: Optimizer steps per cell.
        batch: Demo pairs per step.
        lr: Adam learning rate.
        n_demos: Expert demos per cell.
        eval_every: Steps between periodic evaluations.
        eval_episodes: Episodes per evaluation.
        hidden_dim: Policy hidden width.
        toy: Cap ``steps`` at the desk-scale budget.

    Note (RU): Гиперпараметры клонирования поведения.
    """

    steps: int = 20000
    batch: int = 32
    lr: float = 1e-3
    n_demos: int = 5
    eval_every: int = 1000
    eval_episodes: int = 20
    hidden_dim: int = 256
    toy: bool = False

    def __post_init__(self) -> None:
        for key in ("steps", "batch", "n_demos", "eval_every", "eval_episodes", "hidden_dim"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}", key=key)
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}", key="lr")

    @property
    def total_steps(self) -> int:
        return min(self.steps, TOY_STEPS) if self.toy else self.steps

    def eval_points(self) -> List[int]:
        """Steps (1-based counts) after which the policy is evaluated; always ends with the last."""
        total = self.total_steps
        points = list(range(self.eval_every, total + 1, self.eval_every))
        if not points or points[-1] != total:
            points.append(total)
        return points


class FeatureExtractor:
    """Maps observations (and states) to policy inputs.

    Note (RU): Извлечение признаков для политики.
    """

    dim: int = 0

    @property
    def fingerprint(self) -> str:
        raise NotImplementedError

    def features(self, observations: Sequence[FrameImage], states: np.ndarray) -> torch.Tensor:
        raise NotImplementedError


class PixelFeatures(FeatureExtractor):
    """Frozen encoder features, optionally followed by the effector position."""

    def __init__(self, encoder: FrozenEncoder, proprio: bool = False) -> None:
        self.encoder = encoder
        self.proprio = proprio
        self.dim = encoder.embedding_dim + (2 if proprio else 0)

    @property
    def fingerprint(self) -> str:
        return self.encoder.checkpoint.fingerprint()

    def features(self, observations: Sequence[FrameImage], states: np.ndarray) -> torch.Tensor:
        encoded = self.encoder.encode(observations)
        if not self.proprio:
            return encoded
        effector = torch.as_tensor(np.asarray(states)[:, :2], dtype=encoded.dtype)
        return torch.cat([encoded, effector], dim=1)


class StateOracle(FeatureExtractor):
    """Ground-truth state as features; the upper-bound control."""

    dim = STATE_DIM

    @property
    def fingerprint(self) -> str:
        return "state-oracle"

    def features(self, observations: Sequence[FrameImage], states: np.ndarray) -> torch.Tensor:
        tensor = torch.as_tensor(np.asarray(states), dtype=torch.get_default_dtype())
        return tensor.reshape(-1, STATE_DIM)


class Policy(nn.Module):
    """Two-layer perceptron ``Linear → SiLU → Linear`` on standardized features.

    Note (RU): Политика (двухслойный перцептрон).
    """

    def __init__(self, input_dim: int, action_dim: int = ACTION_DIM, hidden_dim: int = 256) -> None:
        super().__init__()
        self.input_dim = input_dim
        self.action_dim = action_dim
        self.net = nn.Sequential(
            nn.Linear(input_dim, hidden_dim), nn.SiLU(), nn.Linear(hidden_dim, action_dim)
        )
        self.register_buffer("feature_mean", torch.zeros(input_dim))
        self.register_buffer("feature_std", torch.ones(input_dim))

    def set_normalization(self, features: torch.Tensor) -> None:
        self.feature_mean.copy_(features.mean(0))
        self.feature_std.copy_(features.std(0, unbiased=False).clamp_min(1e-6))

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.net((features - self.feature_mean) / self.feature_std)

    def act(self, features: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            actions = self(features.to(self.feature_mean.dtype))
        return actions.clamp(-1.0, 1.0).numpy()


class Actor:
    """Batched action source for evaluation rollouts.

    Note (RU): Источник действий для оценки.
    """

    def act_batch(
        self, states: Sequence[EnvState], observations: Sequence[FrameImage]
    ) -> np.ndarray:
        raise NotImplementedError


class PolicyActor(Actor):
    def __init__(self, policy: Policy, extractor: FeatureExtractor) -> None:
        self.policy = policy.eval()
        self.extractor = extractor

    def act_batch(
        self, states: Sequence[EnvState], observations: Sequence[FrameImage]
    ) -> np.ndarray:
        vectors = np.stack([s.vector() for s in states])
        return self.policy.act(self.extractor.features(observations, vectors))


class ExpertActor(Actor):
    """Scripted expert wrapped as an actor."""

    def act_batch(
        self, states: Sequence[EnvState], observations: Sequence[FrameImage]
    ) -> np.ndarray:
        return np.stack([scripted_expert(s) for s in states])


class RandomActor(Actor):
    """Uniform random actions in ``[-1, 1]``."""

    def __init__(self, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    def act_batch(
        self, states: Sequence[EnvState], observations: Sequence[FrameImage]
    ) -> np.ndarray:
        return self.rng.uniform(-1.0, 1.0, size=(len(states), ACTION_DIM)).astype(np.float32)


def rollout_success(actor: Actor, task: TaskSpec, seeds: Sequence[int]) -> List[bool]:
    """Run one episode per seed in lockstep and report which ones succeeded.

    Note (RU): Параллельные эпизоды для оценки.
    """
    pairs = [reset(task, s) for s in seeds]
    states = [p[0] for p in pairs]
    observations = [p[1] for p in pairs]
    success = [False] * len(seeds)
    active = list(range(len(seeds)))
    while active:
        actions = actor.act_batch([states[i] for i in active], [observations[i] for i in active])
        still_active = []
        for action, i in zip(actions, active):
            states[i], observations[i], success[i], done = step(states[i], action)
            if not done:
                still_active.append(i)
        active = still_active
    return success


def evaluate(
    policy: Union[Policy, Actor],
    encoder: Optional[FeatureExtractor],
    task: TaskSpec,
    episodes: int,
    seed: int,
) -> float:
    """Fraction of ``episodes`` that reach the success predicate.

    Episode layouts derive from ``seed`` only, so every evaluation of one cell
    sees the same episodes.

    Raises:
        InvalidInputError: When ``episodes < 1`` or a policy comes without features.

    Note (RU): Доля успешных эпизодов.
    """
    if episodes < 1:
        raise InvalidInputError(f"episodes must be >= 1, got {episodes}")
    if isinstance(policy, Policy):
        if encoder is None:
            raise InvalidInputError("A policy needs a feature extractor to act")
        actor: Actor = PolicyActor(policy, encoder)
    else:
        actor = policy
    seeds = [derive_seed(seed, "eval", task.task_id.value, i) for i in range(episodes)]
    success = rollout_success(actor, task, seeds)
    return sum(success) / episodes


def demo_pairs(
    extractor: FeatureExtractor, demos: Sequence[Demonstration]
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Stacked ``(features, actions)`` over every demo step."""
    features = [extractor.features(d.observations, d.states) for d in demos]
    dtype = torch.get_default_dtype()
    actions = [torch.as_tensor(np.asarray(d.actions), dtype=dtype) for d in demos]
    return torch.cat(features).to(dtype), torch.cat(actions)


def bc_train(
    encoder: Union[FrozenEncoder, FeatureExtractor],
    demos: Sequence[Demonstration],
    config: BCConfig,
    seed: int,
    task: Optional[TaskSpec] = None,
    metrics: Optional[MetricsWriter] = None,
) -> Tuple[Policy, List[MetricsRecord]]:
    """Clone ``demos`` into a fresh policy.

    Features are computed once (the encoder is frozen). When ``task`` is
    given, the policy is evaluated after each of :meth:`BCConfig.eval_points`
    and the trace carries ``success`` records.

    Args:
        encoder: Frozen encoder or any feature extractor.
        demos: Expert demonstrations.
        config: Hyperparameters.
        seed: Cell seed; policy init, batches and evaluation derive from it.
        task: Task for periodic evaluation.
        metrics: Receives ``loss`` at evaluation points and ``success`` when evaluated.

    Returns:
        ``(policy, trace)``.

    Raises:
        InvalidInputError: On empty demos.

    Note (RU): Обучение политики клонированием поведения.
    """
    if not demos or not any(len(d) for d in demos):
        raise InvalidInputError("bc_train needs at least one non-empty demonstration")
    extractor = encoder if isinstance(encoder, FeatureExtractor) else PixelFeatures(encoder)

    features, actions = demo_pairs(extractor, demos)
    with seeded(derive_seed(seed, "bc", "policy")):
        policy = Policy(extractor.dim, actions.shape[1], config.hidden_dim)
    policy.set_normalization(features)
    optimizer = torch.optim.Adam(policy.parameters(), lr=config.lr)
    generator = make_generator(derive_seed(seed, "bc", "batches"))
    writer = metrics or MetricsWriter()
    eval_points = set(config.eval_points())
    eval_seed = derive_seed(seed, "bc", "eval")

    policy.train()
    for i in range(config.total_steps):
        idx = torch.randint(0, features.shape[0], (config.batch,), generator=generator)
        loss = F.mse_loss(policy(features[idx]), actions[idx])
        check_finite(loss, i)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

        if i + 1 in eval_points:
            record: Dict[str, float] = {"loss": float(loss.detach())}
            if task is not None:
                policy.eval()
                record["success"] = evaluate(
                    policy, extractor, task, config.eval_episodes, eval_seed
                )
                policy.train()
            writer.log(i + 1, **record)

    policy.eval()
    logger.debug(f"BC done after {config.total_steps} steps: {writer.records[-1].metrics}")
    return policy, list(writer.records)


def action_mse(
    policy: Policy, extractor: FeatureExtractor, demos: Sequence[Demonstration]
) -> float:
    """Mean squared action error of ``policy`` replayed on demo observations."""
    features, actions = demo_pairs(extractor, demos)
    with torch.no_grad():
        return float(F.mse_loss(policy(features), actions))


def best_success_rate(trace: Sequence[float]) -> float:
    """Maximum over periodic evaluations of one run."""
    if not trace:
        raise InvalidInputError("Empty success trace")
    return float(max(trace))


def aggregate_success(traces: Mapping[Tuple[str, int], Sequence[float]]) -> float:
    """Mean over task×seed cells of their best success rate.

    Note (RU): Среднее лучших долей успеха по задачам и зёрнам.
    """
    if not traces:
        raise InvalidInputError("No cells to aggregate")
    return float(np.mean([best_success_rate(t) for t in traces.values()]))


@model
class EvalCell(VipromModel):
    """One task×seed result.

    Attributes:
        task: Task id.
        seed: Evaluation seed.
        best_success: Best periodic success rate.
        history: Success rate at each evaluation point.
        trace_path: Metrics log relative to the report directory (empty when not written).

    Note (RU): Результат одной ячейки задача×зерно.
    """

    task: TaskId = TaskId.REACH
    seed: int = 0
    best_success: float = 0.0
    history: List[float] = field(default_factory=list)
    trace_path: str = ""

    def __post_init__(self) -> None:
        self.task = TaskId(self.task)
        self._id_attrs = (self.task, self.seed)


@model
class EvalReport(VipromModel):
    """Protocol result.

    Attributes:
        encoder_fingerprint: Fingerprint of the evaluated encoder.
        algorithm: Downstream learner; only ``bc`` exists.
        config_fingerprint: Fingerprint of the ``BCConfig``.
        seeds: Evaluation seeds.
        cells: One entry per task×seed, task-major.
        aggregate: Mean of ``best_success`` over cells.

    Note (RU): Отчёт об оценке энкодера.
    """

    encoder_fingerprint: str = ""
    algorithm: str = "bc"
    config_fingerprint: str = ""
    seeds: List[int] = field(default_factory=list)
    cells: List[EvalCell] = field(default_factory=list)
    aggregate: float = 0.0

    @classmethod
    def de_json(cls, data: Any, strict: bool = False) -> Optional[Self]:
        if not cls.is_dict_model_data(data):
            return None

        data_dict: Dict[str, Any] = data.copy()
        data_dict["cells"] = EvalCell.de_list(data_dict.get("cells"), strict=strict)

        return cls(**cls.cleanup_data(data_dict, strict=strict))

    def cell(self, task: Any, seed: int) -> EvalCell:
        for cell in self.cells:
            if cell.task == TaskId(task) and cell.seed == seed:
                return cell
        raise KeyError((task, seed))

    def per_seed(self) -> Dict[int, float]:
        """Mean best success over tasks, per seed."""
        return {
            seed: float(np.mean([c.best_success for c in self.cells if c.seed == seed]))
            for seed in self.seeds
        }

    def save(self, path: PathLike) -> Path:
        return write_text(path, dump_document(self))

    @classmethod
    def load(cls, path: PathLike) -> "EvalReport":
        report = cls.de_json(read_json(path), strict=True)
        if report is None:
            raise InvalidInputError(f"{path} is not an eval report")
        return report


def _extractor_for(
    checkpoint: Union[Checkpoint, FeatureExtractor], proprio: bool
) -> FeatureExtractor:
    if isinstance(checkpoint, FeatureExtractor):
        return checkpoint
    return PixelFeatures(freeze(checkpoint), proprio=proprio)


def run_cell(
    extractor: FeatureExtractor,
    task: TaskSpec,
    seed: int,
    config: BCConfig,
    out_dir: Optional[PathLike] = None,
) -> EvalCell:
    """Collect demos, clone them and track the best periodic success of one cell."""
    demos = collect_demos(task, config.n_demos, seed)
    trace_path = ""
    writer = MetricsWriter()
    if out_dir is not None:
        trace_path = f"traces/{task.task_id.value}-{seed}.jsonl"
        target = Path(out_dir) / trace_path
        if target.exists():
            target.unlink()
        writer = MetricsWriter(target)
    _, trace = bc_train(extractor, demos, config, seed, task=task, metrics=writer)
    history = [r.metrics["success"] for r in trace if "success" in r.metrics]
    cell = EvalCell(
        task=task.task_id,
        seed=seed,
        best_success=best_success_rate(history),
        history=history,
        trace_path=trace_path,
    )
    logger.info(f"Cell {task.task_id.value}/{seed}: best success {cell.best_success:.3f}")
    return cell


def run_protocol(
    checkpoint: Union[Checkpoint, FeatureExtractor],
    tasks: Sequence[Union[TaskId, TaskSpec, str]],
    seeds: Sequence[int] = DEFAULT_SEEDS,
    config: Optional[BCConfig] = None,
    out_dir: Optional[PathLike] = None,
    workers: int = 1,
    proprio: bool = False,
) -> EvalReport:
    """Evaluate an encoder on every task×seed cell.

    Args:
        checkpoint: Encoder to evaluate (or a feature extractor).
        tasks: Task ids or specs.
        seeds: Evaluation seeds.
        config: BC hyperparameters.
        out_dir: Directory for per-cell traces (and nothing else).
        workers: Cells trained concurrently.
        proprio: Append the effector position to pixel features.

    Note (RU): Протокол оценки по задачам и зёрнам.
    """
    config = config or BCConfig()
    if not tasks or not seeds:
        raise InvalidInputError("run_protocol needs at least one task and one seed")
    specs = [t if isinstance(t, TaskSpec) else make_task(t, proprio=proprio) for t in tasks]
    extractor = _extractor_for(checkpoint, proprio)
    jobs = [(spec, int(seed)) for spec in specs for seed in seeds]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(run_cell, extractor, spec, seed, config, out_dir)
                for spec, seed in jobs
            ]
            cells = [f.result() for f in futures]
    else:
        cells = [run_cell(extractor, spec, seed, config, out_dir) for spec, seed in jobs]

    aggregate = float(np.mean([c.best_success for c in cells]))
    return EvalReport(
        encoder_fingerprint=extractor.fingerprint,
        algorithm="bc",
        config_fingerprint=fingerprint(config.to_dict()),
        seeds=[int(s) for s in seeds],
        cells=cells,
        aggregate=round(aggregate, 6),
    )


__all__ = [
    "DEFAULT_SEEDS",
    "Actor",
    "BCConfig",
    "EvalCell",
    "EvalReport",
    "ExpertActor",
    "FeatureExtractor",
    "PixelFeatures",
    "Policy",
    "PolicyActor",
    "RandomActor",
    "StateOracle",
    "action_mse",
    "aggregate_success",
    "bc_train",
    "best_success_rate",
    "evaluate",
    "rollout_success",
    "run_cell",
    "run_protocol",
]
