"""Optimizers, learning-rate schedules and divergence checks shared by training stages.

Note (RU): Оптимизаторы и расписания скорости обучения.
"""

import math
from contextlib import contextmanager
from typing import Any, Callable, Dict, Iterable, Iterator, Optional

import torch

from viprom_lab.enums import OptimizerKind
from viprom_lab.exceptions import InvalidInputError, TrainingDivergedError


def make_optimizer(
    kind: OptimizerKind,
    params: Iterable[torch.nn.Parameter],
    lr: float,
    weight_decay: float = 0.0,
) -> torch.optim.Optimizer:
    """Build the optimizer named by ``kind``."""
    kind = OptimizerKind(kind)
    trainable = [p for p in params if p.requires_grad]
    if not trainable:
        raise InvalidInputError("No trainable parameters")
    if kind == OptimizerKind.ADAM:
        return torch.optim.Adam(trainable, lr=lr, weight_decay=weight_decay)
    if kind == OptimizerKind.ADAMW:
        return torch.optim.AdamW(trainable, lr=lr, weight_decay=weight_decay)
    return torch.optim.SGD(trainable, lr=lr, momentum=0.9, weight_decay=weight_decay)


def warmup_cosine(total_steps: int, warmup_steps: int) -> Callable[[int], float]:
    """LR multiplier: linear warmup to 1, then half-cosine decay to 0.

    Step ``s < warmup_steps`` gets ``(s + 1) / warmup_steps``; later steps get
    ``0.5 × (1 + cos(π × progress))`` with ``progress`` reaching 1 at
    ``total_steps``.

    Note (RU): Линейный прогрев и косинусное затухание.
    """
    if total_steps < 1:
        raise InvalidInputError(f"total_steps must be >= 1, got {total_steps}")
    warmup_steps = min(max(warmup_steps, 0), total_steps)

    def multiplier(step: int) -> float:
        if step < warmup_steps:
            return (step + 1) / warmup_steps
        progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
        return 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))

    return multiplier


@contextmanager
def default_dtype(dtype: torch.dtype) -> Iterator[None]:
    """Run a block with ``dtype`` as torch's default floating point type.

    Modules, frame batches and features built inside the block use ``dtype``.
    The previous default is restored on exit.

    Note (RU): Временная смена типа по умолчанию.
    """
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def check_finite(
    loss: torch.Tensor, step: int, snapshot: Optional[Dict[str, Any]] = None
) -> None:
    """Abort the run on a non-finite loss.

    Raises:
        TrainingDivergedError: Carrying ``step``, the loss value and ``snapshot``.
    """
    if torch.isfinite(loss).all():
        return
    details: Dict[str, Any] = {"step": step, "loss": float(loss.detach().sum())}
    details.update(snapshot or {})
    raise TrainingDivergedError(f"Non-finite loss at step {step}", snapshot=details)
