"""Append-only training metrics logs.

Note (RU): Журналы метрик обучения.
"""

import logging
import time
from dataclasses import field
from pathlib import Path
from typing import Any, Dict, List, Optional

from viprom_lab.base import VipromModel
from viprom_lab.exceptions import InvalidInputError
from viprom_lab.utils import model
from viprom_lab.utils.io import PathLike, append_jsonl, read_jsonl

logger = logging.getLogger(__name__)


@model
class MetricsRecord(VipromModel):
    """One line of a metrics log.

    Attributes:
        step: Optimizer step the metrics belong to.
        metrics: Named scalar metrics.
        wall_time: Seconds since the epoch when the record was written.

    Note (RU): Запись журнала метрик.
    """

    step: int = 0
    metrics: Dict[str, float] = field(default_factory=dict)
    wall_time: float = 0.0

    def to_line(self) -> Dict[str, Any]:
        """Flat ``{step, wall_time, **metrics}`` form written to disk."""
        return {"step": self.step, "wall_time": self.wall_time, **self.metrics}

    @classmethod
    def from_line(cls, line: Dict[str, Any]) -> "MetricsRecord":
        data = dict(line)
        step = int(data.pop("step"))
        wall_time = float(data.pop("wall_time", 0.0))
        return cls(step=step, metrics={k: float(v) for k, v in data.items()}, wall_time=wall_time)


class MetricsWriter:
    """Collects metrics in memory and optionally appends them to a JSON-lines file.

    Steps must not go backwards within one writer.

    Args:
        path: Target file, or ``None`` to keep records in memory only.

    Note (RU): Запись метрик с монотонными шагами.
    """

    def __init__(self, path: Optional[PathLike] = None) -> None:
        self.path = Path(path) if path is not None else None
        self.records: List[MetricsRecord] = []
        self._last_step: Optional[int] = None
        if self.path is not None and self.path.exists():
            existing = read_jsonl(self.path)
            if existing:
                self._last_step = int(existing[-1]["step"])

    def log(self, step: int, **metrics: float) -> MetricsRecord:
        if self._last_step is not None and step < self._last_step:
            raise InvalidInputError(f"Metrics step went backwards: {step} < {self._last_step}")
        record = MetricsRecord(
            step=int(step),
            metrics={k: float(v) for k, v in metrics.items()},
            wall_time=time.time(),
        )
        self.records.append(record)
        self._last_step = record.step
        if self.path is not None:
            append_jsonl(self.path, record.to_line())
        logger.debug(f"step {step}: {record.metrics}")
        return record

    def series(self, name: str) -> List[float]:
        """Values of one metric in logging order."""
        return [r.metrics[name] for r in self.records if name in r.metrics]


def read_metrics(path: PathLike) -> List[MetricsRecord]:
    """Load a metrics log written by :class:`MetricsWriter`."""
    return [MetricsRecord.from_line(line) for line in read_jsonl(path)]
