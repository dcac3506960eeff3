"""Run configuration: defaults, YAML files, flag overrides and snapshots.

Precedence is defaults < config file < command-line flags. ``global.data_root``
falls back to the ``VIPROM_DATA_ROOT`` environment variable.

Example file::

    global:
      seed: 3
      toy: true
    contrastive:
      epochs: 5
      augment:
        flip_p: 0.0

Note (RU): Конфигурация запуска.
"""

import logging
import os
from dataclasses import field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import torch
from typing_extensions import Self

from viprom_lab.base import VipromModel, de_section, dump_document, fingerprint
from viprom_lab.bench import GridSpec
from viprom_lab.contrastive import ContrastiveConfig
from viprom_lab.encoder import EncoderConfig
from viprom_lab.enums import CorpusKind, Precision
from viprom_lab.exceptions import ConfigError
from viprom_lab.imitation import BCConfig
from viprom_lab.supervised import JointConfig, TeacherConfig
from viprom_lab.utils import model
from viprom_lab.utils.io import PathLike, read_document, write_text

logger = logging.getLogger(__name__)

ENV_DATA_ROOT = "VIPROM_DATA_ROOT"
SNAPSHOT_FILENAME = "config.resolved.json"
FINGERPRINT_FILENAME = "fingerprint.txt"


@model
class GlobalSettings(VipromModel):
    """Settings shared by every command.

    Attributes:
        seed: Global seed; components derive their own seeds from it.
        data_root: Default corpus directory.
        out_root: Root of all outputs.
        toy: Desk-scale budgets; caps BC steps in ``imitation`` and the bench protocol.
        precision: ``single`` for training; ``double`` is meant for gradient checks.

    Note (RU): Общие настройки.
    """

    seed: int = 0
    data_root: Optional[str] = None
    out_root: str = "runs"
    toy: bool = False
    precision: Precision = Precision.SINGLE

    def __post_init__(self) -> None:
        self.precision = Precision(self.precision)

    @property
    def dtype(self) -> torch.dtype:
        return torch.float64 if self.precision == Precision.DOUBLE else torch.float32


@model
class DatasetSettings(VipromModel):
    """Corpus construction.

    Attributes:
        fps: Source frame rate.
        clip_duration_s: Clip length.
        downsample_factor: Temporal stride of retained frames.
        n_clips: Synthetic clips.
        n_classes: Synthetic classes.
        image_hw: Synthetic frame size.
        kind: Synthetic corpus variant.
        holdout_fraction: Share of clips held out by evaluation helpers.

    Note (RU): Параметры корпуса.
    """

    fps: int = 30
    clip_duration_s: float = 1.0
    downsample_factor: int = 10
    n_clips: int = 48
    n_classes: int = 6
    image_hw: Tuple[int, int] = (32, 32)
    kind: CorpusKind = CorpusKind.CLIPS
    holdout_fraction: float = 0.2

    def __post_init__(self) -> None:
        self.kind = CorpusKind(self.kind)
        self.image_hw = (int(self.image_hw[0]), int(self.image_hw[1]))


_SECTIONS: Dict[str, Any] = {
    "global": GlobalSettings,
    "dataset": DatasetSettings,
    "encoder": EncoderConfig,
    "contrastive": ContrastiveConfig,
    "teacher": TeacherConfig,
    "supervised": JointConfig,
    "imitation": BCConfig,
    "bench": GridSpec,
}


@model
class RunConfig(VipromModel):
    """Resolved configuration of one run (``global_`` is ``global`` in files).

    Note (RU): Полная конфигурация запуска.
    """

    global_: GlobalSettings = field(default_factory=GlobalSettings)
    dataset: DatasetSettings = field(default_factory=DatasetSettings)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    supervised: JointConfig = field(default_factory=JointConfig)
    imitation: BCConfig = field(default_factory=BCConfig)
    bench: GridSpec = field(default_factory=GridSpec)

    def __post_init__(self) -> None:
        if self.global_.toy:
            self.imitation.toy = True
            self.bench.protocol.toy = True

    @classmethod
    def de_json(cls, data: Any, strict: bool = False) -> Optional[Self]:
        if not cls.is_dict_model_data(data):
            return None

        data_dict: Dict[str, Any] = data.copy()
        for key, klass in _SECTIONS.items():
            if key in data_dict:
                data_dict[key] = de_section(klass, data_dict[key], key, strict)

        return cls(**cls.cleanup_data(data_dict, strict=strict))


def set_dotted(data: Dict[str, Any], dotted_key: str, value: Any) -> None:
    """Set ``a.b.c`` inside nested dicts, creating levels as needed."""
    *parents, leaf = dotted_key.split(".")
    node = data
    for part in parents:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"{dotted_key}: {part} is not a section", key=dotted_key)
        node = child
    node[leaf] = value


def load_config(
    path: Optional[PathLike] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Resolve a configuration.

    Args:
        path: YAML/JSON config file, optional.
        overrides: Dotted keys set by command-line flags.
        environ: Environment used for the ``data_root`` fallback.

    Raises:
        ConfigError: Naming the offending key for unknown keys or bad values.

    Note (RU): Загрузка и разрешение конфигурации.
    """
    data: Dict[str, Any] = {}
    if path is not None:
        loaded = read_document(path)
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        data = dict(loaded or {})
    for key, value in (overrides or {}).items():
        set_dotted(data, key, value)

    env = os.environ if environ is None else environ
    section = data.get("global")
    if (not isinstance(section, dict) or section.get("data_root") is None) and env.get(
        ENV_DATA_ROOT
    ):
        set_dotted(data, "global.data_root", env[ENV_DATA_ROOT])

    try:
        config = RunConfig.de_json(data, strict=True) or RunConfig()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid config value: {e}") from e
    logger.debug(f"Resolved config {config.fingerprint()}")
    return config


def snapshot_config(resolved: RunConfig, out_dir: PathLike) -> str:
    """Write ``config.resolved.json`` and ``fingerprint.txt`` into ``out_dir``.

    Returns:
        Content fingerprint of the canonical serialization.

    Raises:
        ConfigError: When ``out_dir`` is not writable.

    Note (RU): Снимок разрешённой конфигурации.
    """
    target = Path(out_dir)
    data = resolved.to_dict()
    digest = fingerprint(data)
    write_text(target / SNAPSHOT_FILENAME, dump_document(data), error_cls=ConfigError)
    write_text(target / FINGERPRINT_FILENAME, digest + "\n", error_cls=ConfigError)
    return digest


__all__ = [
    "ENV_DATA_ROOT",
    "FINGERPRINT_FILENAME",
    "SNAPSHOT_FILENAME",
    "DatasetSettings",
    "GlobalSettings",
    "RunConfig",
    "load_config",
    "set_dotted",
    "snapshot_config",
]
