"""File helpers shared by manifests, reports and metrics logs.

Note (RU): Вспомогательные функции ввода-вывода.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Type, Union

import yaml

from viprom_lab.exceptions import ConfigError, VipromError

logger = logging.getLogger(__name__)

PathLike = Union[str, "os.PathLike[str]"]


def write_text(path: PathLike, text: str, error_cls: Type[VipromError] = VipromError) -> Path:
    """Write a text file atomically (temp file + rename).

    Raises:
        VipromError: ``error_cls`` when the directory is not writable.

    Note (RU): Атомарная запись текстового файла.
    """
    target = Path(path)
    tmp = target.with_name(f".{target.name}.tmp")
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, target)
    except OSError as e:
        raise error_cls(f"Cannot write {target}: {e}") from e
    return target


def read_json(path: PathLike, error_cls: Type[VipromError] = VipromError) -> Any:
    """Read a JSON document.

    Raises:
        VipromError: ``error_cls`` when the file is missing or not JSON.

    Note (RU): Чтение JSON документа.
    """
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except UnicodeDecodeError as e:
        raise error_cls(f"{path} could not be decoded using UTF-8") from e
    except json.JSONDecodeError as e:
        raise error_cls(f"Invalid JSON in {path}: {e}") from e
    except OSError as e:
        raise error_cls(f"Cannot read {path}: {e}") from e


def read_jsonl(path: PathLike, error_cls: Type[VipromError] = VipromError) -> List[Dict[str, Any]]:
    """Read line-delimited JSON records, skipping blank lines.

    Note (RU): Чтение построчного JSON.
    """
    records: List[Dict[str, Any]] = []
    try:
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise error_cls(f"Invalid record at {path}:{lineno}") from e
    except OSError as e:
        raise error_cls(f"Cannot read {path}: {e}") from e
    return records


def append_jsonl(path: PathLike, record: Dict[str, Any]) -> None:
    """Append one record to a JSON-lines file."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "a", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n")


def read_document(path: PathLike) -> Any:
    """Read a YAML (or JSON, a YAML subset) configuration document.

    Raises:
        ConfigError: When the file is missing or does not parse.

    Note (RU): Чтение YAML/JSON документа конфигурации.
    """
    try:
        with open(path, encoding="utf-8") as f:
            return yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"Invalid YAML in {path}: {e}") from e
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"Cannot read {path}: {e}") from e
