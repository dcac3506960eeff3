"""Base classes for the viprom-lab library.

Note (RU): Базовые классы библиотеки viprom-lab.
"""

import dataclasses
import hashlib
import json as _std_json
import keyword
import logging
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Type, TypeVar, Union, cast

from typing_extensions import Self, TypeGuard

from viprom_lab.exceptions import ConfigError
from viprom_lab.utils import model

try:
    import ujson as json

    _ujson = True
except ImportError:
    import json  # type: ignore[no-redef]

    _ujson = False

_reserved_names = keyword.kwlist

ModelT = TypeVar("ModelT", bound="VipromModel")

logger = logging.getLogger(__name__)

JSONType = Union[Dict[str, "JSONType"], Sequence["JSONType"], str, int, float, bool, None]


def canonical_json(data: Any) -> str:
    """Serialize data to the canonical form used for fingerprints.

    Keys are sorted, separators are compact and non-ASCII characters are kept,
    so semantically identical documents give identical strings.

    Note (RU): Каноническая сериализация для отпечатков.
    """
    if isinstance(data, VipromModel):
        data = data.to_dict()
    return _std_json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def fingerprint(data: Any, length: int = 16) -> str:
    """Content hash of the canonical JSON form of ``data``.

    Args:
        data: Model or JSON-compatible value.
        length: Number of hex characters kept.

    Returns:
        Hex digest prefix.

    Note (RU): Отпечаток (хеш содержимого) данных.
    """
    digest = hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()
    return digest[:length]


def dump_document(data: Any) -> str:
    """Pretty, byte-stable JSON used for files meant to be read by humans."""
    if isinstance(data, VipromModel):
        data = data.to_dict()
    return _std_json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


class VipromObject:
    """Base class for all library classes.

    Note (RU): Базовый класс для всех классов библиотеки.
    """

    pass


@model
class VipromModel(VipromObject):
    """Base class for all library records.

    Provides serialization to dictionaries / JSON and deserialization from
    plain dictionaries read from manifests, config files and reports.

    Note (RU): Базовый класс для всех моделей библиотеки.
    Предоставляет методы для сериализации/десериализации объектов
    из/в JSON и словари.
    """

    def __str__(self) -> str:
        return str(self.to_dict())

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}({self})"

    def __getitem__(self, item: str) -> Any:
        return self.__dict__[item]

    @staticmethod
    def report_unknown_fields_callback(klass: type, unknown_fields: Dict[str, Any]) -> None:
        """Callback for handling unknown fields in lenient mode.

        Note (RU): Обратный вызов для обработки неизвестных полей.
        """
        logger.warning(
            f"Ignoring unknown fields. Type: {klass.__module__}.{klass.__name__}; "
            f"fields: {sorted(unknown_fields)}"
        )

    @staticmethod
    def is_dict_model_data(data: Any) -> TypeGuard[Dict[str, Any]]:
        """Check if data is a valid dictionary.

        Args:
            data: Data to validate.

        Returns:
            Whether the data is valid.

        Note (RU): Проверка на соответствие данных словарю.
        """
        return bool(data) and isinstance(data, dict)

    @staticmethod
    def is_array_model_data(data: Any) -> TypeGuard[List[Dict[str, Any]]]:
        """Check if data is a valid list of dictionaries.

        Note (RU): Проверка на соответствие данных массиву словарей.
        """
        return (
            bool(data) and isinstance(data, list) and all(isinstance(item, dict) for item in data)
        )

    @classmethod
    def cleanup_data(
        cls, data: Any, strict: bool = False, prefix: str = ""
    ) -> Dict[str, Any]:
        """Remove undeclared fields for the current model from raw data.

        Note:
            Only filters a field:value dictionary. Otherwise returns an empty dict.

        Args:
            data: Fields and values of the object being deserialized.
            strict: Raise on unknown fields instead of reporting them.
            prefix: Dotted path of ``data`` inside the enclosing document,
                used in error messages.

        Returns:
            Filtered data.

        Raises:
            ConfigError: In strict mode, on the first unknown field.

        Note (RU): Удаляет незадекларированные поля для текущей модели из сырых данных.
        """
        if not VipromModel.is_dict_model_data(data):
            return {}

        fields = {f.name for f in dataclasses.fields(cls) if not f.name.startswith("_")}

        cleaned_data: Dict[str, Any] = {}
        unknown_data: Dict[str, Any] = {}

        for k, v in data.items():
            if k in _reserved_names:
                k = f"{k}_"
            if k in fields:
                cleaned_data[k] = v
            else:
                unknown_data[k] = v

        if unknown_data:
            if strict:
                key = sorted(unknown_data)[0]
                raise ConfigError(f"Unknown config key: {prefix}{key}", key=f"{prefix}{key}")
            cls.report_unknown_fields_callback(cls, unknown_data)

        return cleaned_data

    @classmethod
    def de_json(cls, data: Any, strict: bool = False) -> Optional[Self]:
        """Deserialize an object.

        Note:
            Overridden in subclasses when there are nested objects.

        Args:
            data: Fields and values of the object being deserialized.
            strict: Reject unknown fields.

        Returns:
            Deserialized object.

        Note (RU): Десериализация объекта.
        """
        if not cls.is_dict_model_data(data):
            return None

        return cls(**cls.cleanup_data(data, strict=strict))

    @classmethod
    def de_list(cls, data: Any, strict: bool = False) -> List[Self]:
        """Deserialize a list of objects.

        Note (RU): Десериализация списка объектов.
        """
        if not cls.is_array_model_data(data):
            return []

        items = [cls.de_json(item, strict=strict) for item in data]
        return [item for item in items if item is not None]

    def to_json(self) -> str:
        """Serialize the object to a JSON string.

        Returns:
            JSON-serialized object.

        Note (RU): Сериализация объекта в JSON строку.
        """
        result: str = json.dumps(self.to_dict(), ensure_ascii=not _ujson)
        return result

    def to_dict(self) -> Dict[str, Any]:
        """Recursively serialize the object to a dictionary.

        Note:
            Excludes private attributes (``_id_attrs`` and friends).
            Enum members are stored by value, tuples as lists.

        Returns:
            Dictionary-serialized object.

        Note (RU): Рекурсивная сериализация объекта в словарь.
        """

        def parse(val: Any) -> Any:
            if isinstance(val, VipromModel):
                return val.to_dict()
            if isinstance(val, Enum):
                return val.value
            if isinstance(val, (list, tuple)):
                return [parse(it) for it in val]
            if isinstance(val, dict):
                return {str(key): parse(value) for key, value in val.items()}
            return val

        data = {k: v for k, v in self.__dict__.items() if not k.startswith("_")}

        # Python keywords are stored with a trailing underscore (``lambda_``)
        for k, v in data.copy().items():
            if k.endswith("_") and k[:-1] in _reserved_names:
                data.pop(k)
                data.update({k[:-1]: v})

        return cast(Dict[str, Any], parse(data))

    def fingerprint(self) -> str:
        """Content hash of the record (see :func:`fingerprint`)."""
        return fingerprint(self.to_dict())

    def _get_id_attrs(self) -> Tuple[Any, ...]:
        """Get key attributes of the object.

        Note (RU): Получение ключевых атрибутов объекта.
        """
        return cast(Tuple[Any, ...], getattr(self, "_id_attrs", ()))

    def __eq__(self, other: Any) -> bool:
        """Check equality of two objects.

        Note:
            Comparison is based on attributes listed in ``_id_attrs``;
            records without them compare by their serialized form.

        Note (RU): Проверка на равенство двух объектов.
        """
        if isinstance(other, self.__class__):
            if self._get_id_attrs() or other._get_id_attrs():
                return self._get_id_attrs() == other._get_id_attrs()
            return self.to_dict() == other.to_dict()
        return super().__eq__(other)

    def __hash__(self) -> int:
        """Hash function implementation based on key attributes.

        Note (RU): Реализация хеш-функции на основе ключевых атрибутов.
        """
        id_attrs = self._get_id_attrs()
        if not id_attrs:
            return hash((self.__class__, canonical_json(self.to_dict())))

        frozen_attrs = tuple(
            tuple(attr) if isinstance(attr, list) else attr for attr in id_attrs
        )
        return hash((self.__class__, frozen_attrs))


def de_section(klass: Type[ModelT], value: Any, key: str, strict: bool = False) -> ModelT:
    """Deserialize one nested section of a document, defaulting when it is empty.

    Errors raised while building the section get ``key`` prepended to their
    dotted path.

    Note (RU): Десериализация вложенной секции документа.
    """
    if isinstance(value, klass):
        return value
    if value is not None and not isinstance(value, dict):
        raise ConfigError(f"Section {key} must be a mapping", key=key)
    try:
        return klass.de_json(value, strict=strict) or klass()
    except ConfigError as e:
        raise ConfigError(f"In section {key}: {e}", key=f"{key}.{e.key}" if e.key else key) from e
