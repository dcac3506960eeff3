"""Shared helpers: the record decorator, seeding and document I/O.

``metrics`` and ``optim`` are imported by path; they depend on the models.

Note (RU): Вспомогательные функции пакета viprom-lab.
"""

from dataclasses import dataclass
from typing import Type, TypeVar

from typing_extensions import dataclass_transform

from viprom_lab.utils.io import read_document, write_text
from viprom_lab.utils.seeding import derive_seed, make_generator, seed_everything, seeded

T = TypeVar("T")


@dataclass_transform(eq_default=False)
def model(cls: Type[T]) -> Type[T]:
    """Turn a class into a record dataclass.

    Equality and repr come from :class:`~viprom_lab.base.VipromModel`
    (``_id_attrs`` and field dumps) instead of the generated ones, since fields
    may hold tensors and arrays.

    Note (RU): Декоратор для моделей данных.
    """
    return dataclass(eq=False, repr=False)(cls)


__all__ = [
    "derive_seed",
    "make_generator",
    "model",
    "read_document",
    "seed_everything",
    "seeded",
    "write_text",
]
