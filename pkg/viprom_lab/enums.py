"""Enumerations for the viprom-lab library.

Note (RU): Перечисления библиотеки viprom-lab.
"""

from enum import Enum


class Architecture(str, Enum):
    """Encoder backbone.

    Note (RU): Архитектура энкодера.
    """

    TINY_CONV = "tiny-conv"  # desk-scale default
    RES_34 = "res-34"
    RES_50 = "res-50"
    RES_101 = "res-101"


class Stage(str, Enum):
    """Pre-training stage that produced a checkpoint.

    Note (RU): Стадия предобучения.
    """

    SCRATCH = "scratch"
    CONTRASTIVE = "contrastive"
    SUPERVISED = "supervised"


class HeadKind(str, Enum):
    """Head attached on top of the encoder.

    Note (RU): Тип головы поверх энкодера.
    """

    PROJECTION = "projection"
    PREDICTION = "prediction"
    CLASSIFIER_SEMANTICS = "classifier_semantics"  # h1
    CLASSIFIER_ORDER = "classifier_order"  # h2
    POLICY = "policy"


class TaskId(str, Enum):
    """Toy manipulation task.

    Note (RU): Задача игрушечной среды.
    """

    REACH = "reach"
    PUSH = "push"
    OPEN_SLIDER = "open-slider"
    CLOSE_SLIDER = "close-slider"


class Method(str, Enum):
    """Pre-training recipe of a benchmark cell.

    Note (RU): Метод предобучения в ячейке бенчмарка.
    """

    SCRATCH = "scratch"
    CONTRASTIVE = "contrastive"
    CONTRASTIVE_VS = "contrastive+vs"
    CONTRASTIVE_TD = "contrastive+td"
    VIPROM_FULL = "viprom-full"


class CorpusKind(str, Enum):
    """Synthetic pre-training corpus variant.

    Note (RU): Вариант синтетического корпуса.
    """

    CLIPS = "clips"  # temporally coherent clips
    STATIC = "static"  # one still frame repeated per clip


class ReportFormat(str, Enum):
    """Benchmark report format.

    Note (RU): Формат отчёта бенчмарка.
    """

    TABLE_TEXT = "table-text"
    DELIMITED = "delimited"
    PLOT = "plot"


class OptimizerKind(str, Enum):
    """Optimizer used by a training stage.

    Note (RU): Оптимизатор стадии обучения.
    """

    ADAM = "adam"
    ADAMW = "adamw"
    SGD = "sgd"


class Precision(str, Enum):
    """Floating point precision of a run.

    Note (RU): Точность вычислений.
    """

    SINGLE = "single"
    DOUBLE = "double"
