"""Exceptions for the viprom-lab library.

Note (RU): Исключения библиотеки viprom-lab.
"""

from typing import Any, Dict, Optional, Sequence


class VipromError(Exception):
    """Base exception for the library.

    Note (RU): Базовое исключение библиотеки.
    """

    def __init__(self, message: str = "", *args: Any) -> None:
        self.message = message
        super().__init__(message, *args)

    def __str__(self) -> str:
        return self.message


class ConfigError(VipromError):
    """Invalid or unknown configuration value.

    Note (RU): Некорректное или неизвестное значение конфигурации.
    """

    def __init__(self, message: str = "", key: Optional[str] = None, *args: Any) -> None:
        self.key = key
        super().__init__(message, *args)


class InvalidInputError(VipromError):
    """Operation precondition violated by the caller.

    Note (RU): Нарушено предусловие операции.
    """

    pass


class ManifestError(VipromError):
    """Clip manifest or narration file is malformed.

    Note (RU): Некорректный манифест клипов или файл нарраций.
    """

    pass


class FrameStoreError(VipromError):
    """Frame is missing from the store or cannot be decoded.

    Note (RU): Кадр отсутствует в хранилище или не читается.
    """

    pass


class SamplingError(VipromError):
    """Requested more frames than a clip provides.

    Note (RU): Запрошено больше кадров, чем есть в клипе.
    """

    pass


class ShapeMismatchError(InvalidInputError):
    """Tensor or image shape differs from the configured one.

    Note (RU): Форма тензора или изображения не совпадает с ожидаемой.
    """

    def __init__(
        self,
        message: str = "",
        expected: Optional[Sequence[int]] = None,
        actual: Optional[Sequence[int]] = None,
        *args: Any,
    ) -> None:
        self.expected = tuple(expected) if expected is not None else None
        self.actual = tuple(actual) if actual is not None else None
        super().__init__(message, *args)

    def __str__(self) -> str:
        if self.expected is not None or self.actual is not None:
            return f"{self.message}: expected {self.expected}, got {self.actual}"
        return self.message


class CheckpointError(VipromError):
    """Checkpoint file cannot be read or written.

    Note (RU): Ошибка чтения или записи чекпойнта.
    """

    pass


class FingerprintMismatchError(CheckpointError):
    """Stored fingerprint does not match the checkpoint content.

    Note (RU): Отпечаток не совпадает с содержимым чекпойнта.
    """

    def __init__(self, message: str = "", stored: str = "", computed: str = "", *args: Any) -> None:
        self.stored = stored
        self.computed = computed
        super().__init__(message, *args)

    def __str__(self) -> str:
        return f"{self.message} (stored {self.stored}, computed {self.computed})"


class StageTransitionError(VipromError):
    """Pre-training stages applied out of order.

    Note (RU): Нарушен порядок стадий предобучения.
    """

    pass


class TrainingDivergedError(VipromError):
    """Loss became non-finite; carries a diagnostic snapshot.

    Note (RU): Функция потерь стала не конечной.
    """

    def __init__(
        self, message: str = "", snapshot: Optional[Dict[str, Any]] = None, *args: Any
    ) -> None:
        self.snapshot = snapshot or {}
        super().__init__(message, *args)


class PseudoLabelError(VipromError):
    """Pseudo-label teacher or record file is invalid.

    Note (RU): Ошибка учителя или файла псевдо-меток.
    """

    pass


class MissingPseudoLabelError(PseudoLabelError):
    """A sampled frame has no pseudo-label record.

    Note (RU): Для кадра нет псевдо-метки.
    """

    pass


class ToyEnvError(VipromError):
    """Toy manipulation environment error.

    Note (RU): Ошибка игрушечной среды манипуляции.
    """

    pass


class ActionDimensionError(ToyEnvError):
    """Action vector has the wrong dimension.

    Note (RU): Неверная размерность действия.
    """

    pass


class ExpertFailureError(ToyEnvError):
    """Scripted expert did not solve the task; signals an environment regression.

    Note (RU): Скриптовый эксперт не решил задачу.
    """

    pass


class BenchError(VipromError):
    """Benchmark grid cannot be executed.

    Note (RU): Ошибка запуска сетки экспериментов.
    """

    pass


class UnknownFormatError(VipromError):
    """Requested report format is not supported.

    Note (RU): Неподдерживаемый формат отчёта.
    """

    pass
