"""Seeding discipline.

One global seed fans out to per-component seeds through :func:`derive_seed`,
so every component can be rerun in isolation and still see the same stream.

Note (RU): Управление случайными зёрнами.
"""

import hashlib
import random
import threading
from contextlib import contextmanager
from typing import Iterator, Union

import numpy as np
import torch

# torch.random.fork_rng touches process-wide state
_RNG_LOCK = threading.RLock()

SeedPart = Union[str, int]


def derive_seed(seed: int, *names: SeedPart) -> int:
    """Derive a component seed from the global one.

    The derived value is the first 8 bytes of
    ``sha256("<seed>:<name1>/<name2>/...")`` read big-endian, modulo 2**31.

    Args:
        seed: Global seed.
        *names: Component path, e.g. ``("bc", "push", 100)``.

    Returns:
        Seed in ``[0, 2**31)``.

    Note (RU): Вывод зерна компонента из глобального зерна.
    """
    key = f"{int(seed)}:" + "/".join(str(n) for n in names)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % (2**31)


def make_generator(seed: int) -> torch.Generator:
    """CPU torch generator seeded with ``seed``."""
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    return generator


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch global streams.

    Note (RU): Инициализация всех глобальных генераторов.
    """
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


@contextmanager
def seeded(seed: int) -> Iterator[None]:
    """Run a block with the global torch RNG seeded, restoring it afterwards.

    Used around code that draws from the global stream without accepting a
    generator (``nn.Module`` init, torchvision transforms). Blocks are
    serialized across threads.

    Note (RU): Временная инициализация глобального генератора torch.
    """
    with _RNG_LOCK, torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield
