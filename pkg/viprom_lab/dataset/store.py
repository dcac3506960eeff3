"""Frame images and frame stores.

On disk a store is a directory with one ``manifest.json`` and one sub-directory
per clip holding lossless PNG frames named ``<frame_index:05d>.png``.

Note (RU): Кадры и хранилища кадров.
"""

from __future__ import annotations

import logging
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
from PIL import Image

from viprom_lab.base import VipromModel
from viprom_lab.dataset.manifest import ClipManifest, FrameRef
from viprom_lab.exceptions import FrameStoreError, InvalidInputError
from viprom_lab.utils import model
from viprom_lab.utils.io import PathLike

logger = logging.getLogger(__name__)

MANIFEST_FILENAME = "manifest.json"
FRAMES_DIRNAME = "frames"


@model
class FrameImage(VipromModel):
    """One RGB frame.

    Attributes:
        pixels: ``H×W×3`` float32 array with values in ``[0, 1]``.
        source: ``(clip_id, frame_index)`` the frame was read from.

    Note (RU): Кадр RGB.
    """

    pixels: np.ndarray = None  # type: ignore[assignment]
    source: Tuple[str, int] = ("", 0)

    def __post_init__(self) -> None:
        if self.pixels is None:
            raise InvalidInputError("FrameImage requires pixels")
        pixels = np.asarray(self.pixels, dtype=np.float32)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise InvalidInputError(f"Frame pixels must be H×W×3, got {pixels.shape}")
        if pixels.shape[0] == 0 or pixels.shape[1] == 0:
            raise InvalidInputError("Frame pixels must be non-empty")
        if not np.isfinite(pixels).all() or pixels.min() < 0.0 or pixels.max() > 1.0:
            raise InvalidInputError("Frame pixels must lie in [0, 1]")
        self.pixels = pixels
        self.source = (str(self.source[0]), int(self.source[1]))

    @property
    def hw(self) -> Tuple[int, int]:
        return int(self.pixels.shape[0]), int(self.pixels.shape[1])

    @classmethod
    def from_uint8(cls, array: np.ndarray, source: Tuple[str, int]) -> "FrameImage":
        return cls(pixels=np.asarray(array, dtype=np.float32) / 255.0, source=source)

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.rint(self.pixels * 255.0), 0, 255).astype(np.uint8)

    def to_dict(self) -> Dict[str, object]:
        return {"source": list(self.source), "hw": list(self.hw)}


class FrameStore:
    """Read access to the frames of a corpus.

    Note (RU): Доступ к кадрам корпуса.
    """

    def load_uint8(self, clip_id: str, frame_index: int) -> np.ndarray:
        raise NotImplementedError

    def load(self, clip_id: str, frame_index: int) -> FrameImage:
        """Load one frame.

        Raises:
            FrameStoreError: If the frame is not in the store.
        """
        return FrameImage.from_uint8(self.load_uint8(clip_id, frame_index), (clip_id, frame_index))

    def load_many(self, refs: Iterable[FrameRef]) -> List[FrameImage]:
        return [self.load(clip_id, index) for clip_id, index in refs]


class MemoryFrameStore(FrameStore):
    """Frames held in memory as ``uint8`` arrays.

    Note (RU): Хранилище кадров в памяти.
    """

    def __init__(self, frames: Optional[Dict[FrameRef, np.ndarray]] = None) -> None:
        self.frames: Dict[FrameRef, np.ndarray] = dict(frames or {})

    def put(self, clip_id: str, frame_index: int, array: np.ndarray) -> None:
        if array.dtype != np.uint8 or array.ndim != 3 or array.shape[2] != 3:
            raise FrameStoreError(f"Frames must be H×W×3 uint8, got {array.dtype} {array.shape}")
        self.frames[(clip_id, int(frame_index))] = array

    def load_uint8(self, clip_id: str, frame_index: int) -> np.ndarray:
        try:
            return self.frames[(clip_id, int(frame_index))]
        except KeyError as e:
            raise FrameStoreError(f"Frame {frame_index} of clip {clip_id} not in store") from e

    def __len__(self) -> int:
        return len(self.frames)

    def save(self, root: PathLike, manifest: ClipManifest) -> "DiskFrameStore":
        """Write every raw frame of ``manifest`` and the manifest itself under ``root``.

        Note (RU): Сохранение хранилища на диск.
        """
        root = Path(root)
        for clip in manifest.clips:
            clip_dir = root / FRAMES_DIRNAME / clip.clip_id
            try:
                clip_dir.mkdir(parents=True, exist_ok=True)
                for index in clip.raw_frame_indices:
                    array = self.load_uint8(clip.clip_id, index)
                    Image.fromarray(array, mode="RGB").save(
                        clip_dir / f"{index:05d}.png", format="PNG", compress_level=6
                    )
            except OSError as e:
                raise FrameStoreError(f"Cannot write frames of clip {clip.clip_id}: {e}") from e
        manifest.save(root / MANIFEST_FILENAME)
        logger.info(f"Wrote {len(manifest)} clips to {root}")
        return DiskFrameStore(root)


class DiskFrameStore(FrameStore):
    """Frames read lazily from a store directory.

    Args:
        root: Store directory.
        cache_size: Number of decoded frames kept in memory.

    Note (RU): Хранилище кадров на диске.
    """

    def __init__(self, root: PathLike, cache_size: int = 8192) -> None:
        self.root = Path(root)
        self._load_cached = lru_cache(maxsize=cache_size)(self._read)

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_FILENAME

    def manifest(self) -> ClipManifest:
        return ClipManifest.load(self.manifest_path)

    def frame_path(self, clip_id: str, frame_index: int) -> Path:
        return self.root / FRAMES_DIRNAME / clip_id / f"{int(frame_index):05d}.png"

    def _read(self, clip_id: str, frame_index: int) -> np.ndarray:
        path = self.frame_path(clip_id, frame_index)
        try:
            with Image.open(path) as image:
                array = np.asarray(image.convert("RGB"), dtype=np.uint8)
        except FileNotFoundError as e:
            raise FrameStoreError(f"Frame {frame_index} of clip {clip_id} not in store") from e
        except OSError as e:
            raise FrameStoreError(f"Cannot decode {path}: {e}") from e
        array.setflags(write=False)
        return array

    def load_uint8(self, clip_id: str, frame_index: int) -> np.ndarray:
        result: np.ndarray = self._load_cached(clip_id, int(frame_index))
        return result


def open_store(root: PathLike) -> Tuple[ClipManifest, DiskFrameStore]:
    """Open a store directory and its manifest."""
    store = DiskFrameStore(root)
    if not store.manifest_path.exists():
        raise FrameStoreError(f"No {MANIFEST_FILENAME} under {root}")
    return store.manifest(), store
