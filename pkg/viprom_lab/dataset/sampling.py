"""Frame sampling, augmentation and batching.

Note (RU): Выборка кадров, аугментации и формирование батчей.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torchvision.transforms import v2

from viprom_lab.base import VipromModel
from viprom_lab.dataset.manifest import ClipEntry, FrameRef
from viprom_lab.dataset.store import FrameImage, FrameStore
from viprom_lab.exceptions import InvalidInputError, SamplingError
from viprom_lab.utils import model
from viprom_lab.utils.seeding import seeded

logger = logging.getLogger(__name__)


def sample_indices(n_available: int, n: int, offset: int = 0) -> List[int]:
    """Positions of ``n`` evenly strided samples out of ``n_available``.

    The stride is ``(n_available - 1) // (n - 1)`` so the first sample is the
    first frame; 5 out of 30 gives ``[0, 7, 14, 21, 28]``.
    """
    if n < 1:
        raise SamplingError(f"Cannot sample {n} frames")
    if n == 1:
        return [offset]
    stride = (n_available - 1) // (n - 1)
    return [offset + k * stride for k in range(n)]


def sample_clip_frames(
    clip: ClipEntry,
    store: FrameStore,
    n: int,
    rng_seed: int = 0,
    jitter: bool = False,
) -> List[FrameImage]:
    """Sample ``n`` frames of a clip with an even stride, in temporal order.

    Frames are drawn from the raw (pre-downsampling) frames of the clip.

    Args:
        clip: Clip to sample from.
        store: Frame store holding the clip's raw frames.
        n: Number of frames.
        rng_seed: Seed of the start offset when ``jitter`` is set.
        jitter: Shift the strided window by a seeded offset instead of
            anchoring it at the first frame.

    Raises:
        SamplingError: When ``n`` exceeds the clip's raw frame count.

    Note (RU): Равномерная выборка кадров клипа.
    """
    raw = clip.raw_frame_indices
    if n > len(raw):
        raise SamplingError(
            f"Clip {clip.clip_id} has {len(raw)} frames, cannot sample {n}"
        )
    positions = sample_indices(len(raw), n)
    if jitter:
        slack = len(raw) - 1 - positions[-1]
        if slack > 0:
            offset = int(np.random.default_rng(rng_seed).integers(0, slack + 1))
            positions = [p + offset for p in positions]
    return store.load_many((clip.clip_id, raw[p]) for p in positions)


@model
class AugmentConfig(VipromModel):
    """Two-view augmentation recipe.

    Attributes:
        crop_scale: Area range of the random resized crop.
        flip_p: Horizontal flip probability.
        brightness: Color jitter brightness.
        contrast: Color jitter contrast.
        saturation: Color jitter saturation.
        hue: Color jitter hue.
        jitter_p: Probability of applying color jitter.
        grayscale_p: Random grayscale probability.
        blur_p: Gaussian blur probability.
        blur_sigma: Gaussian blur sigma range.

    Note (RU): Параметры аугментаций.
    """

    crop_scale: Tuple[float, float] = (0.35, 1.0)
    flip_p: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    jitter_p: float = 0.8
    grayscale_p: float = 0.2
    blur_p: float = 0.5
    blur_sigma: Tuple[float, float] = (0.1, 1.0)

    def __post_init__(self) -> None:
        self.crop_scale = (float(self.crop_scale[0]), float(self.crop_scale[1]))
        self.blur_sigma = (float(self.blur_sigma[0]), float(self.blur_sigma[1]))


def build_augmentation(config: AugmentConfig, hw: Tuple[int, int]) -> v2.Compose:
    """Torchvision pipeline for float ``C×H×W`` tensors that keeps ``hw``."""
    kernel = 3 if min(hw) < 64 else 7
    return v2.Compose(
        [
            v2.RandomResizedCrop(hw, scale=config.crop_scale, antialias=True),
            v2.RandomHorizontalFlip(p=config.flip_p),
            v2.RandomApply(
                [
                    v2.ColorJitter(
                        brightness=config.brightness,
                        contrast=config.contrast,
                        saturation=config.saturation,
                        hue=config.hue,
                    )
                ],
                p=config.jitter_p,
            ),
            v2.RandomGrayscale(p=config.grayscale_p),
            v2.RandomApply([v2.GaussianBlur(kernel, sigma=config.blur_sigma)], p=config.blur_p),
        ]
    )


def frames_to_tensor(
    frames: Sequence[FrameImage], dtype: Optional[torch.dtype] = None
) -> torch.Tensor:
    """Stack frames into a ``B×3×H×W`` tensor of ``dtype`` (torch's default when unset).

    Raises:
        InvalidInputError: On an empty batch or mixed frame sizes.
    """
    if not frames:
        raise InvalidInputError("Cannot stack an empty frame batch")
    sizes = {f.hw for f in frames}
    if len(sizes) != 1:
        raise InvalidInputError(f"Mixed frame sizes in batch: {sorted(sizes)}")
    array = np.stack([f.pixels for f in frames]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(array)).to(dtype or torch.get_default_dtype())


def tensor_to_frame(tensor: torch.Tensor, source: Tuple[str, int]) -> FrameImage:
    pixels = tensor.detach().clamp(0.0, 1.0).permute(1, 2, 0).to(torch.float32).numpy()
    return FrameImage(pixels=pixels, source=source)


def augment_views(
    images: torch.Tensor, rng_seed: int, transform: v2.Compose
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Two independent augmentations of every image of a ``B×3×H×W`` batch.

    Draws are made image by image (view a, then view b) under ``seeded``, so
    results depend only on ``rng_seed`` and the batch.
    """
    views_a, views_b = [], []
    with seeded(rng_seed):
        for image in images:
            views_a.append(transform(image).clamp(0.0, 1.0))
            views_b.append(transform(image).clamp(0.0, 1.0))
    return torch.stack(views_a), torch.stack(views_b)


def augment_pair(
    image: FrameImage, rng_seed: int, config: Optional[AugmentConfig] = None
) -> Tuple[FrameImage, FrameImage]:
    """Two independently augmented views of one frame.

    Random resized crop, horizontal flip, color jitter, grayscale and optional
    blur; the output keeps the input ``H×W×3`` shape and is a pure function of
    ``(image, rng_seed, config)``.

    Note (RU): Две независимые аугментации одного кадра.
    """
    transform = build_augmentation(config or AugmentConfig(), image.hw)
    batch = frames_to_tensor([image])
    view_a, view_b = augment_views(batch, rng_seed, transform)
    return tensor_to_frame(view_a[0], image.source), tensor_to_frame(view_b[0], image.source)


def iterate_batches(
    refs: Sequence[FrameRef],
    store: FrameStore,
    batch_size: int,
    seed: int,
    shuffle: bool = True,
    drop_last: bool = False,
    prefetch_workers: int = 0,
) -> Iterator[List[FrameImage]]:
    """Yield frame batches in a seed-determined order.

    With ``prefetch_workers > 0`` frames are loaded by a thread pool; batches
    are still yielded in the same order as the sequential path.

    Note (RU): Итерация по батчам кадров.
    """
    if batch_size < 1:
        raise InvalidInputError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(refs))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(refs))
    chunks = [
        [refs[i] for i in order[start : start + batch_size]]
        for start in range(0, len(refs), batch_size)
    ]
    if drop_last and chunks and len(chunks[-1]) < batch_size:
        chunks.pop()

    if prefetch_workers <= 0:
        for chunk in chunks:
            yield store.load_many(chunk)
        return

    with ThreadPoolExecutor(max_workers=prefetch_workers) as pool:
        # map keeps submission order
        yield from pool.map(store.load_many, chunks)
