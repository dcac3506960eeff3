"""Synthetic labeled clip corpus for desk-scale runs.

Each clip shows one coloured shape drifting left to right over a gray textured
background. The class fixes the shape and its size (and biases the hue), so it
can be read off any single frame; the horizontal position grows strictly with
time, so frame order can be read off the content.

Note (RU): Синтетический размеченный корпус клипов.
"""

import logging
from typing import Dict, List, Tuple

import numpy as np
from matplotlib.colors import hsv_to_rgb

from viprom_lab.dataset.manifest import (
    ClipEntry,
    ClipManifest,
    raw_frame_count,
    retained_indices,
)
from viprom_lab.dataset.render import SHAPES, Canvas
from viprom_lab.dataset.store import MemoryFrameStore
from viprom_lab.enums import CorpusKind
from viprom_lab.exceptions import InvalidInputError

logger = logging.getLogger(__name__)

SIZES: Tuple[float, ...] = (0.15, 0.23)
MAX_CLASSES = len(SHAPES) * len(SIZES)


def class_appearance(label: int, n_classes: int) -> Tuple[str, float, float]:
    """``(shape, size, base_hue)`` of a class."""
    shape = SHAPES[label % len(SHAPES)]
    size = SIZES[label // len(SHAPES)]
    return shape, size, label / n_classes


def generate_synthetic_corpus(
    seed: int,
    n_clips: int,
    n_classes: int,
    fps: int = 30,
    duration_s: float = 1.0,
    downsample_factor: int = 10,
    image_hw: Tuple[int, int] = (32, 32),
    kind: CorpusKind = CorpusKind.CLIPS,
) -> Tuple[ClipManifest, MemoryFrameStore]:
    """Render a deterministic labeled clip corpus.

    Args:
        seed: Corpus seed; equal seeds give identical bytes.
        n_clips: Number of clips.
        n_classes: Number of classes, at most ``MAX_CLASSES``. Labels are
            balanced across clips.
        fps: Frame rate of the rendered clips.
        duration_s: Clip length in seconds.
        downsample_factor: Stride of the retained frames.
        image_hw: Frame size.
        kind: ``clips`` for moving shapes, ``static`` for one still frame
            repeated over the clip.

    Returns:
        ``(manifest, store)``; the store holds every raw frame.

    Raises:
        InvalidInputError: On a zero-size image or out-of-range counts.

    Note (RU): Генерация синтетического корпуса.
    """
    height, width = image_hw
    if height <= 0 or width <= 0:
        raise InvalidInputError(f"Image size must be positive, got {height}×{width}")
    if n_classes < 2 or n_classes > MAX_CLASSES:
        raise InvalidInputError(f"n_classes must be in [2, {MAX_CLASSES}], got {n_classes}")
    if n_clips < 1:
        raise InvalidInputError(f"n_clips must be >= 1, got {n_clips}")
    n_raw = raw_frame_count(fps, duration_s)
    if n_raw < 1 or downsample_factor < 1:
        raise InvalidInputError("Clips must hold at least one frame")

    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n_clips) % n_classes)
    kind = CorpusKind(kind)

    store = MemoryFrameStore()
    clips = []
    for i in range(n_clips):
        label = int(labels[i])
        clip_id = f"synth-{i:05d}"
        frames = _render_clip(rng, label, n_classes, n_raw, height, width, kind)
        for index, frame in enumerate(frames):
            store.put(clip_id, index, frame)
        raw = list(range(n_raw))
        clips.append(
            ClipEntry(
                clip_id=clip_id,
                video_id=clip_id,
                raw_frame_indices=raw,
                retained_frame_indices=retained_indices(raw, downsample_factor),
                label_hint=label,
            )
        )

    metadata: Dict[str, object] = {
        "generator": "synthetic",
        "seed": seed,
        "n_classes": n_classes,
        "image_hw": [height, width],
        "kind": kind.value,
        "skipped_narrations": 0,
    }
    manifest = ClipManifest(
        clips=clips,
        fps=fps,
        clip_duration_s=duration_s,
        downsample_factor=downsample_factor,
        metadata=metadata,
    )
    logger.info(f"Rendered {n_clips} synthetic clips ({kind.value}, {n_classes} classes)")
    return manifest, store


def _render_clip(
    rng: np.random.Generator,
    label: int,
    n_classes: int,
    n_raw: int,
    height: int,
    width: int,
    kind: CorpusKind,
) -> List[np.ndarray]:
    shape, size, base_hue = class_appearance(label, n_classes)
    hue = (base_hue + rng.uniform(-0.3, 0.3) / n_classes) % 1.0
    color = hsv_to_rgb([hue, rng.uniform(0.75, 0.95), rng.uniform(0.8, 1.0)])

    gray = rng.uniform(0.3, 0.6)
    texture = np.clip(gray + rng.normal(0.0, 0.04, size=(height, width)), 0.0, 1.0)
    background = np.repeat(texture[..., None], 3, axis=2)

    margin = size + 0.03
    # spans differ by less than a factor of two across clips
    x_start = rng.uniform(margin, 0.3)
    x_end = rng.uniform(0.7, 1.0 - margin)
    y_base = rng.uniform(0.35, 0.65)
    amplitude = rng.uniform(0.0, 0.1)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    still = rng.uniform(0.0, 1.0)

    t = np.linspace(0.0, 1.0, n_raw) if n_raw > 1 else np.zeros(1)
    if kind == CorpusKind.STATIC:
        t = np.full_like(t, still)
    xs = x_start + (x_end - x_start) * t
    ys = y_base + amplitude * np.sin(2.0 * np.pi * t + phase)

    frames = []
    for x, y in zip(xs, ys):
        canvas = Canvas(height, width, background)
        canvas.draw(shape, (float(x), float(y)), size, color)
        frames.append(canvas.to_uint8())
    return frames
