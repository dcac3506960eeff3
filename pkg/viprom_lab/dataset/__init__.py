"""Clip manifests, frame stores and the synthetic corpus.

Note (RU): Манифесты клипов, хранилища кадров и синтетический корпус.
"""

from viprom_lab.dataset.manifest import (
    ClipEntry,
    ClipManifest,
    FrameRef,
    NarrationRecord,
    build_manifest,
    load_narrations,
)
from viprom_lab.dataset.render import Canvas, shape_centroid
from viprom_lab.dataset.sampling import (
    AugmentConfig,
    augment_pair,
    augment_views,
    build_augmentation,
    frames_to_tensor,
    iterate_batches,
    sample_clip_frames,
)
from viprom_lab.dataset.store import (
    DiskFrameStore,
    FrameImage,
    FrameStore,
    MemoryFrameStore,
    open_store,
)
from viprom_lab.dataset.synthetic import MAX_CLASSES, generate_synthetic_corpus

__all__ = [
    "AugmentConfig",
    "Canvas",
    "ClipEntry",
    "ClipManifest",
    "DiskFrameStore",
    "FrameImage",
    "FrameRef",
    "FrameStore",
    "MAX_CLASSES",
    "MemoryFrameStore",
    "NarrationRecord",
    "augment_pair",
    "augment_views",
    "build_augmentation",
    "build_manifest",
    "frames_to_tensor",
    "generate_synthetic_corpus",
    "iterate_batches",
    "load_narrations",
    "open_store",
    "sample_clip_frames",
    "shape_centroid",
]
