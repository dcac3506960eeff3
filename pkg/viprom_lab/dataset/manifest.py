"""Clip manifests following the egocentric narration recipe.

Every narration anchors a short clip ``[t, t + duration)`` of the source video;
the clip keeps a uniform stride-``downsample_factor`` subsequence of its raw
frames. With 30 fps, 1 s clips and a 10-fold downsampling each clip keeps
three frames.

Note (RU): Манифест клипов, построенный по наррациям.
"""

from __future__ import annotations

import logging
import math
from dataclasses import field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from typing_extensions import Self

from viprom_lab.base import VipromModel, dump_document
from viprom_lab.exceptions import ConfigError, ManifestError
from viprom_lab.utils import model
from viprom_lab.utils.io import PathLike, read_json, write_text

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1

FrameRef = Tuple[str, int]


@model
class NarrationRecord(VipromModel):
    """A narration anchoring one clip.

    Attributes:
        video_id: Source video.
        timestamp_s: Narration time in seconds.
        text: Narration text, kept for provenance only.

    Note (RU): Наррация, задающая начало клипа.
    """

    video_id: str = ""
    timestamp_s: float = 0.0
    text: str = ""

    def __post_init__(self) -> None:
        self._id_attrs = (self.video_id, self.timestamp_s)


@model
class ClipEntry(VipromModel):
    """One clip of the manifest.

    Attributes:
        clip_id: Unique clip identifier.
        video_id: Source video.
        raw_frame_indices: Frame indices covered by the clip before downsampling.
        retained_frame_indices: Frames kept after downsampling.
        label_hint: Ground-truth class of synthetic clips.

    Note (RU): Клип манифеста.
    """

    clip_id: str = ""
    video_id: str = ""
    raw_frame_indices: List[int] = field(default_factory=list)
    retained_frame_indices: List[int] = field(default_factory=list)
    label_hint: Optional[int] = None

    def __post_init__(self) -> None:
        self._id_attrs = (self.clip_id,)

    def validate(self) -> None:
        """Check index invariants.

        Raises:
            ManifestError: If indices are not strictly increasing or the
                retained frames are not a subset of the raw ones.
        """
        for name, indices in (
            ("raw_frame_indices", self.raw_frame_indices),
            ("retained_frame_indices", self.retained_frame_indices),
        ):
            if any(b <= a for a, b in zip(indices, indices[1:])):
                raise ManifestError(f"Clip {self.clip_id}: {name} not strictly increasing")
        if not set(self.retained_frame_indices) <= set(self.raw_frame_indices):
            raise ManifestError(f"Clip {self.clip_id}: retained frames outside the raw span")


@model
class ClipManifest(VipromModel):
    """Deterministic description of a clip corpus.

    Attributes:
        clips: Clips in manifest order.
        fps: Source frame rate.
        clip_duration_s: Clip length in seconds.
        downsample_factor: Uniform temporal stride.
        version: Manifest schema version.
        metadata: Build statistics (``skipped_narrations`` and friends).

    Note (RU): Манифест корпуса клипов.
    """

    clips: List[ClipEntry] = field(default_factory=list)
    fps: int = 30
    clip_duration_s: float = 1.0
    downsample_factor: int = 10
    version: int = MANIFEST_VERSION
    metadata: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def de_json(cls, data: Any, strict: bool = False) -> Optional[Self]:
        if not cls.is_dict_model_data(data):
            return None

        data_dict: Dict[str, Any] = data.copy()
        if "clips" in data_dict:
            data_dict["clips"] = ClipEntry.de_list(data_dict["clips"], strict=strict)

        return cls(**cls.cleanup_data(data_dict, strict=strict))

    def __len__(self) -> int:
        return len(self.clips)

    @property
    def frames_per_clip(self) -> int:
        """Raw frames per clip, ``floor(fps × duration)``."""
        return raw_frame_count(self.fps, self.clip_duration_s)

    @property
    def retained_per_clip(self) -> int:
        """Retained frames per clip, ``floor(fps × duration / factor)``."""
        return self.frames_per_clip // self.downsample_factor

    @property
    def total_retained_frames(self) -> int:
        return sum(len(c.retained_frame_indices) for c in self.clips)

    def clip(self, clip_id: str) -> ClipEntry:
        for entry in self.clips:
            if entry.clip_id == clip_id:
                return entry
        raise ManifestError(f"Unknown clip: {clip_id}")

    def frame_refs(self) -> List[FrameRef]:
        """All retained frames as ``(clip_id, frame_index)`` in manifest order."""
        return [(c.clip_id, i) for c in self.clips for i in c.retained_frame_indices]

    def subset(self, clip_ids: Iterable[str]) -> "ClipManifest":
        """Manifest restricted to ``clip_ids`` (manifest order is kept)."""
        wanted = set(clip_ids)
        return ClipManifest(
            clips=[c for c in self.clips if c.clip_id in wanted],
            fps=self.fps,
            clip_duration_s=self.clip_duration_s,
            downsample_factor=self.downsample_factor,
            version=self.version,
            metadata=dict(self.metadata),
        )

    def split(self, holdout_fraction: float, seed: int) -> Tuple["ClipManifest", "ClipManifest"]:
        """Split clips into (train, held-out) manifests with a seeded shuffle.

        Note (RU): Разбиение манифеста на обучающую и отложенную части.
        """
        if not 0.0 < holdout_fraction < 1.0:
            raise ManifestError(f"holdout_fraction must be in (0, 1), got {holdout_fraction}")
        order = np.random.default_rng(seed).permutation(len(self.clips))
        n_holdout = max(1, int(round(len(self.clips) * holdout_fraction)))
        held = {self.clips[i].clip_id for i in order[:n_holdout]}
        train = [c.clip_id for c in self.clips if c.clip_id not in held]
        return self.subset(train), self.subset(held)

    def save(self, path: PathLike) -> Path:
        """Write the manifest as a byte-stable JSON document."""
        return write_text(path, dump_document(self), error_cls=ManifestError)

    @classmethod
    def load(cls, path: PathLike) -> "ClipManifest":
        """Read a manifest written by :meth:`save`.

        Raises:
            ManifestError: On unreadable files, schema mismatch or broken invariants.
        """
        data = read_json(path, error_cls=ManifestError)
        if not isinstance(data, dict):
            raise ManifestError(f"{path}: manifest must be a JSON object")
        if data.get("version") != MANIFEST_VERSION:
            raise ManifestError(
                f"{path}: unsupported manifest version {data.get('version')!r}"
            )
        try:
            manifest = cls.de_json(data, strict=True)
        except ConfigError as e:
            raise ManifestError(f"{path}: {e}") from e
        if manifest is None:
            raise ManifestError(f"{path}: empty manifest document")
        for entry in manifest.clips:
            entry.validate()
        return manifest


def raw_frame_count(fps: int, clip_duration_s: float) -> int:
    # epsilon absorbs products like 30 * 0.1 * 10
    return int(math.floor(fps * clip_duration_s + 1e-9))


def retained_indices(raw: Sequence[int], downsample_factor: int) -> List[int]:
    """Uniform stride subsequence anchored at the first raw frame, floor-truncated."""
    keep = len(raw) // downsample_factor
    return list(raw[::downsample_factor][:keep])


def build_manifest(
    narrations: Sequence[NarrationRecord],
    fps: int,
    clip_duration_s: float,
    downsample_factor: int,
    video_durations: Optional[Dict[str, float]] = None,
) -> ClipManifest:
    """Cut one clip per narration and downsample it.

    Args:
        narrations: Narrations, timestamp-sorted within each video.
        fps: Source frame rate.
        clip_duration_s: Clip length in seconds.
        downsample_factor: Keep every ``downsample_factor``-th raw frame.
        video_durations: Known video lengths; clips running past the end are
            skipped and counted in ``metadata["skipped_narrations"]``.

    Returns:
        Manifest with one clip per kept narration, in input order.

    Raises:
        ManifestError: On non-positive parameters or unsorted narrations.

    Note (RU): Построение манифеста: один клип на наррацию.
    """
    if fps <= 0:
        raise ManifestError(f"fps must be positive, got {fps}")
    if clip_duration_s <= 0:
        raise ManifestError(f"clip_duration_s must be positive, got {clip_duration_s}")
    if downsample_factor <= 0:
        raise ManifestError(f"downsample_factor must be positive, got {downsample_factor}")

    n_raw = raw_frame_count(fps, clip_duration_s)
    durations = video_durations or {}

    clips: List[ClipEntry] = []
    skipped = 0
    last_ts: Dict[str, float] = {}
    ordinal: Dict[str, int] = {}

    for record in narrations:
        previous = last_ts.get(record.video_id)
        if previous is not None and record.timestamp_s < previous:
            raise ManifestError(
                f"Narrations of video {record.video_id} are not timestamp-sorted "
                f"({record.timestamp_s} after {previous})"
            )
        last_ts[record.video_id] = record.timestamp_s
        k = ordinal.get(record.video_id, 0)
        ordinal[record.video_id] = k + 1

        video_end = durations.get(record.video_id)
        if record.timestamp_s < 0 or (
            video_end is not None and record.timestamp_s + clip_duration_s > video_end + 1e-9
        ):
            skipped += 1
            logger.warning(
                f"Skipping narration {record.video_id}@{record.timestamp_s}s: "
                "clip exceeds video bounds"
            )
            continue

        start = int(math.floor(record.timestamp_s * fps + 1e-9))
        raw = list(range(start, start + n_raw))
        clips.append(
            ClipEntry(
                clip_id=f"{record.video_id}-{k:05d}",
                video_id=record.video_id,
                raw_frame_indices=raw,
                retained_frame_indices=retained_indices(raw, downsample_factor),
            )
        )

    return ClipManifest(
        clips=clips,
        fps=fps,
        clip_duration_s=clip_duration_s,
        downsample_factor=downsample_factor,
        metadata={"skipped_narrations": skipped},
    )


def load_narrations(path: PathLike) -> Tuple[List[NarrationRecord], Dict[str, float]]:
    """Read narrations from an annotation file.

    Two layouts are understood:

    * the package's own ``{"videos": [{"video_id", "duration_s",
      "narrations": [{"timestamp_s", "text"}]}]}``;
    * the Ego4D narration layout ``{video_uid: {"narration_pass_1":
      {"narrations": [{"timestamp_sec", "narration_text"}]}}}`` (durations
      are unknown there, so no clip is skipped as out of bounds).

    Narrations are returned timestamp-sorted within each video.

    Returns:
        ``(narrations, video_durations)``.

    Note (RU): Чтение файла аннотаций с наррациями.
    """
    data = read_json(path, error_cls=ManifestError)
    if not isinstance(data, dict):
        raise ManifestError(f"{path}: annotation file must be a JSON object")

    narrations: List[NarrationRecord] = []
    durations: Dict[str, float] = {}

    try:
        _parse_annotations(data, narrations, durations)
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"{path}: malformed narration entry: {e!r}") from e

    logger.info(f"Loaded {len(narrations)} narrations from {path}")
    return narrations, durations


def _parse_annotations(
    data: Dict[str, Any], narrations: List[NarrationRecord], durations: Dict[str, float]
) -> None:
    if "videos" in data:
        for video in data["videos"]:
            video_id = str(video["video_id"])
            if video.get("duration_s") is not None:
                durations[video_id] = float(video["duration_s"])
            items = [
                NarrationRecord(
                    video_id=video_id,
                    timestamp_s=float(n["timestamp_s"]),
                    text=str(n.get("text", "")),
                )
                for n in video.get("narrations", [])
            ]
            narrations.extend(sorted(items, key=lambda r: r.timestamp_s))
    else:
        for video_id in sorted(data):
            passes = data[video_id] or {}
            raw = (passes.get("narration_pass_1") or {}).get("narrations", [])
            items = [
                NarrationRecord(
                    video_id=str(video_id),
                    timestamp_s=float(n["timestamp_sec"]),
                    text=str(n.get("narration_text", "")),
                )
                for n in raw
            ]
            narrations.extend(sorted(items, key=lambda r: r.timestamp_s))
