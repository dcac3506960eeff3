"""Pytest fixtures for viprom-lab tests."""

import json
from pathlib import Path
from typing import Any, Dict, Tuple

import pytest

from viprom_lab.dataset import ClipManifest, MemoryFrameStore, generate_synthetic_corpus
from viprom_lab.encoder import Checkpoint, EncoderConfig, init_encoder
from viprom_lab.imitation import BCConfig

HW = (16, 16)


@pytest.fixture
def tiny_encoder_config() -> EncoderConfig:
    """Small tiny-conv encoder for 16×16 frames."""
    return EncoderConfig(embedding_dim=16, input_hw=HW, width=4)


@pytest.fixture
def scratch_checkpoint(tiny_encoder_config: EncoderConfig) -> Checkpoint:
    """Scratch checkpoint of the tiny encoder."""
    return init_encoder(tiny_encoder_config, seed=0)


@pytest.fixture
def small_corpus() -> Tuple[ClipManifest, MemoryFrameStore]:
    """Synthetic corpus: 8 clips, 2 classes, 30 raw / 3 retained frames per clip."""
    return generate_synthetic_corpus(seed=7, n_clips=8, n_classes=2, image_hw=HW)


@pytest.fixture
def corpus_dir(tmp_path: Path, small_corpus: Tuple[ClipManifest, MemoryFrameStore]) -> Path:
    """The small corpus written as a frame store directory."""
    manifest, store = small_corpus
    root = tmp_path / "corpus"
    store.save(root, manifest)
    return root


@pytest.fixture
def fast_bc() -> BCConfig:
    """Behavior-cloning settings that run in a fraction of a second."""
    return BCConfig(steps=60, batch=16, n_demos=2, eval_every=30, eval_episodes=3, hidden_dim=32)


@pytest.fixture
def sample_narrations() -> Dict[str, Any]:
    """Annotation document in the package's own layout."""
    return {
        "videos": [
            {
                "video_id": "v1",
                "duration_s": 10.0,
                "narrations": [
                    {"timestamp_s": 2.0, "text": "#C C picks a cup"},
                    {"timestamp_s": 0.5, "text": "#C C opens the drawer"},
                    {"timestamp_s": 9.5, "text": "#C C closes the drawer"},
                ],
            },
            {
                "video_id": "v2",
                "duration_s": 4.0,
                "narrations": [{"timestamp_s": 1.0, "text": "#C C wipes the table"}],
            },
        ]
    }


@pytest.fixture
def narrations_file(tmp_path: Path, sample_narrations: Dict[str, Any]) -> Path:
    path = tmp_path / "narrations.json"
    path.write_text(json.dumps(sample_narrations), encoding="utf-8")
    return path
