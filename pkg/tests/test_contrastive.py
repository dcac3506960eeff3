"""Tests for the contrastive stage."""

import math

import pytest
import torch
import torch.nn.functional as F

from viprom_lab.contrastive import (
    ContrastiveBatch,
    ContrastiveConfig,
    ContrastiveState,
    contrastive_step,
    info_nce,
    momentum_update,
    steps_per_epoch,
    total_contrastive_steps,
    train_contrastive,
)
from viprom_lab.dataset import build_augmentation, generate_synthetic_corpus
from viprom_lab.encoder import EncoderConfig, freeze, init_encoder, linear_probe, parameter_hash
from viprom_lab.enums import Stage
from viprom_lab.exceptions import ConfigError, InvalidInputError, StageTransitionError
from viprom_lab.utils.metrics import MetricsWriter


@pytest.fixture
def fast_contrastive() -> ContrastiveConfig:
    return ContrastiveConfig(
        epochs=1, batch_size=8, lr=1e-3, projection_dim=8, hidden_dim=16, max_steps=3
    )


@pytest.fixture
def batch(small_corpus, fast_contrastive):
    manifest, store = small_corpus
    frames = store.load_many(manifest.frame_refs()[:8])
    transform = build_augmentation(fast_contrastive.augment, (16, 16))
    return ContrastiveBatch.from_frames(frames, rng_seed=0, transform=transform)


class TestInfoNCE:
    """Tests for info_nce."""

    def test_two_orthogonal_rows(self):
        q = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
        loss = info_nce(q, q.clone(), temperature=1.0)
        assert loss.item() == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-4)
        assert loss.item() == pytest.approx(0.3133, abs=1e-4)

    @pytest.mark.parametrize("batch_size", [2, 7, 64])
    def test_identical_rows(self, batch_size):
        """Equal logits give exactly ln B."""
        rows = F.normalize(torch.ones(batch_size, 5), dim=1)
        loss = info_nce(rows, rows.clone(), temperature=0.2)
        assert loss.item() == pytest.approx(math.log(batch_size), abs=1e-6)

    def test_random_unit_vectors_at_chance(self):
        generator = torch.Generator().manual_seed(0)
        losses = []
        for _ in range(20):
            q = F.normalize(torch.randn(256, 512, generator=generator), dim=1)
            k = F.normalize(torch.randn(256, 512, generator=generator), dim=1)
            losses.append(info_nce(q, k, temperature=1.0).item())
        assert sum(losses) / len(losses) == pytest.approx(math.log(256), abs=0.05)

    def test_unnormalized_rejected(self):
        q = torch.tensor([[2.0, 0.0], [0.0, 1.0]])
        with pytest.raises(InvalidInputError):
            info_nce(q, F.normalize(q, dim=1), temperature=1.0)

    def test_invalid_arguments(self):
        q = F.normalize(torch.ones(1, 3), dim=1)
        with pytest.raises(InvalidInputError):
            info_nce(q, q, temperature=1.0)
        q = F.normalize(torch.ones(2, 3), dim=1)
        with pytest.raises(InvalidInputError):
            info_nce(q, q, temperature=0.0)
        with pytest.raises(InvalidInputError):
            info_nce(q, F.normalize(torch.ones(2, 4), dim=1), temperature=1.0)

    def test_gradcheck(self):
        torch.manual_seed(0)
        q = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
        k = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)

        def loss(a, b):
            return info_nce(F.normalize(a, dim=1), F.normalize(b, dim=1), 0.5)

        assert torch.autograd.gradcheck(loss, (q, k), eps=1e-4, atol=1e-5, rtol=1e-3)


class TestMomentumUpdate:
    """Tests for momentum_update."""

    def _params(self):
        key = {"w": torch.tensor([1.0, 2.0])}
        query = {"w": torch.tensor([3.0, 6.0]), "extra": torch.zeros(1)}
        return key, query

    def test_m_one_keeps_key(self):
        key, query = self._params()
        momentum_update(key, query, 1.0)
        assert torch.equal(key["w"], torch.tensor([1.0, 2.0]))

    def test_m_zero_copies_query(self):
        key, query = self._params()
        momentum_update(key, query, 0.0)
        assert torch.equal(key["w"], query["w"])

    def test_half(self):
        key, query = self._params()
        momentum_update(key, query, 0.5)
        assert torch.allclose(key["w"], torch.tensor([2.0, 4.0]))

    def test_invalid(self):
        key, query = self._params()
        with pytest.raises(InvalidInputError):
            momentum_update(key, query, 1.5)
        with pytest.raises(InvalidInputError):
            momentum_update({"v": torch.zeros(2)}, query, 0.5)
        with pytest.raises(InvalidInputError):
            momentum_update({"w": torch.zeros(3)}, query, 0.5)


class TestContrastiveConfig:
    """Tests for ContrastiveConfig."""

    def test_defaults(self):
        config = ContrastiveConfig()
        assert config.temperature == 0.2
        assert config.momentum == 0.99

    @pytest.mark.parametrize(
        ("kwargs", "key"),
        [
            ({"temperature": 0.0}, "temperature"),
            ({"momentum": 1.2}, "momentum"),
            ({"batch_size": 1}, "batch_size"),
        ],
    )
    def test_invalid(self, kwargs, key):
        with pytest.raises(ConfigError) as exc_info:
            ContrastiveConfig(**kwargs)
        assert exc_info.value.key == key

    def test_nested_augment_key(self):
        with pytest.raises(ConfigError) as exc_info:
            ContrastiveConfig.de_json({"augment": {"bogus": 1}}, strict=True)
        assert exc_info.value.key == "augment.bogus"

    def test_effective_lr(self):
        config = ContrastiveConfig(lr=0.1, batch_size=512, scale_lr_by_batch=True)
        assert config.effective_lr == pytest.approx(0.2)
        assert ContrastiveConfig(lr=0.1, batch_size=512).effective_lr == 0.1

    def test_step_counts(self):
        assert steps_per_epoch(24, 8) == 3
        assert steps_per_epoch(25, 8) == 3
        assert steps_per_epoch(26, 8) == 4
        assert total_contrastive_steps(24, ContrastiveConfig(epochs=2, batch_size=8)) == 6
        assert total_contrastive_steps(24, ContrastiveConfig(batch_size=8, max_steps=4)) == 4


class TestContrastiveStep:
    """Tests for contrastive_step."""

    def test_metrics(self, scratch_checkpoint, fast_contrastive, batch):
        state = ContrastiveState(scratch_checkpoint, fast_contrastive, total_steps=3, seed=0)
        _, metrics = contrastive_step(state, batch)
        assert set(metrics) == {"loss", "pos_sim", "lr"}
        assert math.isfinite(metrics["loss"])
        assert -1.0 <= metrics["pos_sim"] <= 1.0
        assert state.step == 1

    def test_key_tower_gets_no_gradients(self, scratch_checkpoint, fast_contrastive, batch):
        state = ContrastiveState(scratch_checkpoint, fast_contrastive, total_steps=3, seed=0)
        before = {k: v.clone() for k, v in state.key_params.items()}
        contrastive_step(state, batch)
        for param in state.key_params.values():
            assert not param.requires_grad
            assert param.grad is None
        assert any(not torch.equal(before[k], v) for k, v in state.key_params.items())

    def test_deterministic(self, scratch_checkpoint, fast_contrastive, batch):
        a = ContrastiveState(scratch_checkpoint, fast_contrastive, total_steps=3, seed=0)
        b = ContrastiveState(scratch_checkpoint, fast_contrastive, total_steps=3, seed=0)
        _, ma = contrastive_step(a, batch)
        _, mb = contrastive_step(b, batch)
        assert ma == mb
        assert parameter_hash(a.query_encoder) == parameter_hash(b.query_encoder)

    def test_batch_views_match(self, batch):
        assert batch.views_a.shape == batch.views_b.shape == (8, 3, 16, 16)
        assert len(batch) == 8


class TestTrainContrastive:
    """Tests for train_contrastive."""

    def test_smoke(self, small_corpus, scratch_checkpoint, fast_contrastive):
        manifest, store = small_corpus
        metrics = MetricsWriter()
        result = train_contrastive(
            manifest, store, fast_contrastive, seed=0, checkpoint=scratch_checkpoint,
            metrics=metrics,
        )
        assert result.stage == Stage.CONTRASTIVE
        assert result.params_digest != scratch_checkpoint.params_digest
        assert len(metrics.series("loss")) == 3
        assert [r.step for r in metrics.records] == [0, 1, 2]

    def test_deterministic(self, small_corpus, scratch_checkpoint, fast_contrastive):
        manifest, store = small_corpus
        a = train_contrastive(manifest, store, fast_contrastive, 0, scratch_checkpoint)
        b = train_contrastive(manifest, store, fast_contrastive, 0, scratch_checkpoint)
        assert a.params_digest == b.params_digest

    def test_prefetch_matches_sequential(self, small_corpus, scratch_checkpoint, fast_contrastive):
        manifest, store = small_corpus
        prefetching = ContrastiveConfig.de_json(
            {**fast_contrastive.to_dict(), "prefetch_workers": 2}, strict=True
        )
        a = train_contrastive(manifest, store, fast_contrastive, 0, scratch_checkpoint)
        b = train_contrastive(manifest, store, prefetching, 0, scratch_checkpoint)
        assert a.params_digest == b.params_digest

    def test_needs_scratch(self, small_corpus, scratch_checkpoint, fast_contrastive):
        manifest, store = small_corpus
        result = train_contrastive(manifest, store, fast_contrastive, 0, scratch_checkpoint)
        with pytest.raises(StageTransitionError):
            train_contrastive(manifest, store, fast_contrastive, 0, result)

    def test_too_few_frames(self, small_corpus, fast_contrastive):
        manifest, store = small_corpus
        empty = manifest.subset([])
        with pytest.raises(InvalidInputError):
            train_contrastive(empty, store, fast_contrastive, 0)

    def test_default_encoder(self, small_corpus, tiny_encoder_config, fast_contrastive):
        manifest, store = small_corpus
        result = train_contrastive(
            manifest, store, fast_contrastive, 0, encoder_config=tiny_encoder_config
        )
        assert result.config == tiny_encoder_config
        assert result.params_digest != init_encoder(tiny_encoder_config, 0).params_digest

    def test_lr_trace_warmup_then_cosine(self, small_corpus, scratch_checkpoint):
        """Logged learning rates rise through warmup and then follow a half cosine."""
        manifest, store = small_corpus
        config = ContrastiveConfig(
            epochs=7,
            batch_size=8,
            lr=1e-2,
            warmup_fraction=0.25,
            projection_dim=8,
            hidden_dim=16,
            max_steps=20,
        )
        metrics = MetricsWriter()
        train_contrastive(manifest, store, config, 0, scratch_checkpoint, metrics=metrics)
        lrs = metrics.series("lr")
        assert len(lrs) == 20
        warmup = lrs[:5]
        assert all(b > a for a, b in zip(warmup, warmup[1:]))
        assert warmup[-1] == pytest.approx(1e-2)
        decay = lrs[5:]
        assert all(b <= a for a, b in zip(decay, decay[1:]))
        for i, lr in enumerate(decay):
            expected = 1e-2 * 0.5 * (1.0 + math.cos(math.pi * i / 15))
            assert lr == pytest.approx(expected, rel=1e-6, abs=1e-12)


@pytest.mark.slow
class TestTrainingSignal:
    """Longer runs that check contrastive training improves the representation."""

    @pytest.fixture
    def corpus(self):
        manifest, store = generate_synthetic_corpus(seed=5, n_clips=96, n_classes=12)
        return manifest, store

    def test_loss_decreases(self, corpus):
        manifest, store = corpus
        config = ContrastiveConfig(epochs=100, batch_size=64, max_steps=200)
        metrics = MetricsWriter()
        train_contrastive(
            manifest, store, config, 0, encoder_config=EncoderConfig(), metrics=metrics
        )
        losses = metrics.series("loss")
        assert len(losses) == 200
        initial = sum(losses[:5]) / 5
        final = sum(losses[-20:]) / 20
        assert final < 0.9 * initial

    def test_linear_readout_beats_scratch(self, corpus):
        """Held-out class accuracy of frozen features improves by at least ten points."""
        manifest, store = corpus
        train, held = manifest.split(0.25, seed=0)
        encoder_config = EncoderConfig(embedding_dim=8)
        config = ContrastiveConfig(epochs=100, batch_size=64, max_steps=300)
        scratch = init_encoder(encoder_config, seed=0)
        trained = train_contrastive(manifest, store, config, 0, scratch)

        def labeled(part):
            frames = store.load_many(part.frame_refs())
            return frames, [part.clip(f.source[0]).label_hint for f in frames]

        train_frames, train_labels = labeled(train)
        test_frames, test_labels = labeled(held)
        scores = [
            linear_probe(freeze(c), train_frames, train_labels, test_frames, test_labels)
            for c in (scratch, trained)
        ]
        assert scores[1] >= scores[0] + 0.10
