"""Tests for pseudo-labels, the order task and the supervised stage."""

import math

import pytest
import torch

from viprom_lab.dataset import generate_synthetic_corpus, shape_centroid
from viprom_lab.encoder import EncoderConfig, init_encoder
from viprom_lab.enums import Stage
from viprom_lab.exceptions import (
    ConfigError,
    InvalidInputError,
    MissingPseudoLabelError,
    PseudoLabelError,
    ShapeMismatchError,
    StageTransitionError,
)
from viprom_lab.supervised import (
    JointConfig,
    OracleTeacher,
    OrderSample,
    TeacherConfig,
    fit_supervised,
    generate_pseudo_labels,
    held_out_accuracy,
    index_pseudo_labels,
    joint_loss,
    load_pseudo_labels,
    loss_td,
    loss_vs,
    loss_vs_soft,
    make_order_sample,
    permutation_from_seed,
    save_pseudo_labels,
    train_supervised,
    train_teacher,
)
from viprom_lab.utils.metrics import MetricsWriter


@pytest.fixture
def contrastive_checkpoint(scratch_checkpoint):
    return scratch_checkpoint.advance(Stage.CONTRASTIVE, scratch_checkpoint.build_module())


@pytest.fixture
def oracle_labels(small_corpus):
    manifest, store = small_corpus
    return generate_pseudo_labels(OracleTeacher(manifest), manifest, store)


@pytest.fixture
def fast_joint() -> JointConfig:
    return JointConfig(n_frames=3, batch_size=8, order_batch=2, hidden_dim=16, max_steps=2)


class TestLossVS:
    """Tests for loss_vs."""

    def test_uniform(self):
        loss = loss_vs(torch.zeros(4, 10), [0, 3, 5, 9])
        assert loss.item() == pytest.approx(math.log(10), abs=1e-5)

    def test_single_row(self):
        loss = loss_vs(torch.tensor([[2.0, 0.0, 0.0]]), [0])
        assert loss.item() == pytest.approx(0.2395, abs=1e-4)

    def test_invalid(self):
        with pytest.raises(InvalidInputError):
            loss_vs(torch.zeros(2, 1), [0, 0])
        with pytest.raises(InvalidInputError):
            loss_vs(torch.zeros(2, 3), [0, 3])
        with pytest.raises(InvalidInputError):
            loss_vs(torch.zeros(2, 3), [0])

    def test_soft_matches_hard_for_one_hot(self):
        logits = torch.tensor([[2.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        one_hot = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        assert loss_vs_soft(logits, one_hot).item() == pytest.approx(
            loss_vs(logits, [0, 1]).item(), abs=1e-6
        )
        with pytest.raises(InvalidInputError):
            loss_vs_soft(logits, one_hot[:1])

    def test_gradcheck(self):
        torch.manual_seed(0)
        logits = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        assert torch.autograd.gradcheck(
            lambda x: loss_vs(x, [0, 2, 3]), (logits,), eps=1e-4, atol=1e-5, rtol=1e-3
        )

    def test_batch_permutation_invariant(self):
        torch.manual_seed(0)
        logits = torch.randn(6, 4)
        labels = [0, 3, 1, 2, 2, 0]
        order = torch.randperm(6)
        shuffled = loss_vs(logits[order], [labels[i] for i in order.tolist()])
        assert shuffled.item() == pytest.approx(loss_vs(logits, labels).item(), abs=1e-6)


class TestLossTD:
    """Tests for loss_td."""

    def test_uniform(self):
        loss = loss_td(torch.zeros(5, 5), [4, 0, 3, 1, 2])
        assert loss.item() == pytest.approx(math.log(5), abs=1e-5)

    def test_confident_correct(self):
        labels = [2, 0, 1]
        logits = torch.full((3, 3), -50.0)
        logits[torch.arange(3), torch.tensor(labels)] = 50.0
        assert loss_td(logits, labels).item() == pytest.approx(0.0, abs=1e-6)

    def test_two_frames(self):
        loss = loss_td(torch.tensor([[1.0, 0.0], [0.0, 1.0]]), [0, 1])
        assert loss.item() == pytest.approx(0.3133, abs=1e-4)

    def test_batched(self):
        logits = torch.zeros(3, 4, 4)
        labels = [[0, 1, 2, 3], [3, 2, 1, 0], [1, 0, 3, 2]]
        assert loss_td(logits, labels).item() == pytest.approx(math.log(4), abs=1e-5)

    def test_not_a_permutation(self):
        with pytest.raises(InvalidInputError):
            loss_td(torch.zeros(3, 3), [0, 0, 1])
        with pytest.raises(InvalidInputError):
            loss_td(torch.zeros(3, 4), [0, 1, 2])

    def test_gradcheck(self):
        torch.manual_seed(0)
        logits = torch.randn(2, 3, 3, dtype=torch.float64, requires_grad=True)
        labels = [[1, 2, 0], [0, 1, 2]]
        assert torch.autograd.gradcheck(
            lambda x: loss_td(x, labels), (logits,), eps=1e-4, atol=1e-5, rtol=1e-3
        )

    def test_batch_permutation_invariant(self):
        torch.manual_seed(0)
        logits = torch.randn(4, 3, 3)
        labels = [[1, 2, 0], [0, 1, 2], [2, 1, 0], [2, 0, 1]]
        order = torch.randperm(4)
        shuffled = loss_td(logits[order], [labels[i] for i in order.tolist()])
        assert shuffled.item() == pytest.approx(loss_td(logits, labels).item(), abs=1e-6)


class TestJointLoss:
    """Tests for joint_loss."""

    def test_default_weight(self):
        assert joint_loss(1.0, 3.0, 0.33) == pytest.approx(1.99)

    def test_zero_weight(self):
        assert joint_loss(1.0, 3.0, 0.0) == 1.0

    def test_negative_weight(self):
        with pytest.raises(InvalidInputError):
            joint_loss(1.0, 3.0, -0.1)


class TestPermutations:
    """Tests for permutation_from_seed and order samples."""

    def test_identity(self):
        assert permutation_from_seed(5, 0) == [0, 1, 2, 3, 4]

    def test_covers_all(self):
        """1000 seeds reach all 120 orderings of five frames."""
        seen = {tuple(permutation_from_seed(5, s)) for s in range(1000)}
        assert len(seen) == 120
        assert len({tuple(permutation_from_seed(5, s)) for s in range(120)}) == 120

    def test_order_sample_invalid(self, small_corpus):
        manifest, store = small_corpus
        frames = store.load_many(manifest.frame_refs()[:3])
        with pytest.raises(InvalidInputError):
            OrderSample(frames=frames, labels=[0, 0, 1])

    def test_restores_trajectory(self):
        """Labels recover the true order: centroids increase once sorted back."""
        manifest, store = generate_synthetic_corpus(seed=2, n_clips=1, n_classes=2)
        sample = make_order_sample(manifest.clips[0], store, 5, seed=77)
        assert sample.labels == permutation_from_seed(5, 77)
        xs = [shape_centroid(f.pixels)[0] for f in sample.ordered()]
        assert all(a < b for a, b in zip(xs, xs[1:]))
        assert [f.source[1] for f in sample.ordered()] == [0, 7, 14, 21, 28]


class TestPseudoLabels:
    """Tests for teachers and pseudo-label files."""

    def test_oracle_reproduces_hints(self, small_corpus, oracle_labels):
        manifest, _ = small_corpus
        assert len(oracle_labels) == 24
        for record in oracle_labels:
            assert record.label == manifest.clip(record.clip_id).label_hint
            assert record.teacher_id == "oracle"
            assert record.confidence > 0.99
        assert [r.frame_ref for r in oracle_labels] == manifest.frame_refs()

    def test_file_deterministic(self, tmp_path, small_corpus, oracle_labels):
        manifest, store = small_corpus
        again = generate_pseudo_labels(OracleTeacher(manifest), manifest, store)
        a = save_pseudo_labels(oracle_labels, tmp_path / "a.jsonl")
        b = save_pseudo_labels(again, tmp_path / "b.jsonl")
        assert a.read_bytes() == b.read_bytes()
        assert load_pseudo_labels(a) == oracle_labels

    def test_soft_probs(self, small_corpus):
        manifest, store = small_corpus
        records = generate_pseudo_labels(OracleTeacher(manifest), manifest, store, soft=True)
        assert all(len(r.probs) == 2 for r in records)
        assert all(sum(r.probs) == pytest.approx(1.0, abs=1e-5) for r in records)

    def test_duplicates_rejected(self, tmp_path, oracle_labels):
        with pytest.raises(PseudoLabelError):
            index_pseudo_labels([oracle_labels[0], oracle_labels[0]])
        path = save_pseudo_labels([oracle_labels[0], oracle_labels[0]], tmp_path / "d.jsonl")
        with pytest.raises(PseudoLabelError):
            load_pseudo_labels(path)

    def test_classifier_teacher(self, small_corpus):
        manifest, store = small_corpus
        config = TeacherConfig(steps=3, batch_size=8, embedding_dim=8, width=4)
        teacher = train_teacher(manifest, store, seed=0, config=config, input_hw=(16, 16))
        assert teacher.n_classes == 2
        assert teacher.teacher_id.startswith("classifier-")
        records = generate_pseudo_labels(teacher, manifest, store)
        assert len(records) == 24
        assert {r.label for r in records} <= {0, 1}

        big_manifest, big_store = generate_synthetic_corpus(seed=0, n_clips=2, n_classes=2)
        with pytest.raises(ShapeMismatchError):
            generate_pseudo_labels(teacher, big_manifest, big_store)

    def test_teacher_needs_steps(self, small_corpus):
        manifest, store = small_corpus
        with pytest.raises(ConfigError):
            train_teacher(manifest, store, 0, TeacherConfig(steps=0), input_hw=(16, 16))


class TestJointConfig:
    """Tests for JointConfig."""

    def test_lambda_keyword(self):
        config = JointConfig.de_json({"lambda": 0.5, "n_frames": 4}, strict=True)
        assert config.lambda_ == 0.5
        assert config.to_dict()["lambda"] == 0.5

    def test_invalid(self):
        with pytest.raises(ConfigError) as exc_info:
            JointConfig(lambda_=-1.0)
        assert exc_info.value.key == "lambda"
        with pytest.raises(ConfigError):
            JointConfig(n_frames=1)


class TestFitSupervised:
    """Tests for fit_supervised."""

    def test_smoke(self, small_corpus, contrastive_checkpoint, oracle_labels, fast_joint):
        manifest, store = small_corpus
        metrics = MetricsWriter()
        fit = fit_supervised(
            contrastive_checkpoint, manifest, store, oracle_labels, fast_joint, 0, metrics
        )
        assert fit.checkpoint.stage == Stage.SUPERVISED
        assert fit.checkpoint.params_digest != contrastive_checkpoint.params_digest
        assert len(fit.trace) == 2
        assert set(metrics.records[0].metrics) == {"loss", "l_vs", "l_td", "lr"}
        first = metrics.records[0].metrics
        assert first["loss"] == pytest.approx(first["l_vs"] + 0.33 * first["l_td"], rel=1e-5)

    def test_deterministic(self, small_corpus, contrastive_checkpoint, oracle_labels, fast_joint):
        manifest, store = small_corpus
        a = train_supervised(contrastive_checkpoint, manifest, store, oracle_labels, fast_joint, 0)
        b = train_supervised(contrastive_checkpoint, manifest, store, oracle_labels, fast_joint, 0)
        assert a.params_digest == b.params_digest

    def test_missing_labels(self, small_corpus, contrastive_checkpoint, oracle_labels, fast_joint):
        manifest, store = small_corpus
        with pytest.raises(MissingPseudoLabelError):
            fit_supervised(
                contrastive_checkpoint, manifest, store, oracle_labels[:-1], fast_joint, 0
            )

    def test_scratch_needs_flag(self, small_corpus, scratch_checkpoint, oracle_labels, fast_joint):
        manifest, store = small_corpus
        with pytest.raises(StageTransitionError):
            fit_supervised(scratch_checkpoint, manifest, store, oracle_labels, fast_joint, 0)
        config = JointConfig.de_json({**fast_joint.to_dict(), "allow_scratch": True})
        fit = fit_supervised(scratch_checkpoint, manifest, store, oracle_labels, config, 0)
        assert fit.checkpoint.stage == Stage.SUPERVISED

    def test_twice_rejected(self, small_corpus, contrastive_checkpoint, oracle_labels, fast_joint):
        manifest, store = small_corpus
        once = train_supervised(
            contrastive_checkpoint, manifest, store, oracle_labels, fast_joint, 0
        )
        with pytest.raises(StageTransitionError):
            fit_supervised(once, manifest, store, oracle_labels, fast_joint, 0)

    def test_soft_needs_probs(self, small_corpus, contrastive_checkpoint, oracle_labels):
        manifest, store = small_corpus
        config = JointConfig(n_frames=3, batch_size=8, order_batch=2, max_steps=1, soft_labels=True)
        with pytest.raises(PseudoLabelError):
            fit_supervised(contrastive_checkpoint, manifest, store, oracle_labels, config, 0)

    def test_order_only(self, small_corpus, contrastive_checkpoint, oracle_labels, fast_joint):
        manifest, store = small_corpus
        config = JointConfig.de_json({**fast_joint.to_dict(), "use_vs": False})
        metrics = MetricsWriter()
        fit_supervised(contrastive_checkpoint, manifest, store, oracle_labels, config, 0, metrics)
        first = metrics.records[0].metrics
        assert first["loss"] == pytest.approx(first["l_td"])

    def test_zero_lambda_skips_order(self, small_corpus, contrastive_checkpoint, oracle_labels):
        manifest, store = small_corpus
        config = JointConfig(n_frames=3, batch_size=8, order_batch=2, max_steps=1, lambda_=0.0)
        metrics = MetricsWriter()
        fit_supervised(contrastive_checkpoint, manifest, store, oracle_labels, config, 0, metrics)
        assert metrics.records[0].metrics["l_td"] == 0.0

    @pytest.mark.filterwarnings("error:Converting a tensor with requires_grad")
    def test_no_grad_tensor_conversion(
        self, small_corpus, contrastive_checkpoint, oracle_labels, fast_joint
    ):
        manifest, store = small_corpus
        fit = fit_supervised(contrastive_checkpoint, manifest, store, oracle_labels, fast_joint, 0)
        assert len(fit.trace) == 2

    @pytest.mark.parametrize("lambda_", [0.0, 0.33])
    def test_order_head_gradients(
        self, small_corpus, contrastive_checkpoint, oracle_labels, lambda_
    ):
        """The order head only receives gradient when its loss is weighted in."""
        manifest, store = small_corpus
        config = JointConfig(n_frames=3, batch_size=8, order_batch=2, max_steps=1, lambda_=lambda_)
        fit = fit_supervised(contrastive_checkpoint, manifest, store, oracle_labels, config, 0)
        grads = [p.grad for p in fit.order_head.parameters()]
        untouched = all(g is None or g.abs().max().item() == 0 for g in grads)
        assert untouched == (lambda_ == 0.0)

    def test_held_out_accuracy(
        self, small_corpus, contrastive_checkpoint, oracle_labels, fast_joint
    ):
        manifest, store = small_corpus
        fit = fit_supervised(contrastive_checkpoint, manifest, store, oracle_labels, fast_joint, 0)
        scores = held_out_accuracy(fit, manifest, store, oracle_labels, samples_per_clip=2)
        assert set(scores) == {"pseudo_label_agreement", "order_accuracy"}
        assert all(0.0 <= v <= 1.0 for v in scores.values())


@pytest.mark.slow
class TestLearnability:
    """Longer runs that check the heads actually learn."""

    @pytest.fixture
    def corpus(self):
        manifest, store = generate_synthetic_corpus(seed=11, n_clips=40, n_classes=2)
        return manifest.split(0.25, seed=0), store

    def _fit(self, corpus, lambda_, epochs):
        (train, held), store = corpus
        labels = generate_pseudo_labels(OracleTeacher(train), train, store)
        held_labels = generate_pseudo_labels(OracleTeacher(held), held, store)
        checkpoint = init_encoder(EncoderConfig(), seed=0)
        config = JointConfig(
            lambda_=lambda_,
            epochs=epochs,
            batch_size=16,
            order_batch=16,
            max_steps=2000,
            allow_scratch=True,
        )
        fit = fit_supervised(checkpoint, train, store, labels, config, seed=0)
        return fit, held_out_accuracy(fit, held, store, held_labels, samples_per_clip=4)

    def test_order_head_learns(self, corpus):
        fit, scores = self._fit(corpus, 0.33, epochs=300)
        assert len(fit.trace) <= 2000
        assert scores["order_accuracy"] >= 0.95
        assert scores["pseudo_label_agreement"] >= 0.9

    def test_zero_lambda_order_at_chance(self, corpus):
        _, scores = self._fit(corpus, 0.0, epochs=30)
        assert scores["order_accuracy"] == pytest.approx(0.2, abs=0.1)
