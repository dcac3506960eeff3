"""Tests for behavior cloning and the evaluation protocol."""

import numpy as np
import pytest
import torch

from viprom_lab.encoder import freeze
from viprom_lab.enums import TaskId
from viprom_lab.exceptions import ConfigError, InvalidInputError, ShapeMismatchError
from viprom_lab.imitation import (
    DEFAULT_SEEDS,
    BCConfig,
    EvalCell,
    EvalReport,
    ExpertActor,
    PixelFeatures,
    Policy,
    RandomActor,
    StateOracle,
    action_mse,
    aggregate_success,
    bc_train,
    best_success_rate,
    evaluate,
    run_protocol,
)
from viprom_lab.toyenv import collect_demos, make_task
from viprom_lab.utils.seeding import seeded

HW = (16, 16)


@pytest.fixture
def reach_task():
    return make_task("reach", image_hw=HW)


@pytest.fixture
def reach_demos(reach_task):
    return collect_demos(reach_task, n=2, seed=0)


class TestBCConfig:
    """Tests for BCConfig."""

    def test_defaults(self):
        config = BCConfig()
        assert (config.steps, config.batch, config.lr, config.n_demos) == (20000, 32, 1e-3, 5)
        assert config.eval_points() == list(range(1000, 20001, 1000))

    def test_uneven_eval_points(self):
        assert BCConfig(steps=2500, eval_every=1000).eval_points() == [1000, 2000, 2500]
        assert BCConfig(steps=50, eval_every=100).eval_points() == [50]

    def test_toy_cap(self):
        assert BCConfig(toy=True).total_steps == 5000
        assert BCConfig(steps=300, toy=True).total_steps == 300

    def test_invalid(self):
        with pytest.raises(ConfigError) as exc_info:
            BCConfig(eval_every=0)
        assert exc_info.value.key == "eval_every"
        with pytest.raises(ConfigError):
            BCConfig(lr=0.0)


class TestEvaluate:
    """Tests for evaluate and actors."""

    @pytest.mark.parametrize("task_id", list(TaskId))
    def test_expert_always_succeeds(self, task_id):
        task = make_task(task_id, image_hw=HW)
        assert evaluate(ExpertActor(), None, task, episodes=10, seed=0) == 1.0

    def test_random_push_rarely_succeeds(self):
        task = make_task("push", image_hw=HW)
        assert evaluate(RandomActor(seed=0), None, task, episodes=50, seed=0) <= 0.2

    def test_single_episode(self, reach_task):
        rate = evaluate(RandomActor(seed=1), None, reach_task, episodes=1, seed=3)
        assert rate in (0.0, 1.0)

    def test_invalid(self, reach_task):
        with pytest.raises(InvalidInputError):
            evaluate(ExpertActor(), None, reach_task, episodes=0, seed=0)
        with pytest.raises(InvalidInputError):
            evaluate(Policy(6), None, reach_task, episodes=1, seed=0)


class TestAggregation:
    """Tests for best-success aggregation."""

    def test_hand_built_grid(self):
        traces = {
            ("reach", 100): [0.2, 0.6],
            ("reach", 125): [0.4],
            ("push", 100): [0.0, 0.1],
            ("push", 125): [1.0, 0.5],
        }
        assert aggregate_success(traces) == pytest.approx((0.6 + 0.4 + 0.1 + 1.0) / 4)

    def test_best_is_max(self):
        assert best_success_rate([0.1, 0.7, 0.3]) == 0.7

    def test_empty(self):
        with pytest.raises(InvalidInputError):
            best_success_rate([])
        with pytest.raises(InvalidInputError):
            aggregate_success({})


class TestBCTrain:
    """Tests for bc_train."""

    def test_reduces_action_error(self, reach_demos):
        extractor = StateOracle()
        config = BCConfig(steps=200, batch=32, eval_every=100, hidden_dim=32)
        with seeded(0):
            untrained = Policy(extractor.dim, 2, 32)
        features = torch.cat([extractor.features(d.observations, d.states) for d in reach_demos])
        untrained.set_normalization(features)
        policy, trace = bc_train(extractor, reach_demos, config, seed=0)
        assert action_mse(policy, extractor, reach_demos) < action_mse(
            untrained, extractor, reach_demos
        )
        assert [r.step for r in trace] == [100, 200]

    def test_encoder_untouched(self, scratch_checkpoint, reach_demos, fast_bc):
        encoder = freeze(scratch_checkpoint)
        before = encoder.parameter_hash()
        bc_train(encoder, reach_demos, fast_bc, seed=0)
        assert encoder.parameter_hash() == before
        assert encoder.parameter_hash() == scratch_checkpoint.params_digest

    def test_periodic_success(self, scratch_checkpoint, reach_task, reach_demos, fast_bc):
        encoder = PixelFeatures(freeze(scratch_checkpoint))
        _, trace = bc_train(encoder, reach_demos, fast_bc, seed=0, task=reach_task)
        assert [r.step for r in trace] == [30, 60]
        assert all(0.0 <= r.metrics["success"] <= 1.0 for r in trace)

    def test_deterministic(self, reach_demos, fast_bc):
        a, _ = bc_train(StateOracle(), reach_demos, fast_bc, seed=4)
        b, _ = bc_train(StateOracle(), reach_demos, fast_bc, seed=4)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_proprio_features(self, scratch_checkpoint, reach_demos):
        extractor = PixelFeatures(freeze(scratch_checkpoint), proprio=True)
        demo = reach_demos[0]
        features = extractor.features(demo.observations, demo.states)
        assert features.shape == (len(demo), 16 + 2)
        assert np.allclose(features[:, -2:].numpy(), demo.states[:, :2])

    def test_empty_demos(self, fast_bc):
        with pytest.raises(InvalidInputError):
            bc_train(StateOracle(), [], fast_bc, seed=0)

    @pytest.mark.slow
    def test_state_oracle_solves_reach(self):
        task = make_task("reach", image_hw=HW)
        config = BCConfig(steps=3000, n_demos=5, eval_every=1000, eval_episodes=20)
        demos = collect_demos(task, config.n_demos, seed=100)
        _, trace = bc_train(StateOracle(), demos, config, seed=100, task=task)
        assert max(r.metrics["success"] for r in trace) >= 0.9


class TestProtocol:
    """Tests for run_protocol and reports."""

    def test_single_cell(self, tmp_path, scratch_checkpoint, reach_task, fast_bc):
        report = run_protocol(scratch_checkpoint, [reach_task], [100], fast_bc, tmp_path)
        assert len(report.cells) == 1
        cell = report.cell("reach", 100)
        assert len(cell.history) == 2
        assert cell.best_success == max(cell.history)
        assert report.aggregate == pytest.approx(cell.best_success)
        assert (tmp_path / cell.trace_path).exists()
        assert report.encoder_fingerprint == scratch_checkpoint.fingerprint()

    def test_deterministic(self, tmp_path, scratch_checkpoint, reach_task, fast_bc):
        a = run_protocol(scratch_checkpoint, [reach_task], [100], fast_bc)
        b = run_protocol(scratch_checkpoint, [reach_task], [100], fast_bc)
        assert a.save(tmp_path / "a.json").read_bytes() == b.save(tmp_path / "b.json").read_bytes()

    def test_default_seeds(self, fast_bc):
        report = run_protocol(StateOracle(), ["reach"], config=fast_bc)
        assert report.seeds == list(DEFAULT_SEEDS) == [100, 125, 150]
        assert [c.seed for c in report.cells] == [100, 125, 150]
        assert set(report.per_seed()) == {100, 125, 150}

    def test_workers_match_sequential(self, fast_bc):
        tasks = ["reach", "push"]
        a = run_protocol(StateOracle(), tasks, [100, 125], fast_bc, workers=1)
        b = run_protocol(StateOracle(), tasks, [100, 125], fast_bc, workers=2)
        assert a.to_dict() == b.to_dict()
        assert [(c.task.value, c.seed) for c in a.cells] == [
            ("reach", 100),
            ("reach", 125),
            ("push", 100),
            ("push", 125),
        ]

    def test_frame_size_mismatch(self, scratch_checkpoint, fast_bc):
        with pytest.raises(ShapeMismatchError):
            run_protocol(scratch_checkpoint, ["reach"], [100], fast_bc)

    def test_empty(self, fast_bc):
        with pytest.raises(InvalidInputError):
            run_protocol(StateOracle(), [], config=fast_bc)

    def test_report_round_trip(self, tmp_path):
        report = EvalReport(
            encoder_fingerprint="abc",
            config_fingerprint="def",
            seeds=[100, 125],
            cells=[
                EvalCell(task="reach", seed=100, best_success=0.5, history=[0.5]),
                EvalCell(task="reach", seed=125, best_success=1.0, history=[0.0, 1.0]),
            ],
            aggregate=0.75,
        )
        loaded = EvalReport.load(report.save(tmp_path / "report.json"))
        assert loaded.to_dict() == report.to_dict()
        assert loaded.per_seed() == {100: 0.5, 125: 1.0}
        with pytest.raises(KeyError):
            loaded.cell("push", 100)
