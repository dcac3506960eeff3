"""Tests for seeding, I/O, metrics and optimizer helpers."""

import hashlib
import json
import math

import pytest
import torch

from viprom_lab.enums import OptimizerKind
from viprom_lab.exceptions import (
    ConfigError,
    InvalidInputError,
    ManifestError,
    TrainingDivergedError,
)
from viprom_lab.utils.io import append_jsonl, read_document, read_json, read_jsonl, write_text
from viprom_lab.utils.metrics import MetricsWriter, read_metrics
from viprom_lab.utils.optim import check_finite, default_dtype, make_optimizer, warmup_cosine
from viprom_lab.utils.seeding import derive_seed, make_generator, seeded


class TestDeriveSeed:
    """Tests for derive_seed."""

    def test_documented_formula(self):
        digest = hashlib.sha256(b"3:bc/push/100").digest()
        expected = int.from_bytes(digest[:8], "big") % (2**31)
        assert derive_seed(3, "bc", "push", 100) == expected

    def test_deterministic(self):
        assert derive_seed(0, "encoder") == derive_seed(0, "encoder")

    def test_names_and_seed_matter(self):
        assert derive_seed(0, "encoder") != derive_seed(0, "teacher")
        assert derive_seed(0, "encoder") != derive_seed(1, "encoder")

    def test_range(self):
        for i in range(50):
            assert 0 <= derive_seed(i, "x") < 2**31


class TestSeeded:
    """Tests for the seeded context and generators."""

    def test_same_draws(self):
        with seeded(5):
            a = torch.rand(4)
        with seeded(5):
            b = torch.rand(4)
        assert torch.equal(a, b)

    def test_global_stream_restored(self):
        torch.manual_seed(11)
        expected = torch.rand(3)
        torch.manual_seed(11)
        with seeded(99):
            torch.rand(10)
        assert torch.equal(torch.rand(3), expected)

    def test_generator(self):
        a = torch.rand(3, generator=make_generator(4))
        b = torch.rand(3, generator=make_generator(4))
        assert torch.equal(a, b)


class TestIO:
    """Tests for file helpers."""

    def test_write_text(self, tmp_path):
        path = write_text(tmp_path / "a" / "b.txt", "hello\n")
        assert path.read_text(encoding="utf-8") == "hello\n"
        assert not (tmp_path / "a" / ".b.txt.tmp").exists()

    def test_read_json_errors(self, tmp_path):
        """Missing and malformed files raise the requested error class."""
        with pytest.raises(ManifestError):
            read_json(tmp_path / "missing.json", error_cls=ManifestError)
        bad = tmp_path / "bad.json"
        bad.write_text("{not json", encoding="utf-8")
        with pytest.raises(ManifestError):
            read_json(bad, error_cls=ManifestError)

    def test_jsonl(self, tmp_path):
        path = tmp_path / "log.jsonl"
        append_jsonl(path, {"step": 0})
        with open(path, "a", encoding="utf-8") as f:
            f.write("\n")
        append_jsonl(path, {"step": 1})
        assert read_jsonl(path) == [{"step": 0}, {"step": 1}]

    def test_read_document_yaml(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("global:\n  seed: 3\n", encoding="utf-8")
        assert read_document(path) == {"global": {"seed": 3}}

    def test_read_document_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"global": {"seed": 3}}), encoding="utf-8")
        assert read_document(path) == {"global": {"seed": 3}}

    def test_read_document_invalid(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("global: [unclosed\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            read_document(path)
        with pytest.raises(ConfigError):
            read_document(tmp_path / "missing.yaml")


class TestMetricsWriter:
    """Tests for MetricsWriter."""

    def test_records_and_file(self, tmp_path):
        path = tmp_path / "metrics.jsonl"
        writer = MetricsWriter(path)
        writer.log(0, loss=2.0)
        writer.log(1, loss=1.5, lr=0.1)
        assert writer.series("loss") == [2.0, 1.5]
        records = read_metrics(path)
        assert [r.step for r in records] == [0, 1]
        assert records[1].metrics == {"loss": 1.5, "lr": 0.1}
        assert records[1].wall_time > 0

    def test_monotone_steps(self):
        writer = MetricsWriter()
        writer.log(5, loss=1.0)
        writer.log(5, loss=0.9)
        with pytest.raises(InvalidInputError):
            writer.log(4, loss=0.8)

    def test_append_only(self, tmp_path):
        """A new writer continues an existing file and keeps its step order."""
        path = tmp_path / "metrics.jsonl"
        MetricsWriter(path).log(3, loss=1.0)
        writer = MetricsWriter(path)
        with pytest.raises(InvalidInputError):
            writer.log(2, loss=1.0)
        writer.log(4, loss=0.5)
        assert [r.step for r in read_metrics(path)] == [3, 4]


class TestOptim:
    """Tests for schedules and divergence checks."""

    def test_warmup_cosine(self):
        multiplier = warmup_cosine(total_steps=10, warmup_steps=2)
        assert multiplier(0) == pytest.approx(0.5)
        assert multiplier(1) == pytest.approx(1.0)
        assert multiplier(2) == pytest.approx(1.0)
        assert multiplier(6) == pytest.approx(0.5 * (1 + math.cos(math.pi * 0.5)))
        assert multiplier(10) == pytest.approx(0.0)

    def test_warmup_cosine_monotone_decay(self):
        multiplier = warmup_cosine(total_steps=20, warmup_steps=4)
        values = [multiplier(s) for s in range(4, 21)]
        assert all(b <= a for a, b in zip(values, values[1:]))

    def test_warmup_cosine_invalid(self):
        with pytest.raises(InvalidInputError):
            warmup_cosine(0, 0)

    def test_check_finite(self):
        check_finite(torch.tensor(1.0), step=0)
        with pytest.raises(TrainingDivergedError) as exc_info:
            check_finite(torch.tensor(float("nan")), step=7, snapshot={"lr": 0.1})
        assert exc_info.value.snapshot["step"] == 7
        assert exc_info.value.snapshot["lr"] == 0.1

    def test_default_dtype(self):
        previous = torch.get_default_dtype()
        with default_dtype(torch.float64):
            assert torch.nn.Linear(2, 2).weight.dtype == torch.float64
            assert torch.zeros(1).dtype == torch.float64
        assert torch.get_default_dtype() == previous

    def test_default_dtype_restored_on_error(self):
        previous = torch.get_default_dtype()
        with pytest.raises(RuntimeError):
            with default_dtype(torch.float64):
                raise RuntimeError("boom")
        assert torch.get_default_dtype() == previous

    def test_make_optimizer(self):
        layer = torch.nn.Linear(2, 2)
        adam = make_optimizer(OptimizerKind.ADAM, layer.parameters(), 0.1)
        assert isinstance(adam, torch.optim.Adam)
        assert isinstance(make_optimizer("sgd", layer.parameters(), 0.1), torch.optim.SGD)
        layer.requires_grad_(False)
        with pytest.raises(InvalidInputError):
            make_optimizer(OptimizerKind.ADAM, layer.parameters(), 0.1)
