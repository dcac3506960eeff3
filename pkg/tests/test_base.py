"""Tests for base classes."""

import json
from typing import Optional

import pytest

from viprom_lab.base import (
    VipromModel,
    canonical_json,
    de_section,
    dump_document,
    fingerprint,
)
from viprom_lab.enums import TaskId
from viprom_lab.exceptions import ConfigError
from viprom_lab.utils import model


@model
class _SampleModel(VipromModel):
    """Test model."""

    id: str = ""
    name: str = ""

    def __post_init__(self) -> None:
        self._id_attrs = (self.id,)


@model
class _Settings(VipromModel):
    """Test model with a keyword field and no identity."""

    lambda_: float = 0.33
    n: int = 5
    task: TaskId = TaskId.REACH
    hw: tuple = (16, 16)
    note: Optional[str] = None


class TestCleanupData:
    """Tests for cleanup_data."""

    def test_extra_fields_filtered(self):
        """Unknown fields are filtered out in lenient mode."""
        data = {"id": "1", "name": "test", "unknown_field": "value", "another": 42}
        cleaned = _SampleModel.cleanup_data(data)
        assert cleaned == {"id": "1", "name": "test"}

    def test_unknown_fields_reported(self, caplog):
        """Lenient mode logs the ignored fields."""
        with caplog.at_level("WARNING"):
            _SampleModel.cleanup_data({"id": "1", "extra": "val"})
        assert "extra" in caplog.text

    def test_strict_names_key(self):
        """Strict mode raises ConfigError carrying the offending key."""
        with pytest.raises(ConfigError) as exc_info:
            _SampleModel.cleanup_data({"id": "1", "bogus": 1}, strict=True)
        assert exc_info.value.key == "bogus"
        assert "bogus" in str(exc_info.value)

    def test_strict_prefix(self):
        """The prefix is prepended to the reported key."""
        with pytest.raises(ConfigError) as exc_info:
            _SampleModel.cleanup_data({"bogus": 1}, strict=True, prefix="section.")
        assert exc_info.value.key == "section.bogus"

    def test_keyword_mapped(self):
        """Python keywords map to the trailing-underscore field."""
        assert _Settings.cleanup_data({"lambda": 0.5}) == {"lambda_": 0.5}

    def test_none_data_returns_empty(self):
        """None returns an empty dictionary."""
        assert _SampleModel.cleanup_data(None) == {}

    def test_empty_dict_returns_empty(self):
        """Empty dictionary returns an empty dictionary."""
        assert _SampleModel.cleanup_data({}) == {}


class TestDeJson:
    """Tests for de_json and de_list."""

    def test_de_json_valid(self):
        obj = _SampleModel.de_json({"id": "1", "name": "a"})
        assert obj is not None
        assert obj.id == "1"
        assert obj.name == "a"

    def test_de_json_none(self):
        assert _SampleModel.de_json(None) is None

    def test_de_json_empty_dict(self):
        """Empty dict is not valid model data."""
        assert _SampleModel.de_json({}) is None

    def test_de_list(self):
        items = _SampleModel.de_list([{"id": "1"}, {"id": "2"}])
        assert [i.id for i in items] == ["1", "2"]

    def test_de_list_invalid(self):
        """A list with non-dict items yields an empty list."""
        assert _SampleModel.de_list([{"id": "1"}, 3]) == []


class TestToDict:
    """Tests for to_dict and to_json."""

    def test_keyword_restored(self):
        """lambda_ is stored as lambda."""
        d = _Settings().to_dict()
        assert d["lambda"] == 0.33
        assert "lambda_" not in d

    def test_enum_and_tuple(self):
        """Enums are stored by value, tuples as lists."""
        d = _Settings(task=TaskId.PUSH).to_dict()
        assert d["task"] == "push"
        assert d["hw"] == [16, 16]

    def test_private_excluded(self):
        """_id_attrs is not serialized."""
        assert "_id_attrs" not in _SampleModel(id="1").to_dict()

    def test_to_json(self):
        obj = _SampleModel(id="1", name="a")
        assert json.loads(obj.to_json()) == {"id": "1", "name": "a"}

    def test_round_trip_through_dict(self):
        original = _Settings(lambda_=0.5, n=3, task=TaskId.PUSH)
        restored = _Settings.de_json(original.to_dict(), strict=True)
        assert restored is not None
        assert restored.lambda_ == 0.5
        assert restored.n == 3


class TestFingerprint:
    """Tests for canonical serialization and fingerprints."""

    def test_key_order_irrelevant(self):
        """Semantically identical documents share a fingerprint."""
        assert fingerprint({"a": 1, "b": 2}) == fingerprint({"b": 2, "a": 1})

    def test_canonical_form(self):
        assert canonical_json({"b": [1, 2], "a": 1}) == '{"a":1,"b":[1,2]}'

    def test_fixture_hash(self):
        """The digest is SHA-256 of the canonical JSON, platform independent."""
        digest = "ed60d8300f9dfe0d3dfc111dd255111f496f0e76a564b7c5fc354ffc2f8317b6"
        assert fingerprint({"c": "x", "b": [1, 2], "a": 1}, length=64) == digest
        assert fingerprint({"c": "x", "b": [1, 2], "a": 1}) == digest[:16]

    def test_model_fingerprint(self):
        """A model hashes like its dictionary form."""
        settings = _Settings(lambda_=0.33, n=5)
        assert settings.fingerprint() == fingerprint(settings.to_dict())

    def test_dump_document_stable(self):
        text = dump_document({"b": 1, "a": {"d": 2, "c": 3}})
        assert text.endswith("\n")
        assert text.index('"a"') < text.index('"b"')
        assert text == dump_document({"a": {"c": 3, "d": 2}, "b": 1})


class TestDeSection:
    """Tests for de_section."""

    def test_empty_section_defaults(self):
        assert de_section(_Settings, None, "imitation").n == 5
        assert de_section(_Settings, {}, "imitation").n == 5

    def test_not_a_mapping(self):
        with pytest.raises(ConfigError) as exc_info:
            de_section(_Settings, [1, 2], "imitation")
        assert exc_info.value.key == "imitation"

    def test_nested_key_prefixed(self):
        """Unknown keys are reported with the section path."""
        with pytest.raises(ConfigError) as exc_info:
            de_section(_Settings, {"bogus": 1}, "imitation", strict=True)
        assert exc_info.value.key == "imitation.bogus"

    def test_instance_passthrough(self):
        settings = _Settings(n=2)
        assert de_section(_Settings, settings, "x") is settings


class TestEquality:
    """Tests for __eq__ and __hash__."""

    def test_equal_by_id_attrs(self):
        assert _SampleModel(id="1", name="a") == _SampleModel(id="1", name="b")

    def test_not_equal_by_id_attrs(self):
        assert _SampleModel(id="1") != _SampleModel(id="2")

    def test_hash_consistent(self):
        assert hash(_SampleModel(id="1", name="a")) == hash(_SampleModel(id="1", name="b"))

    def test_equal_by_content_without_id_attrs(self):
        assert _Settings(n=2) == _Settings(n=2)
        assert _Settings(n=2) != _Settings(n=3)

    def test_usable_in_set(self):
        assert len({_SampleModel(id="1"), _SampleModel(id="1"), _SampleModel(id="2")}) == 2
