import pytest

from database.results_store import JsonlStore, ResultsStore
from utilities.error_handler import CheckpointError


def test_append_and_read(tmp_path):
    store = JsonlStore(tmp_path / "r.jsonl")
    assert store.read_records() == []
    store.insert_record({"a": 1})
    assert store.insert_many([{"a": 2}, {"a": 3}]) == 2
    assert [r["a"] for r in store.read_records()] == [1, 2, 3]
    assert [r["a"] for r in store.read_records(lambda r: r["a"] > 1)] == [2, 3]


def test_non_finite_becomes_null(tmp_path):
    store = JsonlStore(tmp_path / "r.jsonl")
    store.insert_record({"x": float("nan"), "nested": [float("inf"), 1.0]})
    assert store.read_records() == [{"x": None, "nested": [None, 1.0]}]


def test_torn_last_line_is_ignored(tmp_path):
    path = tmp_path / "r.jsonl"
    path.write_text('{"a": 1}\n{"a": 2', encoding="utf-8")
    assert JsonlStore(path).read_records() == [{"a": 1}]


def test_corrupt_middle_line(tmp_path):
    path = tmp_path / "r.jsonl"
    path.write_text('{"a": 1}\nnot json\n{"a": 3}\n', encoding="utf-8")
    with pytest.raises(CheckpointError):
        JsonlStore(path).read_records()


def test_replace_records(tmp_path):
    store = JsonlStore(tmp_path / "r.jsonl")
    store.insert_many([{"step": 1}, {"step": 2}, {"step": 3}])
    store.replace_records(r for r in store.read_records() if r["step"] <= 2)
    assert store.read_records() == [{"step": 1}, {"step": 2}]
    store.replace_records([])
    assert store.read_records() == []


def test_results_store_latest_point_wins(tmp_path):
    store = ResultsStore(tmp_path)
    store.insert_point({"model_id": "a", "mel_distance": 1.0})
    store.insert_point({"model_id": "b", "mel_distance": 2.0})
    store.insert_point({"model_id": "a", "mel_distance": 0.5})
    assert [p["model_id"] for p in store.list_points()] == ["a", "b"]
    assert store.get_point("a")["mel_distance"] == 0.5
    assert store.get_point("missing") is None


def test_status_failures(tmp_path):
    store = ResultsStore(tmp_path)
    store.record_status("a", "failed", error="boom")
    store.record_status("b", "failed", error="boom")
    store.record_status("a", "done")
    assert [f["model_id"] for f in store.failures()] == ["b"]
