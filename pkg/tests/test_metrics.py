import itertools
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agentloop.metrics import (
    MetricsRecord,
    MetricsWriter,
    all_correct_ratio,
    all_wrong_ratio,
    read_metrics,
    tool_counts,
    unique_4gram_ratio,
)
from agentloop.rollout import Message, Trajectory
from agentloop.tools import ToolCall, ToolResult


def brute_4gram(tokens):
    if len(tokens) < 4:
        return 1.0
    grams = [tuple(tokens[i : i + 4]) for i in range(len(tokens) - 3)]
    return len(set(grams)) / len(grams)


def test_unique_4gram_examples():
    assert unique_4gram_ratio([1, 2, 3, 4, 1, 2, 3, 4]) == 0.8  # 4 distinct of 5 windows
    assert unique_4gram_ratio([7] * 7) == 0.25  # 1 distinct of 4 windows
    assert unique_4gram_ratio([1, 2, 3]) == 1.0
    assert unique_4gram_ratio([]) == 1.0
    assert unique_4gram_ratio([1, 2, 3, 4, 5]) == 1.0


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 3), max_size=24))
def test_unique_4gram_matches_brute_force(tokens):
    ratio = unique_4gram_ratio(tokens)
    assert ratio == brute_4gram(tokens)
    assert 0.0 < ratio <= 1.0


def test_group_ratios_exhaustive_rows():
    # every 3-group batch of width-2 binary rows, checked against direct counting
    rows = list(itertools.product([0, 1], repeat=2))
    for batch in itertools.product(rows, repeat=3):
        matrix = [list(r) for r in batch]
        correct = sum(1 for r in matrix if r == [1, 1]) / 3
        wrong = sum(1 for r in matrix if r == [0, 0]) / 3
        assert all_correct_ratio(matrix) == correct
        assert all_wrong_ratio(matrix) == wrong
        assert all_correct_ratio(matrix) + all_wrong_ratio(matrix) <= 1.0


def test_group_ratio_validation():
    with pytest.raises(ValueError):
        all_correct_ratio([])
    with pytest.raises(ValueError):
        all_correct_ratio([[1, 0], [1]])
    with pytest.raises(ValueError):
        all_wrong_ratio([[0, 2]])


def make_traj(call_names):
    messages = []
    for name in call_names:
        messages.append(Message("tool_call", ToolCall(name), 1, 1))
        messages.append(Message("tool_result", ToolResult(ok=True, payload={}), 1, 1))
    return Trajectory("t", messages, "stop", None)


def test_tool_counts():
    trajs = [make_traj(["a", "a", "b"]), make_traj(["b"])]
    counts = tool_counts(trajs, ["a", "b", "c"])
    assert counts == {"a": 1.0, "b": 1.0, "c": 0.0}
    assert tool_counts([], ["a"]) == {}


def make_record(step=0, **kw):
    defaults = dict(
        step=step, mean_entropy=1.0, kl_value=0.01, grad_norm=0.5, mean_turns=3.0,
        mean_response_tokens=8.0, unique_4gram_ratio=0.9, all_correct_ratio=0.25,
        all_wrong_ratio=0.5, tool_counts={"think": 1.5},
    )
    defaults.update(kw)
    return MetricsRecord(**defaults)


def test_record_invariants():
    with pytest.raises(ValueError):
        make_record(unique_4gram_ratio=1.5)
    with pytest.raises(ValueError):
        make_record(all_correct_ratio=-0.1)
    with pytest.raises(ValueError):
        make_record(all_correct_ratio=0.7, all_wrong_ratio=0.7)
    rec = make_record(step=3)
    assert MetricsRecord.from_json(rec.to_json()) == rec
    assert MetricsRecord.from_json(json.loads(json.dumps(rec.to_json()))) == rec


def test_writer_monotonic_steps(tmp_path):
    path = tmp_path / "m.jsonl"
    writer = MetricsWriter(path)
    writer.append(make_record(step=0))
    writer.append(make_record(step=2))
    with pytest.raises(ValueError):
        writer.append(make_record(step=2))
    with pytest.raises(ValueError):
        writer.append(make_record(step=1))
    # reopening resumes the monotonicity check from the file
    writer2 = MetricsWriter(path)
    with pytest.raises(ValueError):
        writer2.append(make_record(step=2))
    writer2.append(make_record(step=5))
    assert [r.step for r in read_metrics(path)] == [0, 2, 5]
