from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agentloop.db import Database
from agentloop.domain import (
    DomainLoadError,
    Task,
    VerificationCriterion,
    load_domain,
    score,
)
from agentloop.rollout import Message, Trajectory
from agentloop.tools import ToolCall, ToolResult


def minimal_doc(**overrides):
    doc = {
        "domain_id": "mini",
        "tools": [{"name": "ping", "parameters": {"type": "object", "properties": {}}}],
        "database": {"t": {"r": {"v": 1}}},
        "tasks": [
            {
                "id": "mini/one",
                "criteria": [{"kind": "db_path_equals", "target": "t.r.v", "expected": 1}],
            }
        ],
    }
    doc.update(overrides)
    return doc


def test_load_bundled_retail_registry(retail_bundle):
    names = retail_bundle.registry.names()
    for expected in (
        "get_order_details",
        "modify_pending_order_items",
        "cancel_pending_order",
        "find_user_id_by_name_zip",
        "calculate",
        "think",
        "transfer_to_human_agents",
    ):
        assert expected in names


def test_load_repeatable(retail_bundle):
    from agentloop import fixtures

    again = fixtures.load_retail()
    assert again.registry.names() == retail_bundle.registry.names()
    assert again.fresh_db().content_hash() == retail_bundle.fresh_db().content_hash()
    assert [t.id for t in again.tasks] == [t.id for t in retail_bundle.tasks]


def test_empty_task_list_is_valid():
    bundle = load_domain(minimal_doc(tasks=[]))
    assert bundle.tasks == ()
    assert "ping" in bundle.registry


def test_duplicate_tool_name_error():
    doc = minimal_doc(tools=[{"name": "think"}, {"name": "think"}])
    with pytest.raises(DomainLoadError):
        load_domain(doc)


def test_parse_error(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(DomainLoadError):
        load_domain(path)


def test_task_without_criteria_rejected():
    doc = minimal_doc()
    doc["tasks"][0]["criteria"] = []
    with pytest.raises(DomainLoadError):
        load_domain(doc)


def test_dangling_criterion_path_rejected():
    doc = minimal_doc()
    doc["tasks"][0]["criteria"] = [{"kind": "db_path_equals", "target": "t.r.missing", "expected": 1}]
    with pytest.raises(DomainLoadError):
        load_domain(doc)
    doc["tasks"][0]["criteria"] = [{"kind": "db_record_present", "target": "ghosts.r", "expected": None}]
    with pytest.raises(DomainLoadError):
        load_domain(doc)


def test_unknown_criterion_kind_rejected():
    with pytest.raises(DomainLoadError):
        VerificationCriterion(kind="sorcery", target="t.r.v")


# ---------------------------------------------------------------------------
# Scoring


def make_task(criteria, required=()):
    return Task(
        id="task",
        domain_id="mini",
        system_policy="",
        user_scenario="",
        initial_db={"orders": {"o1": {"status": "pending", "history": []}}},
        criteria=tuple(criteria),
        required_write_actions=tuple(required),
    )


def traj_with_calls(calls):
    messages = []
    for call, ok in calls:
        messages.append(Message("tool_call", call, 1, 1))
        result = ToolResult(ok=True, payload={}) if ok else ToolResult(ok=False, error_text="nope")
        messages.append(Message("tool_result", result, 1, 1))
    return Trajectory(task_id="task", messages=messages, termination="stop", final_db=None)


def test_score_k_of_n_exact_fractions():
    for n in (1, 4, 10):
        for k in range(n + 1):
            criteria = [
                VerificationCriterion(kind="db_path_equals", target="orders.o1.status", expected="pending")
                for _ in range(k)
            ] + [
                VerificationCriterion(kind="db_path_equals", target="orders.o1.status", expected="nope")
                for _ in range(n - k)
            ]
            task = make_task(criteria)
            result = score(task, task.fresh_db(), traj_with_calls([]))
            assert result.tcr == Fraction(k, n)
            assert result.reward == (1 if k == n else 0)
            assert 0 <= result.tcr <= 1
            assert (result.tcr == 1) == (result.reward == 1)


def test_required_action_matches_only_successful_calls():
    task = make_task(
        [VerificationCriterion(kind="db_path_equals", target="orders.o1.status", expected="pending")],
        required=[("cancel", {"order_id": "o1"})],
    )
    db = task.fresh_db()
    failed = traj_with_calls([(ToolCall("cancel", {"order_id": "o1"}), False)])
    assert score(task, db, failed).reward == 0
    extra_args = traj_with_calls([(ToolCall("cancel", {"order_id": "o1", "reason": "x"}), True)])
    assert score(task, db, extra_args).reward == 1  # extra keys ignored
    wrong_args = traj_with_calls([(ToolCall("cancel", {"order_id": "o2"}), True)])
    assert score(task, db, wrong_args).reward == 0


def test_db_record_present_and_absent():
    task = make_task(
        [
            VerificationCriterion(
                kind="db_record_present", target="orders.o1.history", expected={"kind": "refund"}
            ),
            VerificationCriterion(
                kind="db_record_absent", target="orders.o1.history", expected={"kind": "payment"}
            ),
        ]
    )
    db = Database({"orders": {"o1": {"status": "pending", "history": [{"kind": "refund", "amount": 3}]}}})
    result = score(task, db, traj_with_calls([]))
    assert result.satisfied == (True, True)


@settings(max_examples=100, deadline=None)
@given(st.permutations(list(range(4))), st.data())
def test_reward_invariant_to_message_and_read_order(order, data):
    """Same final db + same successful write multiset => same RewardResult."""
    reads = [
        (ToolCall("peek", {"i": i}), True) for i in order
    ]
    write = (ToolCall("cancel", {"order_id": "o1"}), True)
    where = data.draw(st.integers(min_value=0, max_value=len(reads)))
    calls = reads[:where] + [write] + reads[where:]
    task = make_task(
        [VerificationCriterion(kind="db_path_equals", target="orders.o1.status", expected="pending")],
        required=[("cancel", {"order_id": "o1"})],
    )
    db = task.fresh_db()
    result = score(task, db, traj_with_calls(calls))
    baseline = score(task, db, traj_with_calls([write]))
    assert result == baseline
