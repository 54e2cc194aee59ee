import numpy as np
import pytest

from agentloop.clients import ScriptedAgent, ScriptedUser
from agentloop.domain import Task, VerificationCriterion, score
from agentloop.rollout import (
    STOP_SENTINEL,
    TRANSFER_SENTINEL,
    AgentStep,
    EnvInstance,
    Message,
    RolloutConfig,
    TokenRecord,
    Trajectory,
    detect_termination,
    read_trajectories,
    run_group,
    run_rollout,
    tag_tokens,
    write_trajectories,
)
from agentloop.tools import ToolCall, ToolRegistry, ToolResult, ToolSpec

from conftest import call


def make_task():
    return Task(
        id="t",
        domain_id="mini",
        system_policy="be useful",
        user_scenario="ask for things",
        initial_db={"t": {"r": {"v": 1}}},
        criteria=(VerificationCriterion(kind="db_path_equals", target="t.r.v", expected=1),),
    )


def make_registry():
    reg = ToolRegistry()
    reg.add(ToolSpec(name="think", side_channel="think"))
    reg.add(ToolSpec(name="peek", behavior={"kind": "get", "table": "t", "key": "id"},
                     parameters={"type": "object", "properties": {"id": {"type": "string"}}, "required": ["id"]}))
    reg.add(ToolSpec(name="poke", mutating=True, behavior={"kind": "set", "table": "t", "key": "id", "fields": {"v": "v"}},
                     parameters={"type": "object", "properties": {"id": {"type": "string"}, "v": {"type": "integer"}}, "required": ["id", "v"]}))
    return reg


def scripted_cfg(**kw):
    defaults = dict(user_mode="scripted", tool_execution="local_env")
    defaults.update(kw)
    return RolloutConfig(**defaults)


def test_detect_termination_sentinels():
    assert detect_termination(f"Thanks! {STOP_SENTINEL}") == "stop"
    assert detect_termination(TRANSFER_SENTINEL) == "transfer"
    assert detect_termination("No sentinel here") == "continue"


def test_minimal_episode_immediate_stop():
    task = make_task()
    agent = ScriptedAgent([AgentStep(text=STOP_SENTINEL)])
    user = ScriptedUser(["hello"])
    traj = run_rollout(task, agent, user, EnvInstance.local(task, make_registry()), scripted_cfg(max_turns=1))
    assert traj.termination == "stop"
    assert traj.user_turns() == 1
    assert score(task, traj.final_db, traj).reward == 1  # untouched db satisfies the criterion


def test_think_loop_hits_turn_cap():
    task = make_task()
    agent = ScriptedAgent([call("think") for _ in range(100)])
    user = ScriptedUser(["hello"])
    cfg = scripted_cfg(max_turns=5)
    traj = run_rollout(task, agent, user, EnvInstance.local(task, make_registry()), cfg)
    assert traj.termination == "turn_cap"
    assert sum(1 for m in traj.messages if m.role == "tool_call") == 5


def test_text_and_calls_same_step_is_protocol_error():
    task = make_task()
    agent = ScriptedAgent([AgentStep(text="hi", calls=[ToolCall("think")])])
    traj = run_rollout(task, agent, ScriptedUser(["hello"]), EnvInstance.local(task, make_registry()), scripted_cfg())
    assert traj.termination == "protocol_error"
    empty = ScriptedAgent([AgentStep()])
    traj = run_rollout(task, empty, ScriptedUser(["hello"]), EnvInstance.local(task, make_registry()), scripted_cfg())
    assert traj.termination == "protocol_error"


def test_tool_call_without_executor_is_protocol_error():
    task = make_task()
    agent = ScriptedAgent([call("think")])
    env = EnvInstance(db=task.fresh_db(), registry=None, executor=None)
    traj = run_rollout(task, agent, ScriptedUser(["hello"]), env, scripted_cfg(tool_execution="none"))
    assert traj.termination == "protocol_error"


def test_user_transport_failure_keeps_trajectory():
    from agentloop.rollout import TransportError

    class FlakyUser:
        def session(self, task, seed):
            return self

        def initial_message(self):
            return "hi"

        def reply(self, text):
            raise TransportError("user model down")

    task = make_task()
    agent = ScriptedAgent([AgentStep(text="anything to add?"), AgentStep(text=STOP_SENTINEL)])
    traj = run_rollout(task, agent, FlakyUser(), EnvInstance.local(task, make_registry()), scripted_cfg())
    assert traj.termination == "protocol_error"
    assert traj.messages[-1].role == "agent_text"


def test_degenerate_text_only_mode():
    """user_mode=none + tool_execution=none: single-shot text generation."""
    task = make_task()
    agent = ScriptedAgent([AgentStep(text="final answer")])
    cfg = RolloutConfig(user_mode="none", tool_execution="none")
    env = EnvInstance(db=task.fresh_db(), registry=None, executor=None)
    traj = run_rollout(task, agent, None, env, cfg)
    assert traj.termination == "stop"
    roles = [m.role for m in traj.messages]
    assert roles.count("agent_text") == 1
    assert roles.count("user") == 1  # the seed query only


def test_degenerate_multi_step_mode():
    """user_mode=none + local_env: tool calls, no user beyond the seed."""
    task = make_task()
    agent = ScriptedAgent([call("peek", id="r"), call("poke", id="r", v=2), AgentStep(text="done")])
    cfg = RolloutConfig(user_mode="none", tool_execution="local_env")
    traj = run_rollout(task, agent, None, EnvInstance.local(task, make_registry()), cfg)
    assert traj.termination == "stop"
    roles = [m.role for m in traj.messages]
    assert roles.count("user") == 1
    assert roles.count("tool_call") == 2
    assert traj.final_db.get_record("t", "r")["v"] == 2


def test_multiple_sequential_calls_in_one_step():
    task = make_task()
    agent = ScriptedAgent([AgentStep(calls=[ToolCall("peek", {"id": "r"}), ToolCall("think")]),
                           AgentStep(text=STOP_SENTINEL)])
    traj = run_rollout(task, agent, ScriptedUser(["hello"]), EnvInstance.local(task, make_registry()), scripted_cfg())
    roles = [m.role for m in traj.messages]
    assert roles == ["system", "user", "tool_call", "tool_result", "tool_call", "tool_result", "agent_text"]


def test_token_cap_enforced():
    task = make_task()
    agent = ScriptedAgent([AgentStep(text="w " * 50)] * 50)
    user = ScriptedUser(["hello"] + ["more words please right now"] * 60)
    cfg = scripted_cfg(max_tokens=120)
    traj = run_rollout(task, agent, user, EnvInstance.local(task, make_registry()), cfg)
    assert traj.termination == "token_cap"
    assert traj.total_tokens() <= 120


def test_group_isolation_and_determinism():
    task = make_task()

    class WriterAgent:
        def session(self, task, seed):
            steps = [call("poke", id="r", v=seed % 97), AgentStep(text=STOP_SENTINEL)]
            return ScriptedAgent(steps).session(task, seed)

    cfg = scripted_cfg(group_size=4, seed=11)
    group = run_group(task, WriterAgent(), ScriptedUser(["hello"]), cfg, registry=make_registry())
    assert len(group.trajectories) == len(group.rewards) == 4
    # each rollout mutated its own copy, not a shared database
    hashes = [t.final_db.content_hash() for t in group.trajectories]
    assert len(set(hashes)) == len(set(t.final_db.get_record("t", "r")["v"] for t in group.trajectories))
    again = run_group(task, WriterAgent(), ScriptedUser(["hello"]), cfg, registry=make_registry())
    assert [t.to_json() for t in again.trajectories] == [t.to_json() for t in group.trajectories]


def test_group_g1_and_mixed_rewards():
    task = make_task()
    g1 = run_group(task, ScriptedAgent([AgentStep(text=STOP_SENTINEL)]), ScriptedUser(["hello"]),
                   scripted_cfg(group_size=1), registry=make_registry())
    assert len(g1.trajectories) == 1 and g1.rewards == [1]

    class AlternatingAgent:
        def __init__(self):
            self.count = 0

        def session(self, task, seed):
            self.count += 1
            if self.count % 2:
                return ScriptedAgent([AgentStep(text=STOP_SENTINEL)]).session(task, seed)
            return ScriptedAgent([call("poke", id="r", v=9), AgentStep(text=STOP_SENTINEL)]).session(task, seed)

    g2 = run_group(task, AlternatingAgent(), ScriptedUser(["hello"]), scripted_cfg(group_size=2),
                   registry=make_registry())
    assert sorted(g2.rewards) == [0, 1]


def test_tag_tokens_mask_partition():
    messages = [
        Message("system", "s", 1, 0),
        Message("user", "u", 1, 1),
        Message("tool_call", ToolCall("think"), 1, 1),
        Message("tool_result", ToolResult(ok=True, payload=""), 1, 1),
        Message("agent_text", "a", 1, 1),
    ]
    records = [TokenRecord(0, 0, -1.0, -1.0, message_index=i) for i in range(5)]
    traj = tag_tokens(Trajectory("t", messages, "stop", None, token_records=records))
    assert [r.mask for r in traj.token_records] == [False, False, True, False, True]
    bad = Trajectory("t", messages, "stop", None, token_records=[TokenRecord(0, 0, -1.0, -1.0, message_index=9)])
    with pytest.raises(ValueError):
        tag_tokens(bad)


def test_trajectory_jsonl_round_trip(tmp_path, retail_bundle, retail_correct):
    agent, user = retail_correct
    task = retail_bundle.task("retail/modify_earbuds_blue")
    traj = run_rollout(task, agent, user, EnvInstance.local(task, retail_bundle.registry), scripted_cfg())
    result = score(task, traj.final_db, traj)
    traj.reward, traj.tcr = result.reward, float(result.tcr)
    path = tmp_path / "t.jsonl"
    write_trajectories(path, [traj])
    back = read_trajectories(path)[0]
    assert back.task_id == traj.task_id
    assert back.termination == traj.termination
    assert back.messages == traj.messages
    assert back.reward == traj.reward
    assert back.recorded_final_db_hash == traj.final_db.content_hash()


def test_bundled_correct_retail_replay(retail_bundle, retail_correct):
    agent, user = retail_correct
    task = retail_bundle.task("retail/modify_earbuds_blue")
    traj = run_rollout(task, agent, user, EnvInstance.local(task, retail_bundle.registry), scripted_cfg())
    assert traj.termination == "stop"
    order = traj.final_db.get_record("orders", "#W5061109")
    assert order["items"][1]["item_id"] == "6077640618"
    assert order["items"][1]["price"] == 242.92
    refund = order["payment_history"][-1]
    assert refund["transaction_type"] == "refund" and refund["amount"] == pytest.approx(13.75, abs=1e-9)
    assert score(task, traj.final_db, traj).reward == 1


def test_config_validation():
    with pytest.raises(ValueError):
        RolloutConfig(max_turns=0)
    with pytest.raises(ValueError):
        RolloutConfig(group_size=0)
    with pytest.raises(ValueError):
        RolloutConfig(agent_temperature=-0.1)
    with pytest.raises(ValueError):
        RolloutConfig(user_mode="telepathy")
    with pytest.raises(ValueError):
        RolloutConfig(tool_execution="wishful")
