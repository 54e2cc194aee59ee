"""Multi-turn episode engine: agent <-> user <-> database, with budgets.

One episode alternates agent steps against a user simulator and a tool
executor. An agent step emits either one or more sequential tool calls
(executed immediately, results appended) or a single text message that is
forwarded to the user. Episodes end on a stop/transfer sentinel, the turn
cap, the token cap, or a protocol violation. The degenerate configurations
(no user, no tools) reduce to single-shot text generation; (no user, local
tools) reduce to multi-step tool rollouts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from agentloop.db import Database
from agentloop.domain import DomainBundle, Task, score
from agentloop.tools import ToolCall, ToolRegistry, ToolResult, execute_tool

STOP_SENTINEL = "###STOP###"
TRANSFER_SENTINEL = "###TRANSFER###"

ROLES = ("system", "user", "agent_text", "tool_call", "tool_result")
AGENT_ROLES = ("agent_text", "tool_call")
TERMINATIONS = ("stop", "transfer", "turn_cap", "token_cap", "protocol_error")
USER_MODES = ("llm", "scripted", "none")
TOOL_EXECUTION_MODES = ("local_env", "remote_executor", "llm_simulated", "none")


class TransportError(RuntimeError):
    """A client-side failure that survived its retry budget."""


def count_tokens(text: str) -> int:
    return len(text.split())


@dataclass
class TokenRecord:
    """One policy token/action with the log-probs needed by the optimizer."""

    context_id: int
    action_id: int
    logprob_old: float
    logprob_ref: float
    mask: bool = False
    message_index: int = -1

    def to_json(self) -> dict:
        return {
            "context_id": self.context_id,
            "action_id": self.action_id,
            "logprob_old": self.logprob_old,
            "logprob_ref": self.logprob_ref,
            "mask": self.mask,
            "message_index": self.message_index,
        }

    @staticmethod
    def from_json(obj: dict) -> "TokenRecord":
        return TokenRecord(
            context_id=int(obj["context_id"]),
            action_id=int(obj["action_id"]),
            logprob_old=float(obj["logprob_old"]),
            logprob_ref=float(obj["logprob_ref"]),
            mask=bool(obj.get("mask", False)),
            message_index=int(obj.get("message_index", -1)),
        )


@dataclass
class Message:
    role: str
    content: Any  # str for text roles, ToolCall / ToolResult otherwise
    token_count: int
    turn_index: int

    def text(self) -> str:
        if isinstance(self.content, str):
            return self.content
        if isinstance(self.content, ToolResult):
            return self.content.render()
        return json.dumps(self.content.to_json(), sort_keys=True)

    def to_json(self) -> dict:
        content: Any = self.content
        if isinstance(content, (ToolCall, ToolResult)):
            content = content.to_json()
        return {
            "role": self.role,
            "content": content,
            "token_count": self.token_count,
            "turn": self.turn_index,
        }

    @staticmethod
    def from_json(obj: dict) -> "Message":
        role = obj["role"]
        content = obj["content"]
        if role == "tool_call":
            content = ToolCall.from_json(content)
        elif role == "tool_result":
            content = ToolResult.from_json(content)
        return Message(role=role, content=content, token_count=int(obj["token_count"]), turn_index=int(obj["turn"]))


@dataclass
class Trajectory:
    task_id: str
    messages: List[Message]
    termination: str
    final_db: Optional[Database]
    token_records: List[TokenRecord] = field(default_factory=list)
    reward: Optional[int] = None
    tcr: Optional[float] = None

    def tool_log(self) -> List[Tuple[ToolCall, bool]]:
        """Ordered (call, succeeded) pairs; a call's result immediately follows it."""
        out: List[Tuple[ToolCall, bool]] = []
        for i, msg in enumerate(self.messages):
            if msg.role == "tool_call":
                ok = False
                if i + 1 < len(self.messages) and self.messages[i + 1].role == "tool_result":
                    ok = self.messages[i + 1].content.ok
                out.append((msg.content, ok))
        return out

    def user_turns(self) -> int:
        return sum(1 for m in self.messages if m.role == "user")

    def agent_steps(self) -> int:
        steps = 0
        prev_was_call = False
        for m in self.messages:
            if m.role == "agent_text":
                steps += 1
                prev_was_call = False
            elif m.role == "tool_call":
                steps += 1
                prev_was_call = True
            elif m.role == "tool_result" and prev_was_call:
                prev_was_call = False
        return steps

    def total_tokens(self) -> int:
        return sum(m.token_count for m in self.messages)

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "messages": [m.to_json() for m in self.messages],
            "termination": self.termination,
            "reward": self.reward,
            "tcr": self.tcr,
            "token_records": [r.to_json() for r in self.token_records],
            "final_db_hash": self.final_db.content_hash() if self.final_db is not None else None,
        }

    @staticmethod
    def from_json(obj: dict) -> "Trajectory":
        traj = Trajectory(
            task_id=obj["task_id"],
            messages=[Message.from_json(m) for m in obj["messages"]],
            termination=obj["termination"],
            final_db=None,
            token_records=[TokenRecord.from_json(r) for r in obj.get("token_records", [])],
            reward=obj.get("reward"),
            tcr=obj.get("tcr"),
        )
        traj.recorded_final_db_hash = obj.get("final_db_hash")
        return traj


@dataclass(frozen=True)
class RolloutConfig:
    max_turns: int = 30
    max_tokens: int = 32768
    group_size: int = 8
    agent_temperature: float = 1.0
    user_mode: str = "llm"
    tool_execution: str = "local_env"
    seed: int = 0

    def __post_init__(self):
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        if self.agent_temperature < 0:
            raise ValueError("agent_temperature must be >= 0")
        if self.user_mode not in USER_MODES:
            raise ValueError(f"unknown user_mode {self.user_mode!r}")
        if self.tool_execution not in TOOL_EXECUTION_MODES:
            raise ValueError(f"unknown tool_execution {self.tool_execution!r}")


@dataclass
class Group:
    task_id: str
    trajectories: List[Trajectory]
    rewards: List[int]


@dataclass
class AgentStep:
    text: Optional[str] = None
    calls: Sequence[ToolCall] = ()
    records: Sequence[TokenRecord] = ()


@dataclass
class RolloutView:
    messages: Sequence[Message]
    db: Optional[Database]
    registry: Optional[ToolRegistry]


class AgentSession(Protocol):
    def step(self, view: RolloutView) -> AgentStep: ...


class AgentPolicy(Protocol):
    def session(self, task: Task, seed: int) -> AgentSession: ...


class UserSession(Protocol):
    def initial_message(self) -> str: ...

    def reply(self, agent_text: str) -> str: ...


class UserSimulator(Protocol):
    def session(self, task: Task, seed: int) -> UserSession: ...


ToolExecutorFn = Callable[[Database, ToolCall], ToolResult]


@dataclass
class EnvInstance:
    """A single-owner environment: one rollout mutates it at a time."""

    db: Database
    registry: Optional[ToolRegistry]
    executor: Optional[ToolExecutorFn]

    @staticmethod
    def local(task: Task, registry: ToolRegistry) -> "EnvInstance":
        db = task.fresh_db()
        return EnvInstance(db=db, registry=registry, executor=lambda d, c: execute_tool(d, c, registry))


def detect_termination(content: str) -> str:
    if STOP_SENTINEL in content:
        return "stop"
    if TRANSFER_SENTINEL in content:
        return "transfer"
    return "continue"


def run_rollout(
    task: Task,
    agent: AgentPolicy,
    user: Optional[UserSimulator],
    env: EnvInstance,
    cfg: RolloutConfig,
    seed: int = 0,
) -> Trajectory:
    messages: List[Message] = []
    records: List[TokenRecord] = []
    budget = cfg.max_tokens

    def append(msg: Message) -> bool:
        if sum(m.token_count for m in messages) + msg.token_count > budget:
            return False
        messages.append(msg)
        return True

    def finish(termination: str) -> Trajectory:
        traj = Trajectory(
            task_id=task.id,
            messages=messages,
            termination=termination,
            final_db=env.db,
            token_records=records,
        )
        return tag_tokens(traj)

    append(Message("system", task.system_policy, count_tokens(task.system_policy), 0))

    agent_sess = agent.session(task, seed)
    user_sess = None
    turn = 1
    try:
        if cfg.user_mode == "none":
            seed_text = task.user_scenario
        else:
            user_sess = user.session(task, seed)
            seed_text = user_sess.initial_message()
    except TransportError:
        return finish("protocol_error")
    if not append(Message("user", seed_text, count_tokens(seed_text), turn)):
        return finish("token_cap")

    agent_steps = 0
    while True:
        if agent_steps >= cfg.max_turns:
            return finish("turn_cap")
        try:
            step = agent_sess.step(RolloutView(messages=tuple(messages), db=env.db, registry=env.registry))
        except TransportError:
            return finish("protocol_error")
        agent_steps += 1

        has_text = step.text is not None
        has_calls = len(step.calls) > 0
        if has_text == has_calls:  # both or neither
            return finish("protocol_error")

        if has_calls:
            if cfg.tool_execution == "none" or env.executor is None:
                return finish("protocol_error")
            for j, call in enumerate(step.calls):
                msg = Message("tool_call", call, 0, turn)
                msg.token_count = max(count_tokens(msg.text()), 1)
                step_records = [replace(r) for r in step.records] if j == 0 else []
                for r in step_records:
                    r.message_index = len(messages)
                if not append(msg):
                    return finish("token_cap")
                records.extend(step_records)
                result = env.executor(env.db, call)
                rmsg = Message("tool_result", result, 0, turn)
                rmsg.token_count = max(count_tokens(rmsg.text()), 1)
                if not append(rmsg):
                    return finish("token_cap")
            continue

        text = step.text
        msg = Message("agent_text", text, len(step.records) or count_tokens(text), turn)
        step_records = [replace(r) for r in step.records]
        for r in step_records:
            r.message_index = len(messages)
        if not append(msg):
            return finish("token_cap")
        records.extend(step_records)

        term = detect_termination(text)
        if term != "continue":
            return finish(term)
        if user_sess is None:
            # No user to hand the text to: the message is the final answer.
            return finish("stop")
        if turn + 1 > cfg.max_turns:
            return finish("turn_cap")
        try:
            reply = user_sess.reply(text)
        except TransportError:
            return finish("protocol_error")
        turn += 1
        if not append(Message("user", reply, count_tokens(reply), turn)):
            return finish("token_cap")
        term = detect_termination(reply)
        if term != "continue":
            return finish(term)


def run_group(
    task: Task,
    agent: AgentPolicy,
    user: Optional[UserSimulator],
    cfg: RolloutConfig,
    registry: Optional[ToolRegistry] = None,
    env_factory: Optional[Callable[[Task], EnvInstance]] = None,
) -> Group:
    """G independent rollouts, each on its own snapshot of the task's initial db."""
    if env_factory is None:
        if cfg.tool_execution == "none":
            env_factory = lambda t: EnvInstance(db=t.fresh_db(), registry=registry, executor=None)
        else:
            env_factory = lambda t: EnvInstance.local(t, registry)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.group_size)
    trajectories: List[Trajectory] = []
    rewards: List[int] = []
    for i in range(cfg.group_size):
        env = env_factory(task)
        seed = int(seeds[i].generate_state(1)[0])
        traj = run_rollout(task, agent, user, env, cfg, seed=seed)
        result = score(task, traj.final_db, traj)
        traj.reward = result.reward
        traj.tcr = float(result.tcr)
        trajectories.append(traj)
        rewards.append(result.reward)
    return Group(task_id=task.id, trajectories=trajectories, rewards=rewards)


def tag_tokens(traj: Trajectory) -> Trajectory:
    """Mask exactly the tokens the agent generated (its text and tool calls)."""
    n = len(traj.messages)
    for rec in traj.token_records:
        if not (0 <= rec.message_index < n):
            raise ValueError(f"token record points at message {rec.message_index}, trajectory has {n}")
        rec.mask = traj.messages[rec.message_index].role in AGENT_ROLES
    return traj


# ---------------------------------------------------------------------------
# JSONL persistence


def write_trajectories(path: str | Path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(json.dumps(traj.to_json(), sort_keys=True) + "\n")


def read_trajectories(path: str | Path) -> List[Trajectory]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(Trajectory.from_json(json.loads(line)))
    return out
