"""Cold-start data factory: agent/user/tool collaboration, dual verification,
and SFT corpus export.

Tool results come either from a deterministic interpreter over a small
synthetic memory database or from a tool-role model (mockable); finished
trajectories pass rule checks plus a judge before entering the corpus.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np

from agentloop.db import Database, canonical_json
from agentloop.domain import Task
from agentloop.rollout import (
    EnvInstance,
    Message,
    RolloutConfig,
    Trajectory,
    TransportError,
    count_tokens,
    run_rollout,
)
from agentloop.tools import ToolCall, ToolRegistry, ToolResult, ToolSpec, execute_tool

VERDICTS = ("unverified", "accepted", "rejected")


@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    domain_policy: str
    schemas: Mapping[str, Mapping[str, Any]]
    tool_specs: Tuple[ToolSpec, ...]
    seed_queries: Tuple[str, ...] = ()

    def registry(self) -> ToolRegistry:
        reg = ToolRegistry()
        for spec in self.tool_specs:
            reg.add(spec)
        return reg


def load_scenario(source: str | Path | Mapping[str, Any]) -> Scenario:
    if isinstance(source, (str, Path)):
        doc = json.loads(Path(source).read_text(encoding="utf-8"))
    else:
        doc = dict(source)
    specs = tuple(
        ToolSpec(
            name=t["name"],
            description=t.get("description", ""),
            parameters=t.get("parameters", {"type": "object", "properties": {}}),
            mutating=bool(t.get("mutating", False)),
            side_channel=t.get("side_channel", "database"),
            behavior=t.get("behavior"),
        )
        for t in doc.get("tools", [])
    )
    return Scenario(
        scenario_id=doc["scenario_id"],
        domain_policy=doc.get("domain_policy", ""),
        schemas=doc.get("schemas", {}),
        tool_specs=specs,
        seed_queries=tuple(doc.get("seed_queries", [])),
    )


@dataclass
class SyntheticMemory:
    db: Database
    seed: int
    generator_version: int = 1


GENERATOR_VERSION = 1


def generate_memory(scenario: Scenario, seed: int, max_records_per_table: int = 10) -> SyntheticMemory:
    """Schema-valid small database, deterministic for a fixed (scenario, seed).

    Field descriptors: "string" | "int" | "float" | "bool" | "ref:<table>"
    | {"choice": [...]}. Reference fields always point at existing records.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, GENERATOR_VERSION])))
    tables: Dict[str, Dict[str, Any]] = {}
    pending = dict(scenario.schemas)
    # Resolve in dependency order so ref targets exist first.
    progress = True
    order: List[str] = []
    while pending and progress:
        progress = False
        for name in sorted(pending):
            deps = {
                str(desc).split(":", 1)[1]
                for desc in pending[name].values()
                if isinstance(desc, str) and desc.startswith("ref:")
            }
            if deps <= set(order) | {name}:
                order.append(name)
                del pending[name]
                progress = True
    if pending:
        raise ValueError(f"unsatisfiable schema references: {sorted(pending)}")

    for table in order:
        schema = scenario.schemas[table]
        n = int(rng.integers(1, max_records_per_table + 1)) if max_records_per_table > 0 else 0
        records: Dict[str, Any] = {}
        for i in range(n):
            rid = f"{table}_{i:03d}"
            rec: Dict[str, Any] = {"id": rid}
            for fld in sorted(schema):
                desc = schema[fld]
                rec[fld] = _gen_value(desc, fld, i, tables, rng)
            records[rid] = rec
        tables[table] = records
    return SyntheticMemory(db=Database(tables), seed=seed, generator_version=GENERATOR_VERSION)


def _gen_value(desc: Any, fld: str, i: int, tables: Mapping[str, Mapping[str, Any]], rng) -> Any:
    if isinstance(desc, Mapping) and "choice" in desc:
        options = list(desc["choice"])
        return options[int(rng.integers(0, len(options)))]
    if desc == "string":
        return f"{fld}_{int(rng.integers(0, 10_000)):04d}"
    if desc == "int":
        return int(rng.integers(0, 1000))
    if desc == "float":
        return round(float(rng.uniform(0, 1000)), 2)
    if desc == "bool":
        return bool(rng.integers(0, 2))
    if isinstance(desc, str) and desc.startswith("ref:"):
        target = desc.split(":", 1)[1]
        ids = sorted(tables.get(target, {}))
        if not ids:
            return None
        return ids[int(rng.integers(0, len(ids)))]
    raise ValueError(f"unknown field descriptor {desc!r}")


# ---------------------------------------------------------------------------
# Tool simulation backends


class ToolModelClient(Protocol):
    """Tool-role model: given the memory serialization and a call, produce a result."""

    def complete(self, memory_json: str, call: ToolCall) -> Any: ...


def memory_prompt(memory: SyntheticMemory, tables: Optional[Sequence[str]] = None) -> str:
    """Compact canonical JSON of the relevant tables shown to the tool model."""
    full = memory.db.tables_copy()
    if tables is not None:
        full = {t: full.get(t, {}) for t in tables}
    return canonical_json(full)


def simulate_tool(
    call: ToolCall,
    memory: SyntheticMemory,
    backend: str,
    registry: ToolRegistry,
    tool_client: Optional[ToolModelClient] = None,
) -> ToolResult:
    if backend == "interpreter":
        return execute_tool(memory.db, call, registry)
    if backend != "llm":
        raise ValueError(f"unknown backend {backend!r}")
    if call.name not in registry:
        return ToolResult(ok=False, error_text=f"Error: unknown tool {call.name}")
    schema_error = registry.validate_arguments(call)
    if schema_error is not None:
        return ToolResult(ok=False, error_text=f"Invalid arguments: {schema_error}")
    raw = tool_client.complete(memory_prompt(memory), call)
    return parse_tool_model_output(raw)


def parse_tool_model_output(raw: Any) -> ToolResult:
    """Best-effort parse of a tool-role model reply; unparseable output
    degrades to an error result instead of crashing the pipeline."""
    if isinstance(raw, ToolResult):
        return raw
    if isinstance(raw, str):
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError:
            return ToolResult(ok=False, error_text="tool model produced unparseable output")
    if isinstance(raw, Mapping):
        if "ok" in raw:
            return ToolResult.from_json(raw)
        return ToolResult(ok=True, payload=dict(raw))
    return ToolResult(ok=False, error_text="tool model produced unparseable output")


class InterpreterEchoToolClient:
    """Mock tool model that echoes ground truth by running the interpreter."""

    def __init__(self, registry: ToolRegistry, memory: SyntheticMemory):
        self.registry = registry
        self.memory = memory

    def complete(self, memory_json: str, call: ToolCall) -> ToolResult:
        return execute_tool(self.memory.db.clone(), call, self.registry)


class ReplayToolClient:
    """Mock tool model that plays back recorded results in order."""

    def __init__(self, results: Sequence[Any]):
        self.results = list(results)
        self._pos = 0

    def complete(self, memory_json: str, call: ToolCall) -> Any:
        if self._pos >= len(self.results):
            return ToolResult(ok=False, error_text="tool replay exhausted")
        out = self.results[self._pos]
        self._pos += 1
        return out


# ---------------------------------------------------------------------------
# Trajectory synthesis


@dataclass
class SynthTrajectory:
    scenario_id: str
    trajectory: Trajectory
    verdict: str = "unverified"
    judge_rationale: str = ""


def scenario_task(scenario: Scenario, memory: SyntheticMemory, query: str) -> Task:
    from agentloop.domain import VerificationCriterion

    return Task(
        id=f"{scenario.scenario_id}/synth",
        domain_id=scenario.scenario_id,
        system_policy=scenario.domain_policy,
        user_scenario=query,
        initial_db=memory.db.tables_copy(),
        # Synthesis has no gold outcome; a placeholder criterion keeps Task valid.
        criteria=(VerificationCriterion(kind="action_performed", target="", expected={}),),
    )


def synthesize_trajectory(
    scenario: Scenario,
    agent,
    user,
    memory: SyntheticMemory,
    cfg: RolloutConfig,
    tool_backend: str = "interpreter",
    tool_client: Optional[ToolModelClient] = None,
    query: Optional[str] = None,
    seed: int = 0,
) -> SynthTrajectory:
    registry = scenario.registry()
    if query is None:
        query = scenario.seed_queries[0] if scenario.seed_queries else ""

    def executor(db: Database, call: ToolCall) -> ToolResult:
        mem = SyntheticMemory(db=db, seed=memory.seed)
        return simulate_tool(call, mem, tool_backend, registry, tool_client)

    task = scenario_task(scenario, memory, query)
    env = EnvInstance(db=Database(memory.db.tables_copy()), registry=registry, executor=executor)
    try:
        traj = run_rollout(task, agent, user, env, cfg, seed=seed)
    except TransportError as exc:
        return SynthTrajectory(
            scenario_id=scenario.scenario_id,
            trajectory=Trajectory(task_id=task.id, messages=[], termination="protocol_error", final_db=env.db),
            verdict="rejected",
            judge_rationale=f"transport failure: {exc}",
        )
    out = SynthTrajectory(scenario_id=scenario.scenario_id, trajectory=traj)
    if traj.termination == "protocol_error":
        out.verdict = "rejected"
        out.judge_rationale = "rollout protocol error"
    return out


# ---------------------------------------------------------------------------
# Dual verification


RuleCheck = Callable[[Trajectory], Tuple[bool, str]]


def rule_well_formed(traj: Trajectory) -> Tuple[bool, str]:
    prev_role = None
    for m in traj.messages:
        if m.role == "tool_result" and prev_role != "tool_call":
            return False, "tool_result without preceding tool_call"
        prev_role = m.role
    return True, "well-formed role alternation"


def rule_calls_answered(traj: Trajectory) -> Tuple[bool, str]:
    for i, m in enumerate(traj.messages):
        if m.role == "tool_call":
            if i + 1 >= len(traj.messages) or traj.messages[i + 1].role != "tool_result":
                return False, "unanswered tool_call"
    return True, "every tool_call answered"


def rule_sentinel_terminated(traj: Trajectory) -> Tuple[bool, str]:
    if traj.termination in ("stop", "transfer"):
        return True, "sentinel-terminated"
    return False, f"terminated by {traj.termination}"


def rule_tool_used(traj: Trajectory) -> Tuple[bool, str]:
    if any(ok for _, ok in traj.tool_log()):
        return True, "has a successful tool call"
    return False, "no successful tool use"


DEFAULT_RULES: Tuple[RuleCheck, ...] = (
    rule_well_formed,
    rule_calls_answered,
    rule_sentinel_terminated,
    rule_tool_used,
)


class JudgeClient(Protocol):
    def judge(self, traj: Trajectory) -> Tuple[bool, str]: ...


class StaticJudge:
    def __init__(self, accept: bool, rationale: str = ""):
        self.accept = accept
        self.rationale = rationale

    def judge(self, traj: Trajectory) -> Tuple[bool, str]:
        return self.accept, self.rationale


class ChatJudge:
    """Judge over the chat protocol; an 'ACCEPT' token in the reply accepts."""

    def __init__(self, cfg, prompt: str = "Review this tool-use conversation. Reply ACCEPT or REJECT with a reason."):
        self.cfg = cfg
        self.prompt = prompt

    def judge(self, traj: Trajectory) -> Tuple[bool, str]:
        from agentloop.clients import ChatRequest, chat

        transcript = "\n".join(f"{m.role}: {m.text()}" for m in traj.messages)
        req = ChatRequest(
            model=self.cfg.model,
            messages=[
                {"role": "system", "content": self.prompt},
                {"role": "user", "content": transcript},
            ],
            temperature=0.0,
        )
        resp = chat(self.cfg, req)
        text = resp.content or ""
        return "ACCEPT" in text.upper().split("REJECT")[0] and "ACCEPT" in text.upper(), text


def dual_verify(
    synth: SynthTrajectory,
    judge: JudgeClient,
    rules: Sequence[RuleCheck] = DEFAULT_RULES,
) -> SynthTrajectory:
    """Rules first, judge second; judge transport failure leaves it unverified."""
    if synth.verdict != "unverified":
        return synth
    for rule in rules:
        ok, label = rule(synth.trajectory)
        if not ok:
            synth.verdict = "rejected"
            synth.judge_rationale = f"rule check failed: {label}"
            return synth
    try:
        accept, rationale = judge.judge(synth.trajectory)
    except TransportError as exc:
        synth.judge_rationale = f"judge unavailable: {exc}"
        return synth  # stays unverified, never silently accepted
    synth.verdict = "accepted" if accept else "rejected"
    synth.judge_rationale = rationale
    return synth


# ---------------------------------------------------------------------------
# SFT corpus export / import


def _to_chat_line(synth: SynthTrajectory) -> dict:
    messages = []
    for m in synth.trajectory.messages:
        if m.role == "system":
            messages.append({"role": "system", "content": m.content})
        elif m.role == "user":
            messages.append({"role": "user", "content": m.content})
        elif m.role == "agent_text":
            messages.append({"role": "assistant", "content": m.content})
        elif m.role == "tool_call":
            messages.append(
                {
                    "role": "assistant",
                    "content": None,
                    "tool_calls": [
                        {
                            "type": "function",
                            "function": {
                                "name": m.content.name,
                                "arguments": json.dumps(dict(m.content.arguments), sort_keys=True),
                            },
                        }
                    ],
                }
            )
        elif m.role == "tool_result":
            messages.append({"role": "tool", "content": json.dumps(m.content.to_json(), sort_keys=True)})
    return {"scenario_id": synth.scenario_id, "task_id": synth.trajectory.task_id, "messages": messages}


def _from_chat_line(obj: Mapping[str, Any]) -> SynthTrajectory:
    messages: List[Message] = []
    turn = 0
    for m in obj["messages"]:
        role = m["role"]
        if role == "system":
            messages.append(Message("system", m["content"], count_tokens(m["content"]), 0))
        elif role == "user":
            turn += 1
            messages.append(Message("user", m["content"], count_tokens(m["content"]), turn))
        elif role == "assistant" and m.get("tool_calls"):
            fn = m["tool_calls"][0]["function"]
            call = ToolCall(name=fn["name"], arguments=json.loads(fn["arguments"]))
            msg = Message("tool_call", call, 0, turn)
            msg.token_count = max(count_tokens(msg.text()), 1)
            messages.append(msg)
        elif role == "assistant":
            messages.append(Message("agent_text", m["content"], count_tokens(m["content"]), turn))
        elif role == "tool":
            result = ToolResult.from_json(json.loads(m["content"]))
            msg = Message("tool_result", result, 0, turn)
            msg.token_count = max(count_tokens(msg.text()), 1)
            messages.append(msg)
    last_text = next(
        (m.text() for m in reversed(messages) if m.role in ("user", "agent_text")), ""
    )
    from agentloop.rollout import detect_termination

    term = detect_termination(last_text)
    traj = Trajectory(
        task_id=obj.get("task_id", ""),
        messages=messages,
        termination=term if term != "continue" else "stop",
        final_db=None,
    )
    return SynthTrajectory(scenario_id=obj["scenario_id"], trajectory=traj, verdict="accepted")


def export_sft(trajectories: Sequence[SynthTrajectory], path: str | Path) -> int:
    """Write accepted trajectories as conversation JSONL; refuses anything else."""
    for synth in trajectories:
        if synth.verdict != "accepted":
            raise ValueError(f"refusing to export trajectory with verdict {synth.verdict!r}")
    with open(path, "w", encoding="utf-8") as fh:
        for synth in trajectories:
            fh.write(json.dumps(_to_chat_line(synth), sort_keys=True) + "\n")
    return len(trajectories)


def import_sft(path: str | Path) -> List[SynthTrajectory]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(_from_chat_line(json.loads(line)))
    return out
