"""Access to the bundled domains, scenarios, and replay scripts."""

from __future__ import annotations

import json
from importlib.resources import files
from pathlib import Path
from typing import Any, Dict, List, Tuple

from agentloop.domain import DomainBundle, load_domain
from agentloop.grpo import ActionSpec
from agentloop.rollout import AgentStep, RolloutConfig
from agentloop.synth import Scenario, load_scenario
from agentloop.tools import ToolCall, ToolResult


def data_path(name: str) -> Path:
    return Path(str(files("agentloop").joinpath("data").joinpath(name)))


def load_retail() -> DomainBundle:
    return load_domain(data_path("retail_domain.json"))


def toy_document() -> Dict[str, Any]:
    return json.loads(data_path("toy_domain.json").read_text(encoding="utf-8"))


def load_toy() -> Tuple[DomainBundle, List[ActionSpec], RolloutConfig, int]:
    """Bundle, action table, rollout config, and context count for the trainable world."""
    doc = toy_document()
    bundle = load_domain(doc)
    actions = [ActionSpec.from_json(a) for a in doc["actions"]]
    cfg_doc = doc.get("config", {})
    n_contexts = int(cfg_doc.pop("n_contexts", 4))
    rollout_cfg = RolloutConfig(**cfg_doc)
    return bundle, actions, rollout_cfg, n_contexts


def load_replay(name: str) -> Dict[str, Any]:
    return json.loads(data_path(f"replays/{name}").read_text(encoding="utf-8"))


def replay_scenario(replay: Dict[str, Any]) -> Scenario:
    return load_scenario(data_path(replay["scenario_file"]))


def replay_agent_steps(replay: Dict[str, Any]) -> List[AgentStep]:
    steps = []
    for raw in replay["agent_steps"]:
        if "call" in raw:
            steps.append(AgentStep(calls=[ToolCall.from_json(raw["call"])]))
        else:
            steps.append(AgentStep(text=raw["text"]))
    return steps


def replay_tool_results(replay: Dict[str, Any]) -> List[ToolResult]:
    return [ToolResult.from_json(r) for r in replay["tool_results"]]
