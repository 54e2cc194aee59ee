"""HTTP chat-completions transport plus deterministic scripted stand-ins.

One wire protocol (chat-completions JSON with function calling) serves every
LLM-backed role: agent, user simulator, tool simulator, and synthesis judge.
Only the prompts differ. Scripted equivalents keep the rest of the package
testable offline.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence

import requests

from agentloop.domain import Task
from agentloop.rollout import (
    AgentStep,
    Message,
    RolloutView,
    STOP_SENTINEL,
    TransportError,
)
from agentloop.tools import ToolCall, ToolResult, ToolSpec

RETRYABLE_STATUS = {429, 500, 502, 503, 504}


class AuthError(RuntimeError):
    """Non-retryable authentication failure."""


class WireFormatError(RuntimeError):
    """The response body did not match the chat-completions schema."""


@dataclass(frozen=True)
class ClientConfig:
    base_url: str
    model: str = "default"
    api_key_env: str = "AGENTLOOP_API_KEY"
    timeout: float = 30.0
    max_retries: int = 2
    backoff: Sequence[float] = (0.0,)

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")

    def api_key(self) -> Optional[str]:
        return os.environ.get(self.api_key_env)


@dataclass
class ChatRequest:
    model: str
    messages: List[Dict[str, Any]]
    tools: Optional[List[Dict[str, Any]]] = None
    temperature: float = 1.0
    max_tokens: int = 1024

    def __post_init__(self):
        prev_plain_assistant = False
        for m in self.messages:
            role = m.get("role")
            if role not in ("system", "user", "assistant", "tool"):
                raise ValueError(f"illegal chat role {role!r}")
            is_plain_assistant = role == "assistant" and not m.get("tool_calls")
            if role == "assistant" and prev_plain_assistant:
                raise ValueError("two consecutive assistant messages without intervening content")
            prev_plain_assistant = is_plain_assistant

    def to_json(self) -> Dict[str, Any]:
        body: Dict[str, Any] = {
            "model": self.model,
            "messages": self.messages,
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }
        if self.tools:
            body["tools"] = self.tools
        return body


@dataclass
class ChatResponse:
    content: Optional[str]
    tool_calls: List[ToolCall] = field(default_factory=list)
    usage: Dict[str, int] = field(default_factory=dict)
    logprobs: Optional[List[float]] = None

    def __post_init__(self):
        if self.content is None and not self.tool_calls:
            raise WireFormatError("response carries neither content nor tool calls")


def parse_chat_response(body: Mapping[str, Any]) -> ChatResponse:
    try:
        message = body["choices"][0]["message"]
    except (KeyError, IndexError, TypeError) as exc:
        raise WireFormatError(f"malformed response body: {exc}") from exc
    calls = []
    for tc in message.get("tool_calls") or []:
        fn = tc.get("function", {})
        args = fn.get("arguments", "{}")
        if isinstance(args, str):
            try:
                args = json.loads(args) if args else {}
            except json.JSONDecodeError as exc:
                raise WireFormatError(f"unparseable tool arguments: {exc}") from exc
        calls.append(ToolCall(name=fn.get("name", ""), arguments=args))
    usage = {k: int(v) for k, v in (body.get("usage") or {}).items() if isinstance(v, (int, float))}
    return ChatResponse(content=message.get("content"), tool_calls=calls, usage=usage)


def chat(cfg: ClientConfig, req: ChatRequest) -> ChatResponse:
    """POST the request; retry timeouts/429/5xx per the backoff schedule."""
    url = cfg.base_url.rstrip("/") + "/chat/completions"
    headers = {"Content-Type": "application/json"}
    key = cfg.api_key()
    if key:
        headers["Authorization"] = f"Bearer {key}"

    attempts = 1 + cfg.max_retries
    last_error: Optional[str] = None
    for attempt in range(attempts):
        if attempt > 0:
            schedule = cfg.backoff or (0.0,)
            time.sleep(schedule[min(attempt - 1, len(schedule) - 1)])
        try:
            resp = requests.post(url, json=req.to_json(), headers=headers, timeout=cfg.timeout)
        except requests.RequestException as exc:
            last_error = type(exc).__name__
            continue
        if resp.status_code in (401, 403):
            raise AuthError(f"authentication failed (HTTP {resp.status_code})")
        if resp.status_code in RETRYABLE_STATUS:
            last_error = f"HTTP {resp.status_code}"
            continue
        if resp.status_code != 200:
            raise TransportError(f"unexpected HTTP {resp.status_code}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise WireFormatError(f"response is not JSON: {exc}") from exc
        return parse_chat_response(body)
    raise TransportError(f"retries exhausted after {attempts} attempts ({last_error})")


# ---------------------------------------------------------------------------
# Scripted stand-ins


class ScriptedUser:
    """Replies in order; once the script runs out, emits the stop sentinel."""

    def __init__(self, script: Sequence[str], exhausted_reply: str = STOP_SENTINEL):
        if not script:
            raise ValueError("script must be non-empty")
        self.script = list(script)
        self.exhausted_reply = exhausted_reply

    def session(self, task: Task, seed: int) -> "ScriptedUserSession":
        return ScriptedUserSession(self.script, self.exhausted_reply)


class ScriptedUserSession:
    def __init__(self, script: List[str], exhausted_reply: str):
        self._script = list(script)
        self._pos = 0
        self._exhausted_reply = exhausted_reply

    def _next(self) -> str:
        if self._pos < len(self._script):
            reply = self._script[self._pos]
            self._pos += 1
            return reply
        return self._exhausted_reply

    def initial_message(self) -> str:
        return self._next()

    def reply(self, agent_text: str) -> str:
        return self._next()


def scripted_user(script: Sequence[str], exhausted_reply: str = STOP_SENTINEL) -> ScriptedUser:
    return ScriptedUser(script, exhausted_reply)


class ScriptedAgent:
    """Plays back a fixed list of agent steps; ends with a stop message."""

    def __init__(self, steps: Sequence[AgentStep]):
        self.steps = list(steps)

    def session(self, task: Task, seed: int) -> "ScriptedAgentSession":
        return ScriptedAgentSession(self.steps)


class ScriptedAgentSession:
    def __init__(self, steps: List[AgentStep]):
        self._steps = list(steps)
        self._pos = 0

    def step(self, view: RolloutView) -> AgentStep:
        if self._pos < len(self._steps):
            step = self._steps[self._pos]
            self._pos += 1
            return step
        return AgentStep(text=STOP_SENTINEL)


# ---------------------------------------------------------------------------
# LLM-backed roles


class LlmAgent:
    """Agent role over the chat protocol, function-calling mode."""

    def __init__(self, cfg: ClientConfig, temperature: float = 1.0, max_tokens: int = 1024):
        self.cfg = cfg
        self.temperature = temperature
        self.max_tokens = max_tokens

    def session(self, task: Task, seed: int) -> "LlmAgentSession":
        return LlmAgentSession(self)


class LlmAgentSession:
    def __init__(self, agent: LlmAgent):
        self.agent = agent

    def step(self, view: RolloutView) -> AgentStep:
        req = ChatRequest(
            model=self.agent.cfg.model,
            messages=chat_messages_from_rollout(view.messages),
            tools=view.registry.function_declarations() if view.registry else None,
            temperature=self.agent.temperature,
            max_tokens=self.agent.max_tokens,
        )
        resp = chat(self.agent.cfg, req)
        if resp.tool_calls and resp.content:
            return AgentStep(text=resp.content, calls=resp.tool_calls)  # protocol violation upstream
        if resp.tool_calls:
            return AgentStep(calls=resp.tool_calls)
        return AgentStep(text=resp.content or "")


# The user-simulator prompt is versioned config, not code; edit the fixture
# file to change the persona.
def _load_user_template() -> str:
    from importlib.resources import files

    return files("agentloop").joinpath("data/user_prompt_template.txt").read_text(encoding="utf-8")


DEFAULT_USER_TEMPLATE = _load_user_template()


class LlmUser:
    """User-simulator role; by default it sees only the agent's text messages."""

    def __init__(self, cfg: ClientConfig, template: str = DEFAULT_USER_TEMPLATE, max_tokens: int = 512):
        self.cfg = cfg
        self.template = template
        self.max_tokens = max_tokens

    def session(self, task: Task, seed: int) -> "LlmUserSession":
        from agentloop.rollout import TRANSFER_SENTINEL

        system = self.template.format(
            scenario=task.user_scenario, stop=STOP_SENTINEL, transfer=TRANSFER_SENTINEL
        )
        return LlmUserSession(self, system)


class LlmUserSession:
    def __init__(self, user: LlmUser, system: str):
        self.user = user
        # Roles are inverted here: the simulated user is the "assistant".
        self.history: List[Dict[str, Any]] = [{"role": "system", "content": system}]

    def _complete(self) -> str:
        req = ChatRequest(
            model=self.user.cfg.model,
            messages=list(self.history),
            temperature=1.0,
            max_tokens=self.user.max_tokens,
        )
        resp = chat(self.user.cfg, req)
        text = resp.content or ""
        self.history.append({"role": "assistant", "content": text})
        return text

    def initial_message(self) -> str:
        self.history.append({"role": "user", "content": "Hi! How can I help you today?"})
        return self._complete()

    def reply(self, agent_text: str) -> str:
        self.history.append({"role": "user", "content": agent_text})
        return self._complete()


def chat_messages_from_rollout(messages: Sequence[Message]) -> List[Dict[str, Any]]:
    """Project rollout messages onto the chat wire roles."""
    out: List[Dict[str, Any]] = []
    call_counter = 0
    for m in messages:
        if m.role == "system":
            out.append({"role": "system", "content": m.content})
        elif m.role == "user":
            out.append({"role": "user", "content": m.content})
        elif m.role == "agent_text":
            out.append({"role": "assistant", "content": m.content})
        elif m.role == "tool_call":
            call_counter += 1
            out.append(
                {
                    "role": "assistant",
                    "content": None,
                    "tool_calls": [
                        {
                            "id": f"call_{call_counter}",
                            "type": "function",
                            "function": {
                                "name": m.content.name,
                                "arguments": json.dumps(dict(m.content.arguments)),
                            },
                        }
                    ],
                }
            )
        elif m.role == "tool_result":
            out.append({"role": "tool", "tool_call_id": f"call_{call_counter}", "content": m.content.render()})
    return out


# ---------------------------------------------------------------------------
# Remote tool execution


class RemoteToolExecutor:
    """Forwards tool calls to an HTTP executor; transport errors become
    ok=False results so the agent can see and recover from them."""

    def __init__(self, cfg: ClientConfig):
        self.cfg = cfg
        self.tools: List[ToolSpec] = self._fetch_tools()

    def _request(self, method: str, path: str, body: Optional[dict] = None) -> Any:
        url = self.cfg.base_url.rstrip("/") + path
        attempts = 1 + self.cfg.max_retries
        last_error = "unknown"
        for attempt in range(attempts):
            if attempt > 0:
                schedule = self.cfg.backoff or (0.0,)
                time.sleep(schedule[min(attempt - 1, len(schedule) - 1)])
            try:
                resp = requests.request(method, url, json=body, timeout=self.cfg.timeout)
            except requests.RequestException as exc:
                last_error = type(exc).__name__
                continue
            if resp.status_code in RETRYABLE_STATUS:
                last_error = f"HTTP {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise TransportError(f"unexpected HTTP {resp.status_code}")
            return resp.json()
        raise TransportError(f"retries exhausted ({last_error})")

    def _fetch_tools(self) -> List[ToolSpec]:
        doc = self._request("GET", "/tools")
        return [
            ToolSpec(
                name=t["name"],
                description=t.get("description", ""),
                parameters=t.get("parameters", {"type": "object", "properties": {}}),
                mutating=bool(t.get("mutating", False)),
                side_channel=t.get("side_channel", "database"),
            )
            for t in doc.get("tools", [])
        ]

    def execute(self, call: ToolCall) -> ToolResult:
        try:
            doc = self._request("POST", "/call", {"name": call.name, "arguments": dict(call.arguments)})
        except TransportError as exc:
            return ToolResult(ok=False, error_text=f"transport error: {exc}")
        if doc.get("ok"):
            return ToolResult(ok=True, payload=doc.get("payload"))
        return ToolResult(ok=False, error_text=doc.get("error", "remote execution failed"))

    def __call__(self, db, call: ToolCall) -> ToolResult:
        return self.execute(call)


def remote_tool_executor(cfg: ClientConfig) -> RemoteToolExecutor:
    return RemoteToolExecutor(cfg)
