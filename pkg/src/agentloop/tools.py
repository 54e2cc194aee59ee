"""Function-calling tool layer: specs, registry, validated atomic execution."""

from __future__ import annotations

import ast
import copy
import operator
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Mapping, Optional

import jsonschema

SIDE_CHANNELS = ("database", "calculate", "think", "transfer")

# Handler signature: (db, arguments) -> payload. Raise DomainRuleError for
# rule violations; execute_tool turns those into ok=False results.
ToolHandler = Callable[["Database", Mapping[str, Any]], Any]

from agentloop.db import Database  # noqa: E402  (circular-safe: db has no tool deps)


class DomainRuleError(Exception):
    """A domain-rule violation surfaced to the agent as an error result."""


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str = ""
    parameters: Mapping[str, Any] = field(default_factory=lambda: {"type": "object", "properties": {}})
    mutating: bool = False
    side_channel: str = "database"
    behavior: Optional[Mapping[str, Any]] = None

    def __post_init__(self):
        if self.side_channel not in SIDE_CHANNELS:
            raise ValueError(f"unknown side channel {self.side_channel!r}")

    def to_function_declaration(self) -> Dict[str, Any]:
        return {
            "type": "function",
            "function": {
                "name": self.name,
                "description": self.description,
                "parameters": dict(self.parameters),
            },
        }


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: Mapping[str, Any] = field(default_factory=dict)

    def to_json(self) -> Dict[str, Any]:
        return {"name": self.name, "arguments": dict(self.arguments)}

    @staticmethod
    def from_json(obj: Mapping[str, Any]) -> "ToolCall":
        return ToolCall(name=obj["name"], arguments=dict(obj.get("arguments", {})))


@dataclass(frozen=True)
class ToolResult:
    ok: bool
    payload: Any = None
    error_text: Optional[str] = None

    def __post_init__(self):
        if self.ok and self.error_text is not None:
            raise ValueError("ok result cannot carry error_text")
        if not self.ok and self.error_text is None:
            raise ValueError("failed result requires error_text")

    def render(self) -> str:
        """Conversation-facing text; errors are prefixed so agents can recover."""
        if self.ok:
            from agentloop.db import canonical_json

            return self.payload if isinstance(self.payload, str) else canonical_json(self.payload)
        text = self.error_text or ""
        return text if text.startswith("Error:") else f"Error: {text}"

    def to_json(self) -> Dict[str, Any]:
        if self.ok:
            return {"ok": True, "payload": self.payload}
        return {"ok": False, "error_text": self.error_text}

    @staticmethod
    def from_json(obj: Mapping[str, Any]) -> "ToolResult":
        if obj.get("ok"):
            return ToolResult(ok=True, payload=obj.get("payload"))
        return ToolResult(ok=False, error_text=obj.get("error_text", "unknown error"))


class ToolRegistry:
    """Immutable-after-build set of tool specs plus their local handlers."""

    def __init__(self):
        self._specs: Dict[str, ToolSpec] = {}
        self._handlers: Dict[str, ToolHandler] = {}

    def add(self, spec: ToolSpec, handler: Optional[ToolHandler] = None) -> None:
        if spec.name in self._specs:
            raise ValueError(f"duplicate tool name {spec.name!r}")
        self._specs[spec.name] = spec
        if handler is None:
            handler = default_handler_for(spec)
        if handler is not None:
            self._handlers[spec.name] = handler

    def __contains__(self, name: str) -> bool:
        return name in self._specs

    def __iter__(self):
        return iter(self._specs.values())

    def names(self) -> list[str]:
        return sorted(self._specs)

    def get(self, name: str) -> ToolSpec:
        return self._specs[name]

    def handler(self, name: str) -> Optional[ToolHandler]:
        return self._handlers.get(name)

    def validate_arguments(self, call: ToolCall) -> Optional[str]:
        """Return an error message when arguments violate the schema, else None."""
        spec = self._specs[call.name]
        try:
            jsonschema.validate(instance=dict(call.arguments), schema=dict(spec.parameters))
        except jsonschema.ValidationError as exc:
            return exc.message
        return None

    def function_declarations(self) -> list[Dict[str, Any]]:
        return [self._specs[n].to_function_declaration() for n in sorted(self._specs)]


def execute_tool(db: Database, call: ToolCall, registry: ToolRegistry) -> ToolResult:
    """Run one tool call atomically; failures never leave a partial mutation."""
    if call.name not in registry:
        return ToolResult(ok=False, error_text=f"Error: unknown tool {call.name}")
    spec = registry.get(call.name)
    schema_error = registry.validate_arguments(call)
    if schema_error is not None:
        return ToolResult(ok=False, error_text=f"Invalid arguments: {schema_error}")
    handler = registry.handler(call.name)
    if handler is None:
        return ToolResult(ok=False, error_text=f"Error: no local executor for tool {call.name}")

    before = copy.deepcopy(db._tables)
    try:
        payload = handler(db, dict(call.arguments))
    except DomainRuleError as exc:
        db._tables = before
        return ToolResult(ok=False, error_text=str(exc))
    if spec.side_channel != "database" or not spec.mutating:
        if db._tables != before:
            db._tables = before
            raise RuntimeError(f"non-mutating tool {call.name!r} modified the database")
    elif spec.mutating:
        db._version += 1
    return ToolResult(ok=True, payload=payload)


# ---------------------------------------------------------------------------
# Built-in side-channel tools and the declarative behavior mini-language used
# by data-driven domains (get/set/list against a named table).


def _calculate(db: Database, args: Mapping[str, Any]) -> Any:
    return safe_eval_arithmetic(str(args.get("expression", "")))


def _think(db: Database, args: Mapping[str, Any]) -> Any:
    return ""


def _transfer(db: Database, args: Mapping[str, Any]) -> Any:
    return "Transfer successful"


_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Mod: operator.mod,
    ast.Pow: operator.pow,
}


def safe_eval_arithmetic(expression: str) -> float:
    """Evaluate +-*/%** over numbers only; anything else is a rule violation."""

    def ev(node: ast.AST) -> float:
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return node.value
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            val = ev(node.operand)
            return -val if isinstance(node.op, ast.USub) else val
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        raise DomainRuleError("Unsupported expression")

    try:
        tree = ast.parse(expression, mode="eval")
        result = ev(tree)
    except DomainRuleError:
        raise
    except Exception:
        raise DomainRuleError("Unsupported expression") from None
    return round(float(result), 12)


def _behavior_handler(behavior: Mapping[str, Any]) -> ToolHandler:
    kind = behavior["kind"]
    table = behavior.get("table")

    def get_record(db: Database, args: Mapping[str, Any]) -> Any:
        rid = str(args[behavior["key"]])
        if not db.has_record(table, rid):
            raise DomainRuleError(f"{table} record not found")
        return db.get_record(table, rid)

    def set_fields(db: Database, args: Mapping[str, Any]) -> Any:
        rid = str(args[behavior["key"]])
        if not db.has_record(table, rid):
            raise DomainRuleError(f"{table} record not found")
        rec = db._tables[table][rid]
        for fld, arg_name in behavior["fields"].items():
            if arg_name in args:
                rec[fld] = args[arg_name]
        return db.get_record(table, rid)

    def list_records(db: Database, args: Mapping[str, Any]) -> Any:
        if not db.has_table(table):
            raise DomainRuleError(f"{table} table not found")
        return {rid: rec for rid, rec in db.records(table)}

    dispatch = {"get": get_record, "set": set_fields, "list": list_records}
    if kind not in dispatch:
        raise ValueError(f"unknown behavior kind {kind!r}")
    return dispatch[kind]


def default_handler_for(spec: ToolSpec) -> Optional[ToolHandler]:
    if spec.side_channel == "calculate":
        return _calculate
    if spec.side_channel == "think":
        return _think
    if spec.side_channel == "transfer":
        return _transfer
    if spec.behavior is not None:
        return _behavior_handler(spec.behavior)
    return None
