"""Domain bundles: tool registry + seed database + tasks with gold criteria."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from agentloop.db import Database
from agentloop.tools import ToolCall, ToolHandler, ToolRegistry, ToolSpec

CRITERION_KINDS = ("db_path_equals", "db_record_absent", "db_record_present", "action_performed")


class DomainLoadError(ValueError):
    """Malformed domain bundle document."""


@dataclass(frozen=True)
class VerificationCriterion:
    kind: str
    target: str
    expected: Any = None

    def __post_init__(self):
        if self.kind not in CRITERION_KINDS:
            raise DomainLoadError(f"unknown criterion kind {self.kind!r}")


@dataclass(frozen=True)
class Task:
    id: str
    domain_id: str
    system_policy: str
    user_scenario: str
    initial_db: Mapping[str, Any]
    criteria: Tuple[VerificationCriterion, ...]
    required_write_actions: Tuple[Tuple[str, Mapping[str, Any]], ...] = ()

    def fresh_db(self) -> Database:
        return Database(self.initial_db)


@dataclass(frozen=True)
class RewardResult:
    reward: int
    tcr: Fraction
    satisfied: Tuple[bool, ...]
    actions_satisfied: Tuple[bool, ...] = ()


@dataclass(frozen=True)
class DomainBundle:
    domain_id: str
    registry: ToolRegistry
    database: Mapping[str, Any]
    tasks: Tuple[Task, ...]

    def fresh_db(self) -> Database:
        return Database(self.database)

    def task(self, task_id: str) -> Task:
        for t in self.tasks:
            if t.id == task_id:
                return t
        raise KeyError(task_id)


def builtin_handlers(domain_id: str) -> Dict[str, ToolHandler]:
    if domain_id == "retail":
        from agentloop.retail import HANDLERS

        return dict(HANDLERS)
    if domain_id == "lockbox":
        from agentloop.toy import HANDLERS

        return dict(HANDLERS)
    return {}


def load_domain(
    source: str | Path | Mapping[str, Any],
    handlers: Optional[Mapping[str, ToolHandler]] = None,
) -> DomainBundle:
    """Parse a domain bundle document into an immutable environment bundle."""
    if isinstance(source, (str, Path)):
        try:
            doc = json.loads(Path(source).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DomainLoadError(f"domain bundle does not parse: {exc}") from exc
    else:
        doc = dict(source)

    domain_id = doc.get("domain_id", "domain")
    handler_map = dict(builtin_handlers(domain_id))
    if handlers:
        handler_map.update(handlers)

    registry = ToolRegistry()
    for raw in doc.get("tools", []):
        spec = ToolSpec(
            name=raw["name"],
            description=raw.get("description", ""),
            parameters=raw.get("parameters", {"type": "object", "properties": {}}),
            mutating=bool(raw.get("mutating", False)),
            side_channel=raw.get("side_channel", "database"),
            behavior=raw.get("behavior"),
        )
        try:
            registry.add(spec, handler_map.get(spec.name))
        except ValueError as exc:
            raise DomainLoadError(str(exc)) from exc

    database = doc.get("database", {})
    tasks: List[Task] = []
    for raw in doc.get("tasks", []):
        criteria = tuple(
            VerificationCriterion(kind=c["kind"], target=c["target"], expected=c.get("expected"))
            for c in raw.get("criteria", [])
        )
        if not criteria:
            raise DomainLoadError(f"task {raw.get('id')!r} has no criteria")
        required = tuple(
            (str(name), dict(args)) for name, args in raw.get("required_write_actions", [])
        )
        task = Task(
            id=raw["id"],
            domain_id=raw.get("domain_id", domain_id),
            system_policy=raw.get("system_policy", ""),
            user_scenario=raw.get("user_scenario", ""),
            initial_db=raw.get("initial_db", database),
            criteria=criteria,
            required_write_actions=required,
        )
        _check_criteria_resolvable(task)
        tasks.append(task)

    return DomainBundle(domain_id=domain_id, registry=registry, database=database, tasks=tuple(tasks))


def _check_criteria_resolvable(task: Task) -> None:
    db = task.fresh_db()
    for crit in task.criteria:
        if crit.kind == "action_performed":
            continue
        table = crit.target.split(".", 1)[0]
        if not db.has_table(table):
            raise DomainLoadError(
                f"task {task.id!r}: criterion targets unknown table {table!r}"
            )
        if crit.kind == "db_path_equals":
            try:
                db.resolve_path(crit.target)
            except (KeyError, IndexError, ValueError) as exc:
                raise DomainLoadError(
                    f"task {task.id!r}: dangling criterion path {crit.target!r}"
                ) from exc


# ---------------------------------------------------------------------------
# Outcome scoring


def _subset_match(expected: Mapping[str, Any], actual: Mapping[str, Any]) -> bool:
    """Compare only the keys named in `expected`; extra actual keys are ignored."""
    for key in sorted(expected):
        if key not in actual:
            return False
        exp, act = expected[key], actual[key]
        if isinstance(exp, Mapping) and isinstance(act, Mapping):
            if not _subset_match(exp, act):
                return False
        elif exp != act:
            return False
    return True


def _contains_match(container: Any, expected: Any) -> bool:
    if isinstance(container, list):
        return any(_contains_match(el, expected) for el in container)
    if isinstance(expected, Mapping) and isinstance(container, Mapping):
        return _subset_match(expected, container)
    return container == expected


def _action_performed(tool_log: Sequence[Tuple[ToolCall, bool]], name: str, args: Mapping[str, Any]) -> bool:
    for call, ok in tool_log:
        if ok and call.name == name and _subset_match(args or {}, dict(call.arguments)):
            return True
    return False


def evaluate_criterion(
    crit: VerificationCriterion,
    final_db: Database,
    tool_log: Sequence[Tuple[ToolCall, bool]],
) -> bool:
    if crit.kind == "action_performed":
        return _action_performed(tool_log, crit.target, crit.expected or {})
    if crit.kind == "db_path_equals":
        try:
            return final_db.resolve_path(crit.target) == crit.expected
        except (KeyError, IndexError, ValueError):
            return False
    try:
        value = final_db.resolve_path(crit.target)
    except (KeyError, IndexError, ValueError):
        return crit.kind == "db_record_absent"
    present = _contains_match(value, crit.expected) if crit.expected is not None else True
    return present if crit.kind == "db_record_present" else not present


def score(task: Task, final_db: Database, traj: "Trajectory" = None) -> RewardResult:
    """Outcome-only scoring: criteria against the final database plus the
    trajectory's successful tool-call log. Dialogue text is never inspected."""
    tool_log: List[Tuple[ToolCall, bool]] = []
    if traj is not None:
        tool_log = traj.tool_log()

    satisfied = tuple(evaluate_criterion(c, final_db, tool_log) for c in task.criteria)
    actions = tuple(
        _action_performed(tool_log, name, args) for name, args in task.required_write_actions
    )
    reward = int(all(satisfied) and all(actions))
    tcr = Fraction(sum(satisfied), len(task.criteria))
    return RewardResult(reward=reward, tcr=tcr, satisfied=satisfied, actions_satisfied=actions)
