"""Multi-turn tool-calling agent environments, rollouts, and a group-relative optimizer."""

from agentloop.db import Database, SnapshotToken, StaleSnapshotError, snapshot, restore
from agentloop.tools import (
    DomainRuleError,
    ToolCall,
    ToolRegistry,
    ToolResult,
    ToolSpec,
    execute_tool,
)
from agentloop.domain import (
    DomainBundle,
    DomainLoadError,
    RewardResult,
    Task,
    VerificationCriterion,
    load_domain,
    score,
)

__all__ = [
    "Database",
    "SnapshotToken",
    "StaleSnapshotError",
    "snapshot",
    "restore",
    "DomainRuleError",
    "ToolCall",
    "ToolRegistry",
    "ToolResult",
    "ToolSpec",
    "execute_tool",
    "DomainBundle",
    "DomainLoadError",
    "RewardResult",
    "Task",
    "VerificationCriterion",
    "load_domain",
    "score",
]

__version__ = "0.1.0"
