"""Training-dynamics metrics and their JSONL stream."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence

from agentloop.rollout import Trajectory


def unique_4gram_ratio(tokens: Sequence[int]) -> float:
    """Distinct sliding 4-grams over total windows; short sequences count as 1.0."""
    n = len(tokens)
    if n < 4:
        return 1.0
    windows = n - 3
    distinct = len({tuple(tokens[i : i + 4]) for i in range(windows)})
    return distinct / windows


def all_correct_ratio(rewards: Sequence[Sequence[int]]) -> float:
    _check_matrix(rewards)
    return sum(1 for row in rewards if all(r == 1 for r in row)) / len(rewards)


def all_wrong_ratio(rewards: Sequence[Sequence[int]]) -> float:
    _check_matrix(rewards)
    return sum(1 for row in rewards if all(r == 0 for r in row)) / len(rewards)


def _check_matrix(rewards: Sequence[Sequence[int]]) -> None:
    if len(rewards) == 0:
        raise ValueError("empty reward matrix")
    width = len(rewards[0])
    for row in rewards:
        if len(row) != width:
            raise ValueError("reward matrix must be rectangular")
        for r in row:
            if r not in (0, 1):
                raise ValueError("rewards must be 0 or 1")


def tool_counts(trajectories: Sequence[Trajectory], names: Sequence[str]) -> Dict[str, float]:
    """Mean invocations per trajectory for each named tool.

    An empty trajectory list yields an explicitly empty map rather than
    fake zeros, so aggregation code can tell "no data" from "never called".
    """
    if not trajectories:
        return {}
    out: Dict[str, float] = {}
    for name in names:
        total = sum(
            sum(1 for m in t.messages if m.role == "tool_call" and m.content.name == name)
            for t in trajectories
        )
        out[name] = total / len(trajectories)
    return out


@dataclass
class MetricsRecord:
    step: int
    mean_entropy: float
    kl_value: float
    grad_norm: float
    mean_turns: float
    mean_response_tokens: float
    unique_4gram_ratio: float
    all_correct_ratio: float
    all_wrong_ratio: float
    tool_counts: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("unique_4gram_ratio", "all_correct_ratio", "all_wrong_ratio"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} out of [0,1]: {v}")
        if self.all_correct_ratio + self.all_wrong_ratio > 1.0 + 1e-12:
            raise ValueError("all_correct + all_wrong ratios exceed 1")

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "mean_entropy": self.mean_entropy,
            "kl_value": self.kl_value,
            "grad_norm": self.grad_norm,
            "mean_turns": self.mean_turns,
            "mean_response_tokens": self.mean_response_tokens,
            "unique_4gram_ratio": self.unique_4gram_ratio,
            "all_correct_ratio": self.all_correct_ratio,
            "all_wrong_ratio": self.all_wrong_ratio,
            "tool_counts": dict(sorted(self.tool_counts.items())),
        }

    @staticmethod
    def from_json(obj: Mapping) -> "MetricsRecord":
        return MetricsRecord(
            step=int(obj["step"]),
            mean_entropy=float(obj["mean_entropy"]),
            kl_value=float(obj["kl_value"]),
            grad_norm=float(obj["grad_norm"]),
            mean_turns=float(obj["mean_turns"]),
            mean_response_tokens=float(obj["mean_response_tokens"]),
            unique_4gram_ratio=float(obj["unique_4gram_ratio"]),
            all_correct_ratio=float(obj["all_correct_ratio"]),
            all_wrong_ratio=float(obj["all_wrong_ratio"]),
            tool_counts=dict(obj.get("tool_counts", {})),
        )


class MetricsWriter:
    """Append-only JSONL sink; step numbers must strictly increase."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._last_step = -1
        if self.path.exists():
            records = read_metrics(self.path)
            if records:
                self._last_step = records[-1].step

    def append(self, record: MetricsRecord) -> None:
        if record.step <= self._last_step:
            raise ValueError(f"step {record.step} not greater than last step {self._last_step}")
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
        self._last_step = record.step


def read_metrics(path: str | Path) -> List[MetricsRecord]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(MetricsRecord.from_json(json.loads(line)))
    return out
