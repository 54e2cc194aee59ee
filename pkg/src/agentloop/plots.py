"""Render metrics JSONL streams to figure files (Agg backend, no display)."""

from __future__ import annotations

from pathlib import Path
from typing import List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from agentloop.metrics import MetricsRecord


def plot_training_curves(records: Sequence[MetricsRecord], out_dir: str | Path, prefix: str = "train") -> List[Path]:
    """One PNG per quantity family; returns the written paths."""
    if not records:
        return []
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    steps = [r.step for r in records]
    written: List[Path] = []

    panels = [
        ("optimizer", [("mean_entropy", "entropy (nats)"), ("kl_value", "KL"), ("grad_norm", "grad norm")]),
        ("rollouts", [("mean_turns", "mean turns"), ("mean_response_tokens", "response tokens")]),
        (
            "ratios",
            [
                ("unique_4gram_ratio", "unique 4-gram"),
                ("all_correct_ratio", "all correct"),
                ("all_wrong_ratio", "all wrong"),
            ],
        ),
    ]
    for name, series in panels:
        fig, ax = plt.subplots(figsize=(6, 4))
        for attr, label in series:
            ax.plot(steps, [getattr(r, attr) for r in records], label=label)
        ax.set_xlabel("step")
        ax.set_title(name)
        ax.legend()
        fig.tight_layout()
        path = out / f"{prefix}_{name}.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)

    tool_names = sorted({n for r in records for n in r.tool_counts})
    if tool_names:
        fig, ax = plt.subplots(figsize=(6, 4))
        for n in tool_names:
            ax.plot(steps, [r.tool_counts.get(n, 0.0) for r in records], label=n)
        ax.set_xlabel("step")
        ax.set_ylabel("mean invocations per rollout")
        ax.set_title("tool usage")
        ax.legend()
        fig.tight_layout()
        path = out / f"{prefix}_tools.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(path)
    return written


def plot_reward_histogram(rewards: Sequence[float], tcrs: Sequence[float], out_path: str | Path) -> Path:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.5))
    ax1.hist(rewards, bins=[-0.25, 0.25, 0.75, 1.25], rwidth=0.8)
    ax1.set_title("reward")
    ax2.hist(tcrs, bins=10, range=(0.0, 1.0), rwidth=0.9)
    ax2.set_title("TCR")
    fig.tight_layout()
    path = Path(out_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path
