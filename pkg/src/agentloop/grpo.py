"""Group-relative policy optimization over a desk-scale categorical policy.

The policy is a logits table (contexts x actions, softmax per row), small
enough that the clipped surrogate, the exact categorical KL penalty, and
their analytic gradients can all be checked against finite differences.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from agentloop.db import Database
from agentloop.domain import DomainBundle, Task
from agentloop.metrics import (
    MetricsRecord,
    MetricsWriter,
    all_correct_ratio,
    all_wrong_ratio,
    tool_counts,
    unique_4gram_ratio,
)
from agentloop.rollout import (
    AgentStep,
    Group,
    RolloutConfig,
    RolloutView,
    TokenRecord,
    Trajectory,
    run_group,
)
from agentloop.tools import ToolCall

CHECKPOINT_FORMAT = 1


class TrainingDivergence(RuntimeError):
    """The objective became non-finite."""


@dataclass(frozen=True)
class GrpoConfig:
    clip_epsilon: float = 0.2
    kl_beta: float = 0.001
    std_floor: float = 1e-6
    learning_rate: float = 1.0
    epochs: int = 25
    batch_size: int = 32
    group_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be > 0")
        if self.kl_beta < 0:
            raise ValueError("kl_beta must be >= 0")
        if self.std_floor <= 0:
            raise ValueError("std_floor must be > 0")

    def to_json(self) -> dict:
        return {
            "clip_epsilon": self.clip_epsilon,
            "kl_beta": self.kl_beta,
            "std_floor": self.std_floor,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "group_size": self.group_size,
            "seed": self.seed,
        }

    @staticmethod
    def from_json(obj: Mapping[str, Any]) -> "GrpoConfig":
        return GrpoConfig(**{k: obj[k] for k in GrpoConfig().to_json() if k in obj})


class PolicyParams:
    """Softmax-per-row categorical policy over (context, action)."""

    def __init__(self, logits: np.ndarray):
        arr = np.asarray(logits, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("logits must be 2-D (contexts x actions)")
        if not np.all(np.isfinite(arr)):
            raise ValueError("logits must be finite")
        self.logits = arr.copy()

    @staticmethod
    def uniform(n_contexts: int, n_actions: int) -> "PolicyParams":
        return PolicyParams(np.zeros((n_contexts, n_actions)))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.logits.shape

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.logits)

    def log_probs(self) -> np.ndarray:
        z = self.logits - self.logits.max(axis=1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def probs(self, temperature: float = 1.0) -> np.ndarray:
        if temperature == 0.0:
            p = np.zeros_like(self.logits)
            p[np.arange(self.logits.shape[0]), self.logits.argmax(axis=1)] = 1.0
            return p
        z = self.logits / temperature
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


@dataclass
class SequenceSample:
    query_id: str
    tokens: List[TokenRecord]
    reward: int

    def masked(self) -> List[TokenRecord]:
        return [t for t in self.tokens if t.mask]


@dataclass(frozen=True)
class AdvantageSet:
    advantages: Tuple[float, ...]
    mean_r: float
    std_r: float
    degenerate: bool


def compute_advantages(rewards: Sequence[float], cfg: GrpoConfig) -> AdvantageSet:
    """Group-normalized rewards: (r - mean) / population std, zeros when flat."""
    if len(rewards) == 0:
        raise ValueError("empty reward group")
    arr = np.asarray(rewards, dtype=np.float64)
    mean = float(arr.mean())
    std = float(arr.std())  # population std (divide by G)
    if std < cfg.std_floor:
        return AdvantageSet(advantages=(0.0,) * len(rewards), mean_r=mean, std_r=std, degenerate=True)
    adv = (arr - mean) / std
    return AdvantageSet(advantages=tuple(float(a) for a in adv), mean_r=mean, std_r=std, degenerate=False)


def sequence_ratio(sample: SequenceSample, theta: PolicyParams) -> float:
    """exp(sum over masked tokens of log pi_theta(a|c) - logprob_old)."""
    masked = sample.masked()
    if not masked:
        raise ValueError("sample has no masked tokens")
    lp = theta.log_probs()
    s = 0.0
    for t in masked:
        _check_range(theta, t)
        s += lp[t.context_id, t.action_id] - t.logprob_old
    return math.exp(s)


def _check_range(theta: PolicyParams, t: TokenRecord) -> None:
    C, A = theta.shape
    if not (0 <= t.context_id < C and 0 <= t.action_id < A):
        raise ValueError(f"token (context {t.context_id}, action {t.action_id}) outside policy shape {theta.shape}")


def kl_term(theta: PolicyParams, ref: PolicyParams, contexts: Sequence[int]) -> float:
    """Exact categorical KL(pi_theta || pi_ref) averaged over the visited contexts."""
    if theta.shape != ref.shape:
        raise ValueError(f"shape mismatch: {theta.shape} vs {ref.shape}")
    if len(contexts) == 0:
        return 0.0
    lp = theta.log_probs()
    lq = ref.log_probs()
    p = np.exp(lp)
    total = 0.0
    for c in contexts:
        total += float(np.sum(p[c] * (lp[c] - lq[c])))
    return total / len(contexts)


def entropy(theta: PolicyParams, contexts: Optional[Sequence[int]] = None) -> float:
    """Mean categorical entropy (nats) over the given context rows."""
    lp = theta.log_probs()
    p = np.exp(lp)
    rows = -np.sum(p * lp, axis=1)
    if contexts is None:
        return float(rows.mean())
    if len(contexts) == 0:
        return 0.0
    return float(np.mean([rows[c] for c in contexts]))


def grpo_objective(
    groups: Sequence[Tuple[Sequence[SequenceSample], AdvantageSet]],
    theta: PolicyParams,
    ref: PolicyParams,
    cfg: GrpoConfig,
) -> Tuple[float, np.ndarray]:
    """Clipped surrogate with exact KL penalty; returns (objective, d objective / d logits).

    Per sample: min(ratio * A, clip(ratio, 1-eps, 1+eps) * A) - beta * KL,
    averaged over the group (1/G) and then over the batch of groups.
    """
    lp = theta.log_probs()
    p = np.exp(lp)
    lq = ref.log_probs() if cfg.kl_beta > 0 else None
    grad = np.zeros_like(theta.logits)
    objective = 0.0
    eps = cfg.clip_epsilon

    n_groups = len(groups)
    if n_groups == 0:
        return 0.0, grad

    for samples, adv_set in groups:
        if len(samples) != len(adv_set.advantages):
            raise ValueError("advantage set does not align with samples")
        w = 1.0 / (n_groups * len(samples))
        for sample, adv in zip(samples, adv_set.advantages):
            masked = sample.masked()
            if not masked:
                continue
            s = 0.0
            for t in masked:
                _check_range(theta, t)
                s += lp[t.context_id, t.action_id] - t.logprob_old
            ratio = math.exp(s)
            clipped = min(max(ratio, 1.0 - eps), 1.0 + eps)
            surr_unclipped = ratio * adv
            surr = min(surr_unclipped, clipped * adv)
            if not math.isfinite(surr):
                raise TrainingDivergence(f"non-finite surrogate for sample {sample.query_id!r}")
            objective += w * surr
            if surr_unclipped <= clipped * adv:  # unclipped branch active (ties included)
                coeff = w * adv * ratio
                for t in masked:
                    grad[t.context_id, t.action_id] += coeff
                    grad[t.context_id] -= coeff * p[t.context_id]
            if cfg.kl_beta > 0:
                contexts = sorted({t.context_id for t in masked})
                kls = []
                for c in contexts:
                    d = lp[c] - lq[c]
                    kls.append(float(np.sum(p[c] * d)))
                kl_i = sum(kls) / len(contexts)
                objective -= w * cfg.kl_beta * kl_i
                for c, klc in zip(contexts, kls):
                    d = lp[c] - lq[c]
                    grad[c] -= (w * cfg.kl_beta / len(contexts)) * p[c] * (d - klc)

    if not math.isfinite(objective):
        raise TrainingDivergence("non-finite objective")
    return objective, grad


# ---------------------------------------------------------------------------
# Desk-scale trainable agent


@dataclass(frozen=True)
class ActionSpec:
    """One row of the policy's action table: a tool call or a text emission."""

    kind: str  # "tool" | "text"
    name: str = ""
    arguments: Mapping[str, Any] = field(default_factory=dict)
    content: str = ""

    @staticmethod
    def from_json(obj: Mapping[str, Any]) -> "ActionSpec":
        if obj["kind"] == "tool":
            return ActionSpec(kind="tool", name=obj["name"], arguments=dict(obj.get("arguments", {})))
        return ActionSpec(kind="text", content=obj["content"])

    def to_json(self) -> dict:
        if self.kind == "tool":
            return {"kind": "tool", "name": self.name, "arguments": dict(self.arguments)}
        return {"kind": "text", "content": self.content}


ContextFn = Callable[[Database], int]


class TabularAgent:
    """Agent policy backed by the logits table; one action per step, one token per action."""

    def __init__(
        self,
        policy: PolicyParams,
        ref: PolicyParams,
        actions: Sequence[ActionSpec],
        context_fn: ContextFn,
        temperature: float = 1.0,
    ):
        if policy.shape[1] != len(actions):
            raise ValueError("policy action dimension does not match action table")
        self.policy = policy
        self.ref = ref
        self.actions = list(actions)
        self.context_fn = context_fn
        self.temperature = temperature

    def session(self, task: Task, seed: int) -> "TabularAgentSession":
        return TabularAgentSession(self, np.random.Generator(np.random.PCG64(seed)))


class TabularAgentSession:
    def __init__(self, agent: TabularAgent, rng: np.random.Generator):
        self.agent = agent
        self.rng = rng

    def step(self, view: RolloutView) -> AgentStep:
        agent = self.agent
        c = agent.context_fn(view.db)
        probs = agent.policy.probs(agent.temperature)[c]
        if agent.temperature == 0.0:
            a = int(np.argmax(probs))
        else:
            a = int(self.rng.choice(len(probs), p=probs))
        record = TokenRecord(
            context_id=c,
            action_id=a,
            logprob_old=float(agent.policy.log_probs()[c, a]),
            logprob_ref=float(agent.ref.log_probs()[c, a]),
        )
        spec = agent.actions[a]
        if spec.kind == "tool":
            return AgentStep(calls=[ToolCall(spec.name, dict(spec.arguments))], records=[record])
        return AgentStep(text=spec.content, records=[record])


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    policy: PolicyParams
    metrics: List[MetricsRecord]


def samples_from_group(group: Group) -> List[SequenceSample]:
    return [
        SequenceSample(query_id=f"{group.task_id}/{i}", tokens=list(t.token_records), reward=int(r))
        for i, (t, r) in enumerate(zip(group.trajectories, group.rewards))
    ]


def train(
    bundle: DomainBundle,
    actions: Sequence[ActionSpec],
    context_fn: ContextFn,
    n_contexts: int,
    cfg: GrpoConfig,
    rollout_cfg: RolloutConfig,
    steps: Optional[int] = None,
    metrics_writer: Optional[MetricsWriter] = None,
    checkpoint_path: Optional[str | Path] = None,
    tool_names: Optional[Sequence[str]] = None,
    resume_from: Optional[str | Path] = None,
) -> TrainResult:
    """Run the full loop: freeze pi_old, roll out groups, score, normalize, ascend.

    Deterministic for a fixed (cfg.seed, configuration); one gradient step per
    batch, so the current policy equals pi_old at each objective evaluation.
    """
    tasks = list(bundle.tasks)
    if not tasks:
        raise ValueError("bundle has no tasks")
    if steps is None:
        steps = cfg.epochs * max(1, math.ceil(len(tasks) / cfg.batch_size))

    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    policy = PolicyParams.uniform(n_contexts, len(actions))
    ref = policy.copy()
    start_step = 0
    if resume_from is not None:
        policy, _, start_step, state = load_checkpoint(resume_from)
        ref = PolicyParams.uniform(n_contexts, len(actions))
        rng.bit_generator.state = state

    if tool_names is None:
        tool_names = [s.name for s in bundle.registry if s.side_channel != "database"]

    records: List[MetricsRecord] = []
    for step_idx in range(start_step, steps):
        old = policy.copy()
        agent = TabularAgent(old, ref, actions, context_fn, temperature=rollout_cfg.agent_temperature)

        lo = (step_idx * cfg.batch_size) % len(tasks)
        batch = [tasks[(lo + j) % len(tasks)] for j in range(min(cfg.batch_size, len(tasks)))]

        groups: List[Group] = []
        obj_groups: List[Tuple[List[SequenceSample], AdvantageSet]] = []
        for task in batch:
            group_seed = int(rng.integers(0, 2**63 - 1))
            group = run_group(
                task,
                agent,
                None if rollout_cfg.user_mode == "none" else _scripted_confirmer(task),
                replace(rollout_cfg, group_size=cfg.group_size, seed=group_seed),
                registry=bundle.registry,
            )
            samples = samples_from_group(group)
            adv = compute_advantages(group.rewards, cfg)
            groups.append(group)
            obj_groups.append((samples, adv))

        objective, grad = grpo_objective(obj_groups, policy, ref, cfg)
        policy.logits += cfg.learning_rate * grad

        record = _step_metrics(step_idx, policy, ref, grad, groups, tool_names)
        records.append(record)
        if metrics_writer is not None:
            metrics_writer.append(record)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, policy, cfg, step_idx + 1, rng.bit_generator.state)

    return TrainResult(policy=policy, metrics=records)


def _scripted_confirmer(task: Task):
    # Minimal scripted stand-in when a user role is requested during training.
    from agentloop.clients import ScriptedUser

    return ScriptedUser([task.user_scenario, "yes"])


def _step_metrics(
    step_idx: int,
    policy: PolicyParams,
    ref: PolicyParams,
    grad: np.ndarray,
    groups: Sequence[Group],
    tool_names: Sequence[str],
) -> MetricsRecord:
    trajs = [t for g in groups for t in g.trajectories]
    visited = sorted({r.context_id for t in trajs for r in t.token_records if r.mask})
    reward_matrix = [list(g.rewards) for g in groups]
    ratios = []
    for t in trajs:
        ids = [r.action_id for r in t.token_records if r.mask]
        ratios.append(unique_4gram_ratio(ids))
    return MetricsRecord(
        step=step_idx,
        mean_entropy=entropy(policy, visited),
        kl_value=kl_term(policy, ref, visited),
        grad_norm=float(np.linalg.norm(grad)),
        mean_turns=float(np.mean([t.agent_steps() for t in trajs])) if trajs else 0.0,
        mean_response_tokens=float(np.mean([sum(1 for r in t.token_records if r.mask) for t in trajs]))
        if trajs
        else 0.0,
        unique_4gram_ratio=float(np.mean(ratios)) if ratios else 1.0,
        all_correct_ratio=all_correct_ratio(reward_matrix),
        all_wrong_ratio=all_wrong_ratio(reward_matrix),
        tool_counts=tool_counts(trajs, tool_names),
    )


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(
    path: str | Path,
    policy: PolicyParams,
    cfg: GrpoConfig,
    step: int,
    rng_state: Mapping[str, Any],
) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "logits": policy.logits.tolist(),
        "cfg": cfg.to_json(),
        "seed": cfg.seed,
        "step": step,
        "rng_state": rng_state,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_checkpoint(path: str | Path) -> Tuple[PolicyParams, GrpoConfig, int, Dict[str, Any]]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    return (
        PolicyParams(np.asarray(doc["logits"])),
        GrpoConfig.from_json(doc["cfg"]),
        int(doc["step"]),
        doc["rng_state"],
    )
