"""Operator surface: rollout / train / synth / eval / metrics / replay.

Exit codes: 0 success, 1 run failure, 2 usage error. Every run that produces
artifacts also writes a manifest recording the fully-resolved configuration
(with the source of each value) and the hashes of the fixtures it read.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from agentloop import fixtures
from agentloop.db import Database
from agentloop.domain import DomainBundle, Task, load_domain, score
from agentloop.grpo import (
    GrpoConfig,
    PolicyParams,
    TabularAgent,
    load_checkpoint,
    train,
)
from agentloop.metrics import MetricsWriter, read_metrics
from agentloop.rollout import (
    EnvInstance,
    RolloutConfig,
    Trajectory,
    read_trajectories,
    run_group,
    run_rollout,
    write_trajectories,
)
from agentloop.synth import (
    ReplayToolClient,
    StaticJudge,
    SyntheticMemory,
    dual_verify,
    export_sft,
    generate_memory,
    synthesize_trajectory,
)
from agentloop.clients import ScriptedAgent, ScriptedUser


class RunFailure(RuntimeError):
    """Operator-facing failure: message printed, exit code 1."""


# ---------------------------------------------------------------------------
# Config resolution with provenance


ROLLOUT_KEYS = ("max_turns", "max_tokens", "group_size", "agent_temperature", "user_mode", "tool_execution", "seed")
GRPO_KEYS = (
    "clip_epsilon",
    "kl_beta",
    "std_floor",
    "learning_rate",
    "epochs",
    "batch_size",
    "group_size",
    "seed",
)

FLAG_TO_KEY = {
    "seed": "seed",
    "group_size": "group_size",
    "max_turns": "max_turns",
    "beta": "kl_beta",
    "epsilon": "clip_epsilon",
}


def resolve_config(args: argparse.Namespace, base_rollout: RolloutConfig) -> Dict[str, Any]:
    """Merge defaults <- config file <- flags; track where each value came from."""
    resolved: Dict[str, Dict[str, Any]] = {"rollout": {}, "grpo": {}}
    provenance: Dict[str, str] = {}

    defaults = {"rollout": {k: getattr(base_rollout, k) for k in ROLLOUT_KEYS},
                "grpo": {k: getattr(GrpoConfig(), k) for k in GRPO_KEYS}}
    for section, values in defaults.items():
        for k, v in values.items():
            resolved[section][k] = v
            provenance[f"{section}.{k}"] = "default"

    config_path = getattr(args, "config", None)
    if config_path:
        try:
            doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise RunFailure(f"cannot read config {config_path}: {exc}")
        for section in ("rollout", "grpo"):
            for k, v in (doc.get(section) or {}).items():
                if k not in resolved[section]:
                    raise RunFailure(f"unknown config key {section}.{k}")
                resolved[section][k] = v
                provenance[f"{section}.{k}"] = f"config:{config_path}"

    for flag, key in FLAG_TO_KEY.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        for section in ("rollout", "grpo"):
            if key in resolved[section]:
                resolved[section][key] = value
                provenance[f"{section}.{key}"] = f"flag:--{flag.replace('_', '-')}"

    return {"values": resolved, "provenance": provenance}


def build_rollout_cfg(resolved: Dict[str, Any]) -> RolloutConfig:
    return RolloutConfig(**resolved["values"]["rollout"])


def build_grpo_cfg(resolved: Dict[str, Any]) -> GrpoConfig:
    return GrpoConfig(**resolved["values"]["grpo"])


def file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, resolved: Dict[str, Any], fixture_paths: List[Path], extra: Optional[Dict[str, Any]] = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "config": resolved["values"],
        "provenance": resolved["provenance"],
        "fixtures": {str(p): file_hash(p) for p in fixture_paths if p.exists()},
    }
    if extra:
        doc.update(extra)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Domain / agent resolution


def resolve_domain(name: str) -> tuple[DomainBundle, Path]:
    if name == "retail":
        path = fixtures.data_path("retail_domain.json")
    elif name == "toy":
        path = fixtures.data_path("toy_domain.json")
    else:
        path = Path(name)
    if not path.exists():
        raise RunFailure(f"domain fixture not found: {path}")
    try:
        return load_domain(path), path
    except Exception as exc:
        raise RunFailure(f"cannot load domain {path}: {exc}")


def toy_agent(checkpoint: Optional[str], temperature: float) -> TabularAgent:
    _, actions, _, n_contexts = fixtures.load_toy()
    from agentloop.toy import context_of

    if checkpoint:
        policy, _, _, _ = load_checkpoint(checkpoint)
    else:
        policy = PolicyParams.uniform(n_contexts, len(actions))
    return TabularAgent(policy, PolicyParams.uniform(n_contexts, len(actions)), actions, context_of, temperature)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_rollout(args: argparse.Namespace) -> int:
    bundle, domain_path = resolve_domain(args.domain)
    if args.domain == "toy" or bundle.domain_id == "lockbox":
        _, _, base_cfg, _ = fixtures.load_toy()
    else:
        base_cfg = RolloutConfig()
    resolved = resolve_config(args, base_cfg)
    cfg = build_rollout_cfg(resolved)

    tasks = [bundle.task(args.task)] if args.task else list(bundle.tasks)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    trajectories: List[Trajectory] = []
    if args.script:
        script = json.loads(Path(args.script).read_text(encoding="utf-8"))
        agent = ScriptedAgent(fixtures.replay_agent_steps(script))
        user = ScriptedUser(script["user_script"])
        for task in tasks:
            env = EnvInstance.local(task, bundle.registry)
            traj = run_rollout(task, agent.__class__(fixtures.replay_agent_steps(script)), user, env, replace(cfg, user_mode="scripted"), seed=cfg.seed)
            result = score(task, traj.final_db, traj)
            traj.reward, traj.tcr = result.reward, float(result.tcr)
            trajectories.append(traj)
    elif bundle.domain_id == "lockbox":
        agent = toy_agent(args.checkpoint, cfg.agent_temperature)
        for task in tasks:
            group = run_group(task, agent, None, cfg, registry=bundle.registry)
            trajectories.extend(group.trajectories)
    else:
        raise RunFailure("non-toy domains need --script (no live client wiring in the CLI)")

    traj_path = out_dir / "trajectories.jsonl"
    write_trajectories(traj_path, trajectories)
    write_manifest(out_dir, resolved, [domain_path], {"trajectories": str(traj_path), "count": len(trajectories)})
    print(f"wrote {len(trajectories)} trajectories to {traj_path}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    bundle, actions, base_cfg, n_contexts = fixtures.load_toy()
    resolved = resolve_config(args, base_cfg)
    rollout_cfg = build_rollout_cfg(resolved)
    grpo_cfg = build_grpo_cfg(resolved)
    from agentloop.toy import context_of

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    if metrics_path.exists():
        metrics_path.unlink()
    checkpoint_path = out_dir / "checkpoint.json"

    result = train(
        bundle,
        actions,
        context_of,
        n_contexts,
        grpo_cfg,
        rollout_cfg,
        steps=args.steps,
        metrics_writer=MetricsWriter(metrics_path),
        checkpoint_path=checkpoint_path,
    )
    from agentloop.plots import plot_training_curves

    figures = plot_training_curves(result.metrics, out_dir)
    write_manifest(
        out_dir,
        resolved,
        [fixtures.data_path("toy_domain.json")],
        {"metrics": str(metrics_path), "checkpoint": str(checkpoint_path), "figures": [str(p) for p in figures], "steps": len(result.metrics)},
    )
    print(f"trained {len(result.metrics)} steps; metrics at {metrics_path}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    replay = fixtures.load_replay(args.replay) if not Path(args.replay).exists() else json.loads(Path(args.replay).read_text(encoding="utf-8"))
    scenario = fixtures.replay_scenario(replay)
    agent = ScriptedAgent(fixtures.replay_agent_steps(replay))
    user = ScriptedUser(replay["user_script"])
    memory = generate_memory(scenario, seed=args.seed or 0)
    cfg = RolloutConfig(user_mode="scripted", tool_execution="llm_simulated", seed=args.seed or 0)
    synth = synthesize_trajectory(
        scenario,
        agent,
        user,
        memory,
        cfg,
        tool_backend="llm",
        tool_client=ReplayToolClient(fixtures.replay_tool_results(replay)),
        query=replay["user_script"][0],
        seed=args.seed or 0,
    )
    synth = dual_verify(synth, StaticJudge(True, "scripted replay accepted"))
    if synth.verdict != "accepted":
        raise RunFailure(f"trajectory not accepted: {synth.judge_rationale}")
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    n = export_sft([synth], out_path)
    print(f"exported {n} accepted trajectories to {out_path}")
    return 0


def _reexecute(traj: Trajectory, bundle: DomainBundle, task: Task) -> Database:
    """Replay the recorded tool calls of a trajectory against a fresh env."""
    env = EnvInstance.local(task, bundle.registry)
    for msg in traj.messages:
        if msg.role == "tool_call":
            env.executor(env.db, msg.content)
    return env.db


def cmd_eval(args: argparse.Namespace) -> int:
    bundle, domain_path = resolve_domain(args.domain)
    trajectories = read_trajectories(args.trajectories)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    rewards: List[float] = []
    tcrs: List[float] = []
    for i, traj in enumerate(trajectories):
        try:
            task = bundle.task(traj.task_id)
        except KeyError:
            raise RunFailure(f"trajectory {i} references unknown task {traj.task_id!r}")
        final_db = _reexecute(traj, bundle, task)
        result = score(task, final_db, traj)
        rows.append((i, traj.task_id, traj.termination, result.reward, float(result.tcr)))
        rewards.append(result.reward)
        tcrs.append(float(result.tcr))

    report = out_dir / "eval.csv"
    with open(report, "w", encoding="utf-8") as fh:
        fh.write("index,task_id,termination,reward,tcr\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")
    from agentloop.plots import plot_reward_histogram

    figure = plot_reward_histogram(rewards, tcrs, out_dir / "eval_rewards.png")
    resolved = resolve_config(args, RolloutConfig())
    write_manifest(out_dir, resolved, [domain_path], {"report": str(report), "figure": str(figure)})
    mean_reward = sum(rewards) / len(rewards) if rewards else 0.0
    mean_tcr = sum(tcrs) / len(tcrs) if tcrs else 0.0
    print(f"evaluated {len(rows)} trajectories: mean reward {mean_reward:.3f}, mean TCR {mean_tcr:.3f}")
    print(f"report: {report}")
    return 0


def cmd_metrics(args: argparse.Namespace) -> int:
    try:
        records = read_metrics(args.metrics)
    except (OSError, ValueError, KeyError) as exc:
        raise RunFailure(f"cannot read metrics {args.metrics}: {exc}")
    header = [
        "step",
        "mean_entropy",
        "kl_value",
        "grad_norm",
        "mean_turns",
        "mean_response_tokens",
        "unique_4gram_ratio",
        "all_correct_ratio",
        "all_wrong_ratio",
    ]
    print("\t".join(header))
    for r in records:
        print("\t".join(f"{getattr(r, h):.6g}" if h != "step" else str(r.step) for h in header))
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        report = out_dir / "metrics.tsv"
        with open(report, "w", encoding="utf-8") as fh:
            fh.write("\t".join(header) + "\n")
            for r in records:
                fh.write("\t".join(f"{getattr(r, h):.6g}" if h != "step" else str(r.step) for h in header) + "\n")
        from agentloop.plots import plot_training_curves

        figures = plot_training_curves(records, out_dir, prefix="metrics")
        print(f"report: {report}; figures: {', '.join(str(p) for p in figures)}")
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    bundle, _ = resolve_domain(args.domain)
    trajectories = read_trajectories(args.trajectories)
    failures = 0
    for i, traj in enumerate(trajectories):
        try:
            task = bundle.task(traj.task_id)
        except KeyError:
            raise RunFailure(f"trajectory {i} references unknown task {traj.task_id!r}")
        final_db = _reexecute(traj, bundle, task)
        recorded = getattr(traj, "recorded_final_db_hash", None)
        actual = final_db.content_hash()
        if recorded is not None and recorded != actual:
            failures += 1
            print(f"trajectory {i} ({traj.task_id}): hash mismatch {recorded[:12]} != {actual[:12]}")
    if failures:
        raise RunFailure(f"{failures} of {len(trajectories)} trajectories diverged on replay")
    print(f"replayed {len(trajectories)} trajectories: final database hashes all match")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agentloop", description="Multi-turn tool-agent rollouts and group-relative training.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file with rollout/grpo sections")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--group-size", dest="group_size", type=int, default=None)
        p.add_argument("--max-turns", dest="max_turns", type=int, default=None)
        p.add_argument("--beta", type=float, default=None, help="KL coefficient")
        p.add_argument("--epsilon", type=float, default=None, help="clip range")

    p = sub.add_parser("rollout", help="run rollout groups and write trajectory JSONL")
    common(p)
    p.add_argument("--domain", default="toy", help="'toy', 'retail', or a bundle path")
    p.add_argument("--task", help="task id (default: all tasks)")
    p.add_argument("--checkpoint", help="policy checkpoint for the toy domain")
    p.add_argument("--script", help="replay script JSON with agent_steps and user_script")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_rollout)

    p = sub.add_parser("train", help="run the optimization loop on the bundled toy domain")
    common(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("synth", help="run the mocked cold-start pipeline on a replay fixture")
    common(p)
    p.add_argument("--replay", required=True, help="bundled replay name or a path")
    p.add_argument("--out", required=True, help="SFT corpus JSONL path")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("eval", help="score a trajectory file against a domain's tasks")
    common(p)
    p.add_argument("--domain", default="retail")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("metrics", help="summarize a metrics JSONL stream")
    common(p)
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", help="directory for the delimited report and figures")
    p.set_defaults(fn=cmd_metrics)

    p = sub.add_parser("replay", help="re-execute recorded trajectories and check final state")
    common(p)
    p.add_argument("--domain", default="retail")
    p.add_argument("--trajectories", required=True)
    p.set_defaults(fn=cmd_replay)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except RunFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
