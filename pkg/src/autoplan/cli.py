"""Command-line driver for the plan-search tasks.

Wires graphs, topologies, environments and the DQN agent into runnable
searches and emits three artifacts per training run: the best plan as JSON
(byte-identical for identical config and seed), an incrementally flushed
training-curve CSV (episode, loss, total score, epsilon), and a run summary
JSON recording the effective defaults, the best reward and the time it took
to reach it.

Exit codes: 0 ok, 2 configuration error, 3 infeasible (no valid plan),
4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass
from typing import Callable, Mapping, Sequence, TextIO

import numpy as np

from autoplan.agent import AgentConfig, DivergenceError, DqnAgent, Transition
from autoplan.dataproc import (
    GRANULARITY,
    CoarsenedArrays,
    ProfileError,
    build_environment_arrays,
    generate_environment,
    load_profile,
)
from autoplan.envs import (
    PIPE_INFER_EPISODE_CAP,
    AdpEnv,
    OppEnv,
    PartitionSearchEnv,
    PipeInferEnv,
    PipeTrainEnv,
    adp_candidates,
    infer_search_bands,
)
from autoplan.ir import DimIndex, GraphError, HloGraph, decision_dims, load_graph
from autoplan.linkage import extract_linkage_groups, load_cache, save_cache
from autoplan.pipecost import (
    InfeasiblePlanError,
    PipelinePlan,
    StageMetrics,
    device_groups,
    pipeline_length,
    stage_metrics,
)
from autoplan.sharding import DimStatus, Outcome, propagate
from autoplan.topology import DeviceTopology, TopologyError, load_topology
from autoplan.zoo import GRAPHS, PROFILES, zoo_graph, zoo_profile

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_DIVERGED = 4

GEN_SOURCE_LENGTH = 10 * GRANULARITY

# per-task training defaults; everything else comes from AgentConfig
TASK_DEFAULTS: dict[str, dict[str, float | int]] = {
    "opp": {"lr": 0.0005, "epsilon_decay_iters": 2000, "episodes": 2000},
    "adp": {"lr": 0.0005, "epsilon_decay_iters": 500, "episodes": 500},
    "pp-train": {"lr": 0.001, "epsilon_decay_iters": 10000, "episodes": 500},
    "pp-infer": {
        "lr": 0.001,
        "epsilon_decay_iters": 10000,
        "episodes": PIPE_INFER_EPISODE_CAP,
    },
}


class ConfigError(Exception):
    """Bad flags or unloadable inputs."""


@dataclass(frozen=True)
class RunConfig:
    """Everything one run needs, resolved from flags and task defaults."""

    task: str
    graph: str | None
    topology: str | None
    stages: int
    radius: int
    micro_batches: int
    micro_batch_size: int
    episodes: int
    seed: int
    out: str
    finetune: bool
    reward_shape: str
    log: str | None
    count: int
    dist: str
    plan: str | None
    mem_per_device: float | None
    gamma: float | None
    lr: float | None
    batch_size: int | None
    buffer: int | None
    epsilon_decay: int | None


def agent_config_for(cfg: RunConfig) -> AgentConfig:
    defaults = TASK_DEFAULTS.get(cfg.task, {})
    return AgentConfig(
        gamma=cfg.gamma if cfg.gamma is not None else 0.6,
        lr=cfg.lr if cfg.lr is not None else float(defaults.get("lr", 0.001)),
        batch_size=cfg.batch_size if cfg.batch_size is not None else 64,
        buffer_capacity=cfg.buffer if cfg.buffer is not None else 2000,
        epsilon_decay_iters=(
            cfg.epsilon_decay
            if cfg.epsilon_decay is not None
            else int(defaults.get("epsilon_decay_iters", 2000))
        ),
    )


# -- artifact writers -------------------------------------------------------


class CurveWriter:
    """Training-curve CSV, flushed after every episode."""

    def __init__(self, path: str):
        self._fh: TextIO = open(path, "w", encoding="utf-8", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(["episode", "loss", "score", "epsilon"])
        self._fh.flush()

    def write(self, episode: int, loss: float | None, score: float, epsilon: float) -> None:
        self._writer.writerow(
            [episode, "" if loss is None else f"{loss:.8g}", f"{score:.8g}", f"{epsilon:.6g}"]
        )
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


class TraceWriter:
    """Optional JSON-lines episode traces."""

    def __init__(self, path: str):
        self._fh: TextIO = open(path, "w", encoding="utf-8")

    def write(self, episode: int, steps: list[dict], outcome: str) -> None:
        record = {"episode": episode, "steps": steps, "outcome": outcome}
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _digest(state: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(state, dtype=np.float64).tobytes()).hexdigest()[:12]


def write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _artifact_paths(out: str) -> tuple[str, str]:
    base = out[: -len(".json")] if out.endswith(".json") else out
    return base + "_curve.csv", base + "_summary.json"


# -- training loops ---------------------------------------------------------


@dataclass
class PartitionOutcome:
    strategy: dict[DimIndex, DimStatus]
    partitions: int
    reward: float
    episode: int


def train_partition(
    env: PartitionSearchEnv,
    agent: DqnAgent,
    episodes: int,
    curve: CurveWriter | None = None,
    trace: TraceWriter | None = None,
    finetune_base: Mapping[DimIndex, DimStatus] | None = None,
    episode_offset: int = 0,
    stop_when: Callable[[PartitionOutcome], bool] | None = None,
) -> PartitionOutcome | None:
    """Run decision episodes, returning the best conflict-free strategy.

    With ``finetune_base`` every episode restarts from that strategy with
    its revertible replications undone instead of from scratch.
    """
    best: PartitionOutcome | None = None
    for ep in range(episodes):
        if finetune_base is not None:
            state = env.finetune_reset(finetune_base)
            if env.done:
                break
        else:
            state = env.reset()
        total = 0.0
        losses: list[float] = []
        steps: list[dict] = []
        conflict = False
        while not env.done:
            mask = env.action_mask()
            action = agent.act(state, mask)
            result = env.step(action)
            agent.observe(
                Transition(state, action, result.reward, result.next_state, result.done, env.action_mask())
            )
            loss = agent.learn()
            if loss is not None:
                losses.append(loss)
            if trace is not None:
                steps.append(
                    {"state_digest": _digest(state), "action": action, "reward": result.reward}
                )
            total += result.reward
            conflict = bool(result.info.get("conflict", False))
            state = result.next_state
        if not conflict:
            outcome = PartitionOutcome(env.strategy(), env.partition_count, total, episode_offset + ep)
            if best is None or (outcome.partitions, outcome.reward) > (best.partitions, best.reward):
                best = outcome
        if curve is not None:
            mean_loss = sum(losses) / len(losses) if losses else None
            curve.write(episode_offset + ep, mean_loss, total, agent.epsilon)
        if trace is not None:
            trace.write(episode_offset + ep, steps, "conflict" if conflict else "complete")
        if stop_when is not None and best is not None and stop_when(best):
            break
    return best


@dataclass
class PipeOutcome:
    plan: PipelinePlan
    metrics: list[StageMetrics]
    pipeline_length: float
    reward: float
    episode: int
    feasible: bool


def train_pipe(
    envs: Sequence[PipeTrainEnv | PipeInferEnv],
    agent: DqnAgent,
    episodes: int,
    curve: CurveWriter | None = None,
    trace: TraceWriter | None = None,
    episode_cap_per_env: int | None = None,
) -> list[PipeOutcome | None]:
    """Round-robin training over pipeline environments.

    Returns the best memory-feasible plan per environment (the shortest
    pipeline seen in any episode, greedy or exploratory).  With more than
    one environment each is visited at most ``episode_cap_per_env`` times.
    """
    best: list[PipeOutcome | None] = [None] * len(envs)
    visits = [0] * len(envs)
    ep = 0
    for _ in range(episodes):
        open_envs = [
            i
            for i in range(len(envs))
            if episode_cap_per_env is None or visits[i] < episode_cap_per_env
        ]
        if not open_envs:
            break
        idx = open_envs[ep % len(open_envs)]
        env = envs[idx]
        visits[idx] += 1
        state = env.reset()
        total = 0.0
        losses = []
        steps: list[dict] = []
        final_info: dict = {}
        while not env.done:
            mask = env.action_mask()
            action = agent.act(state, mask)
            result = env.step(action)
            agent.observe(
                Transition(state, action, result.reward, result.next_state, result.done, env.action_mask())
            )
            loss = agent.learn()
            if loss is not None:
                losses.append(loss)
            if trace is not None:
                steps.append(
                    {"state_digest": _digest(state), "action": action, "reward": result.reward}
                )
            total += result.reward
            final_info = result.info
            state = result.next_state
        feasible = bool(final_info.get("memory_feasible", True))
        outcome = PipeOutcome(
            plan=final_info["plan"],
            metrics=list(final_info["metrics"]),
            pipeline_length=final_info["pipeline_length"],
            reward=total,
            episode=ep,
            feasible=feasible,
        )
        incumbent = best[idx]
        if feasible and (incumbent is None or outcome.pipeline_length < incumbent.pipeline_length):
            best[idx] = outcome
        if curve is not None:
            mean_loss = sum(losses) / len(losses) if losses else None
            curve.write(ep, mean_loss, total, agent.epsilon)
        if trace is not None:
            trace.write(ep, steps, "complete")
        ep += 1
    return best


# -- input resolution -------------------------------------------------------


def resolve_graph(spec: str | None) -> HloGraph:
    if spec is None:
        raise ConfigError("this task needs --graph (a file path or a bundled graph name)")
    if os.path.exists(spec):
        return load_graph(spec)
    if spec in GRAPHS:
        return zoo_graph(spec)
    raise ConfigError(f"--graph {spec!r} is neither a file nor one of {sorted(GRAPHS)}")


def resolve_arrays(cfg: RunConfig) -> CoarsenedArrays:
    if cfg.graph is not None:
        if os.path.exists(cfg.graph):
            return build_environment_arrays(load_profile(cfg.graph))
        if cfg.graph in PROFILES:
            return build_environment_arrays(zoo_profile(cfg.graph))
        raise ConfigError(
            f"--graph {cfg.graph!r} is neither a profile file nor one of {sorted(PROFILES)}"
        )
    return generate_environment(cfg.dist, GEN_SOURCE_LENGTH, cfg.seed)


def resolve_topology(spec: str) -> DeviceTopology:
    try:
        return load_topology(spec)
    except (TopologyError, OSError, ValueError) as exc:
        raise ConfigError(f"cannot load topology {spec!r}: {exc}") from exc


def _linkage_for(graph: HloGraph, graph_spec: str | None):
    """Linkage groups, cached next to on-disk graphs keyed by content hash."""
    dims = decision_dims(graph, graph.trainable_variables)
    max_workers = max(1, int(os.environ.get("AUTOPLAN_THREADS", "1")))
    cache_path = None
    if graph_spec is not None and os.path.exists(graph_spec):
        cache_path = graph_spec + ".linkage.json"
        if os.path.exists(cache_path):
            cached = load_cache(cache_path, graph)
            if cached is not None:
                return cached
    groups = extract_linkage_groups(graph, dims, max_workers=max_workers)
    if cache_path is not None:
        save_cache(cache_path, graph, groups)
    return groups


# -- plan payloads and validation -------------------------------------------


def _strategy_payload(
    graph: HloGraph, strategy: Mapping[DimIndex, DimStatus]
) -> dict[str, int]:
    by_tensor: dict[str, int] = {}
    for dim, status in strategy.items():
        name = graph.instruction(dim.instruction_id).name
        by_tensor.setdefault(name, -1)
        if status == DimStatus.PARTITIONED:
            by_tensor[name] = dim.dim
    return by_tensor


def _stage_payload(metrics: Sequence[StageMetrics], plan: PipelinePlan, topo: DeviceTopology) -> list[dict]:
    groups = device_groups(plan.device_cuts, topo.num_devices)
    return [
        {
            "compute_ms": m.compute_ms,
            "activation_bytes": m.activation_bytes,
            "param_bytes": m.param_bytes,
            "devices": end - start,
        }
        for m, (start, end) in zip(metrics, groups)
    ]


def validate_payload(
    payload: dict,
    graph: HloGraph | None = None,
    topo: DeviceTopology | None = None,
    arrays: CoarsenedArrays | None = None,
    micro_batches: int | None = None,
    micro_batch_size: int | None = None,
) -> tuple[bool, str]:
    """Re-derive a plan payload from first principles and compare."""
    task = payload.get("task")
    if task in ("opp", "adp"):
        if graph is None:
            return False, "sharding validation needs the graph"
        names = (
            list(graph.trainable_variables)
            if task == "opp"
            else [graph.instruction(i).name for i in adp_candidates(graph)]
        )
        dims = decision_dims(graph, names)
        strategy = payload.get("strategy", {})
        if set(strategy) != set(names):
            return False, "strategy keys do not match the candidate tensors"
        seeds = {}
        for d in dims:
            chosen = strategy[graph.instruction(d.instruction_id).name]
            seeds[d] = DimStatus.PARTITIONED if chosen == d.dim else DimStatus.REPLICATED
        result = propagate(graph, seeds, dims)
        if result.outcome is not Outcome.COMPLETE:
            return False, f"strategy does not propagate cleanly: {result.outcome.name}"
        partitions = sum(1 for v in strategy.values() if v >= 0)
        if partitions != payload.get("partition_count"):
            return False, "partition_count does not match the strategy"
        return True, "strategy propagates conflict-free"
    if task == "pp-train":
        if graph is None or topo is None:
            return False, "pipeline validation needs the graph and topology"
        by_name = {graph.instruction(i).name: i for i in graph.topological_order}
        try:
            pivots = tuple(by_name[name] for name in payload["pivots"])
        except KeyError as exc:
            return False, f"unknown pivot {exc}"
        plan = PipelinePlan(
            pivots,
            tuple(payload["device_cuts"]),
            micro_batches if micro_batches is not None else payload.get("micro_batches", 1),
            micro_batch_size if micro_batch_size is not None else payload.get("micro_batch_size", 16),
        )
        metrics = stage_metrics(graph, pivots)
        length = pipeline_length(plan, metrics, topo)
        if abs(length - payload.get("pipeline_length_s", -1.0)) > 1e-9 * max(1.0, length):
            return False, f"recomputed pipeline length {length} disagrees"
        return True, "pipeline length matches the cost model"
    if task == "pp-infer":
        if arrays is None or topo is None:
            return False, "inference validation needs the profile and topology"
        env = PipeInferEnv(
            arrays,
            topo,
            num_stages=len(payload["boundaries"]) + 1,
            micro_batches=micro_batches if micro_batches is not None else payload.get("micro_batches", 1),
            micro_batch_size=micro_batch_size
            if micro_batch_size is not None
            else payload.get("micro_batch_size", 16),
        )
        metrics = env.decode_metrics(payload["boundaries"])
        plan = PipelinePlan(
            tuple(payload["boundaries"]),
            tuple(payload["device_cuts"]),
            env.micro_batches,
            env.micro_batch_size,
        )
        length = pipeline_length(plan, metrics, env.topo_norm)
        if abs(length - payload.get("pipeline_length_s", -1.0)) > 1e-9 * max(1.0, length):
            return False, f"recomputed pipeline length {length} disagrees"
        return True, "pipeline length matches the cost model"
    return False, f"unknown plan task {task!r}"


# -- task runners ------------------------------------------------------------


def _run_sharding(cfg: RunConfig) -> int:
    graph = resolve_graph(cfg.graph)
    if cfg.task == "opp":
        env = OppEnv(graph, groups=_linkage_for(graph, cfg.graph))
    else:
        env = AdpEnv(graph)
    agent = DqnAgent(agent_config_for(cfg), env.state_dim, env.num_actions, cfg.seed)
    curve_path, summary_path = _artifact_paths(cfg.out)
    curve = CurveWriter(curve_path)
    trace = TraceWriter(cfg.log) if cfg.log else None
    started = time.monotonic()
    try:
        best = train_partition(env, agent, cfg.episodes, curve, trace)
        stage2 = None
        if best is not None and cfg.finetune:
            stage2 = train_partition(
                env,
                agent,
                cfg.episodes,
                curve,
                trace,
                finetune_base=best.strategy,
                episode_offset=cfg.episodes,
            )
        if stage2 is not None and (stage2.partitions, stage2.reward) > (best.partitions, best.reward):
            best = stage2
    finally:
        curve.close()
        if trace is not None:
            trace.close()
    if best is None:
        logger.error("no conflict-free strategy found in %d episodes", cfg.episodes)
        return EXIT_INFEASIBLE
    elapsed = time.monotonic() - started
    payload = {
        "task": cfg.task,
        "graph": cfg.graph,
        "seed": cfg.seed,
        "episodes": cfg.episodes,
        "finetune": cfg.finetune,
        "strategy": _strategy_payload(graph, best.strategy),
        "partition_count": best.partitions,
        "episode_reward": best.reward,
        "found_at_episode": best.episode,
    }
    ok, message = validate_payload(payload, graph=graph)
    if not ok:
        logger.error("emitted plan failed self-validation: %s", message)
        return EXIT_INFEASIBLE
    write_json(cfg.out, payload)
    write_json(
        summary_path,
        {
            "task": cfg.task,
            "best_reward": best.reward,
            "best_partitions": best.partitions,
            "time_to_best_s": elapsed,
            "episodes": cfg.episodes,
            "seed": cfg.seed,
            "defaults": asdict(agent_config_for(cfg)),
        },
    )
    logger.info("wrote %s (%d partitions)", cfg.out, best.partitions)
    return EXIT_OK


def _run_pp_train(cfg: RunConfig) -> int:
    graph = resolve_graph(cfg.graph)
    topo = resolve_topology(cfg.topology or "configa")
    env = PipeTrainEnv(
        graph,
        topo,
        num_stages=cfg.stages,
        radius=cfg.radius,
        micro_batches=cfg.micro_batches,
        micro_batch_size=cfg.micro_batch_size,
        mem_per_device=cfg.mem_per_device,
        reward_shape=cfg.reward_shape,
    )
    agent = DqnAgent(agent_config_for(cfg), env.state_dim, env.num_actions, cfg.seed)
    curve_path, summary_path = _artifact_paths(cfg.out)
    curve = CurveWriter(curve_path)
    trace = TraceWriter(cfg.log) if cfg.log else None
    started = time.monotonic()
    try:
        best = train_pipe([env], agent, cfg.episodes, curve, trace)[0]
    finally:
        curve.close()
        if trace is not None:
            trace.close()
    if best is None:
        logger.error("no memory-feasible plan found in %d episodes", cfg.episodes)
        return EXIT_INFEASIBLE
    elapsed = time.monotonic() - started
    payload = {
        "task": "pp-train",
        "graph": cfg.graph,
        "topology": cfg.topology,
        "seed": cfg.seed,
        "episodes": cfg.episodes,
        "micro_batches": cfg.micro_batches,
        "micro_batch_size": cfg.micro_batch_size,
        "pivots": [graph.instruction(p).name for p in best.plan.pivot_ids],
        "device_cuts": list(best.plan.device_cuts),
        "stages": _stage_payload(best.metrics, best.plan, topo),
        "pipeline_length_s": best.pipeline_length,
        "memory_feasible": best.feasible,
    }
    ok, message = validate_payload(payload, graph=graph, topo=topo)
    if not ok:
        logger.error("emitted plan failed self-validation: %s", message)
        return EXIT_INFEASIBLE
    write_json(cfg.out, payload)
    write_json(
        summary_path,
        {
            "task": cfg.task,
            "best_reward": best.reward,
            "pipeline_length_s": best.pipeline_length,
            "time_to_best_s": elapsed,
            "episodes": cfg.episodes,
            "seed": cfg.seed,
            "defaults": asdict(agent_config_for(cfg)),
        },
    )
    logger.info("wrote %s (L=%.6f s)", cfg.out, best.pipeline_length)
    return EXIT_OK


def _run_pp_infer(cfg: RunConfig) -> int:
    arrays = resolve_arrays(cfg)
    topo = resolve_topology(cfg.topology or "configa")
    boundary_bands, cut_bands = infer_search_bands(arrays, topo, cfg.stages, cfg.radius)
    env = PipeInferEnv(
        arrays,
        topo,
        num_stages=cfg.stages,
        micro_batches=cfg.micro_batches,
        micro_batch_size=cfg.micro_batch_size,
        allowed_boundaries=boundary_bands,
        allowed_cuts=cut_bands,
    )
    agent = DqnAgent(agent_config_for(cfg), env.state_dim, env.num_actions, cfg.seed)
    curve_path, summary_path = _artifact_paths(cfg.out)
    curve = CurveWriter(curve_path)
    trace = TraceWriter(cfg.log) if cfg.log else None
    started = time.monotonic()
    try:
        best = train_pipe([env], agent, cfg.episodes, curve, trace)[0]
    finally:
        curve.close()
        if trace is not None:
            trace.close()
    if best is None:
        logger.error("no plan found in %d episodes", cfg.episodes)
        return EXIT_INFEASIBLE
    elapsed = time.monotonic() - started
    payload = {
        "task": "pp-infer",
        "graph": cfg.graph,
        "distribution": None if cfg.graph is not None else cfg.dist,
        "topology": cfg.topology,
        "seed": cfg.seed,
        "episodes": cfg.episodes,
        "micro_batches": cfg.micro_batches,
        "micro_batch_size": cfg.micro_batch_size,
        "boundaries": list(best.plan.pivot_ids),
        "device_cuts": list(best.plan.device_cuts),
        "stages": _stage_payload(best.metrics, best.plan, topo),
        "pipeline_length_s": best.pipeline_length,
        "units": "normalized",
    }
    ok, message = validate_payload(payload, topo=topo, arrays=arrays)
    if not ok:
        logger.error("emitted plan failed self-validation: %s", message)
        return EXIT_INFEASIBLE
    write_json(cfg.out, payload)
    write_json(
        summary_path,
        {
            "task": cfg.task,
            "best_reward": best.reward,
            "pipeline_length_s": best.pipeline_length,
            "time_to_best_s": elapsed,
            "episodes": cfg.episodes,
            "seed": cfg.seed,
            "defaults": asdict(agent_config_for(cfg)),
        },
    )
    logger.info("wrote %s (L=%.6f, normalized)", cfg.out, best.pipeline_length)
    return EXIT_OK


def _run_gen_data(cfg: RunConfig) -> int:
    if cfg.count < 1:
        raise ConfigError("--count must be >= 1")
    with open(cfg.out, "w", encoding="utf-8") as fh:
        for i in range(cfg.count):
            arrays = generate_environment(cfg.dist, GEN_SOURCE_LENGTH, cfg.seed + i)
            record = {
                "index": i,
                "seed": cfg.seed + i,
                "distribution": cfg.dist,
                "source_length": GEN_SOURCE_LENGTH,
                "c": [float(x) for x in arrays.c],
                "a": [float(x) for x in arrays.a],
                "w": [float(x) for x in arrays.w],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
    logger.info("wrote %d environments to %s", cfg.count, cfg.out)
    return EXIT_OK


def _run_validate(cfg: RunConfig) -> int:
    if cfg.plan is None:
        raise ConfigError("validate needs --plan")
    try:
        with open(cfg.plan, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read plan {cfg.plan!r}: {exc}") from exc
    task = payload.get("task")
    graph = None
    arrays = None
    topo = None
    if task in ("opp", "adp", "pp-train"):
        graph = resolve_graph(cfg.graph if cfg.graph is not None else payload.get("graph"))
    if task in ("pp-train", "pp-infer"):
        topo = resolve_topology(cfg.topology or payload.get("topology") or "configa")
    if task == "pp-infer":
        probe = RunConfig(**{**asdict(cfg), "graph": cfg.graph or payload.get("graph"), "dist": payload.get("distribution") or cfg.dist, "seed": payload.get("seed", cfg.seed)})
        arrays = resolve_arrays(probe)
    ok, message = validate_payload(payload, graph=graph, topo=topo, arrays=arrays)
    if ok:
        logger.info("plan %s is valid: %s", cfg.plan, message)
        return EXIT_OK
    logger.error("plan %s is invalid: %s", cfg.plan, message)
    return EXIT_INFEASIBLE


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="autoplan",
        description="Search distributed execution plans for serialized computation graphs.",
    )
    parser.add_argument(
        "--task",
        required=True,
        choices=["opp", "adp", "pp-train", "pp-infer", "gen-data", "validate"],
    )
    parser.add_argument("--graph", help="graph/profile file or bundled name")
    parser.add_argument(
        "--topology", help="preset name or JSON file (default configa; validate: the plan's)"
    )
    parser.add_argument("--stages", type=int, default=2, help="pipeline stage count K")
    parser.add_argument("--radius", type=int, default=3, help="search pruning radius")
    parser.add_argument(
        "--micro-batches", type=int, help="per global batch (default 4, pp-infer 1)"
    )
    parser.add_argument("--micro-batch-size", type=int, default=16)
    parser.add_argument("--episodes", type=int, help="training episode budget")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", help="plan output path (default <task>_plan.json)")
    parser.add_argument("--finetune", action="store_true", help="opp: run the backtrace stage")
    parser.add_argument("--reward-shape", choices=["inv", "inv-sqrt"], default="inv")
    parser.add_argument("--log", help="episode trace JSONL path")
    parser.add_argument("--count", type=int, default=100, help="gen-data: environments to emit")
    parser.add_argument(
        "--dist",
        default="uniform",
        choices=["uniform", "normal", "binomial"],
        help="distribution for generated environments",
    )
    parser.add_argument("--plan", help="validate: plan JSON to check")
    parser.add_argument("--mem-per-device", type=float, help="memory budget in bytes")
    parser.add_argument("--gamma", type=float, help="override discount factor")
    parser.add_argument("--lr", type=float, help="override learning rate")
    parser.add_argument("--batch-size", type=int, help="override training batch size")
    parser.add_argument("--buffer", type=int, help="override replay buffer capacity")
    parser.add_argument("--epsilon-decay", type=int, help="override epsilon decay iterations")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    defaults = TASK_DEFAULTS.get(args.task, {})
    episodes = args.episodes if args.episodes is not None else int(defaults.get("episodes", 500))
    out = args.out if args.out is not None else f"{args.task.replace('-', '_')}_plan.json"
    micro_batches = args.micro_batches
    if micro_batches is None:
        micro_batches = 1 if args.task == "pp-infer" else 4
    return RunConfig(
        task=args.task,
        graph=args.graph,
        topology=args.topology,
        stages=args.stages,
        radius=args.radius,
        micro_batches=micro_batches,
        micro_batch_size=args.micro_batch_size,
        episodes=episodes,
        seed=args.seed,
        out=out,
        finetune=args.finetune,
        reward_shape=args.reward_shape,
        log=args.log,
        count=args.count,
        dist=args.dist,
        plan=args.plan,
        mem_per_device=args.mem_per_device,
        gamma=args.gamma,
        lr=args.lr,
        batch_size=args.batch_size,
        buffer=args.buffer,
        epsilon_decay=args.epsilon_decay,
    )


_RUNNERS = {
    "opp": _run_sharding,
    "adp": _run_sharding,
    "pp-train": _run_pp_train,
    "pp-infer": _run_pp_infer,
    "gen-data": _run_gen_data,
    "validate": _run_validate,
}


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = config_from_args(args)
    try:
        return _RUNNERS[cfg.task](cfg)
    except ConfigError as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG
    except (GraphError, ProfileError, TopologyError) as exc:
        logger.error("cannot load inputs: %s", exc)
        return EXIT_CONFIG
    except InfeasiblePlanError as exc:
        logger.error("infeasible: %s", exc)
        return EXIT_INFEASIBLE
    except DivergenceError as exc:
        logger.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    except ValueError as exc:
        logger.error("bad configuration: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    raise SystemExit(main())
