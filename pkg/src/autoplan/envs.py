"""Search environments for the three planning tasks.

Four Markov decision processes with a shared ``reset`` / ``step`` /
``action_mask`` interface:

* ``OppEnv``: partition-or-replicate decisions over the trainable variable
  dims of a graph, guided by linkage groups.
* ``AdpEnv``: the same decision process over the non-trainable input
  tensors (batch-dim search), without linkage.
* ``PipeTrainEnv``: pick K-1 pivots out of the pruned candidate set; device
  counts then follow from proportional allocation.
* ``PipeInferEnv``: pick K-1 stage boundaries on coarsened cost arrays,
  then K-1 device cuts, in one phased action space.

Environments are single-threaded; instances share only immutable inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from autoplan.dataproc import GRANULARITY, CoarsenedArrays
from autoplan.ir import DimIndex, HloGraph, decision_dims, forward_subgraph
from autoplan.linkage import (
    LinkageGroup,
    Trigger,
    extract_linkage_groups,
    sorted_decision_order,
)
from autoplan.pipecost import (
    PipelinePlan,
    StageMetrics,
    candidate_pivots,
    memory_feasible,
    pipeline_length,
    proportional_device_counts,
    proportional_device_cuts,
    stage_metrics,
)
from autoplan.sharding import DimStatus, Outcome, propagate
from autoplan.topology import DeviceTopology, allreduce_time, transfer_time

ACTION_PARTITION = 0
ACTION_REPLICATE = 1

# paper regime: each generated inference environment is visited at most
# this many episodes while training a shared agent
PIPE_INFER_EPISODE_CAP = 50

_MIN_LENGTH = 1e-12


class EpisodeError(Exception):
    """step() called on a finished episode, or with a masked action."""


@dataclass(frozen=True)
class StepResult:
    next_state: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


class PartitionSearchEnv:
    """Common core of the operator-partitioning and data-parallel tasks.

    The state is the decision vector over the candidate dims (-1 undecided,
    0 replicated, 1 partitioned) plus the normalized flat index of the dim
    currently up for decision.  A step seeds the current dim with the chosen
    status and re-propagates all decisions taken so far; every candidate dim
    the propagation newly settles is rewarded at 0.4 (partitioned) or 0.1
    (replicated).  A contradiction ends the episode with reward -1.
    """

    def __init__(
        self,
        graph: HloGraph,
        dims: Sequence[DimIndex],
        groups: Mapping[Trigger, LinkageGroup],
        order: Sequence[DimIndex],
    ):
        if not dims:
            raise ValueError("the environment needs at least one candidate dim")
        self.graph = graph
        self.dims = list(dims)
        self.groups = dict(groups)
        self.order = list(order)
        self.num_actions = 2
        self.state_dim = len(self.dims) + 1
        self._feasibility: dict[Trigger, bool] = {}
        self._seeds: dict[DimIndex, DimStatus] = {}
        self._decided: dict[DimIndex, DimStatus] = {}
        self._done = True
        self._position: DimIndex | None = None

    # -- episode control --------------------------------------------------

    def reset(self) -> np.ndarray:
        self._seeds = {}
        self._decided = {}
        self._done = False
        self._position = self._next_position()
        return self._state()

    def finetune_reset(self, strategy: Mapping[DimIndex, DimStatus]) -> np.ndarray:
        """Restart from a completed strategy with revertible replications undone.

        Replicated dims whose partition trigger does not conflict on its own
        go back to undecided; every other decision is kept as a seed.
        """
        missing = [d for d in self.dims if d not in strategy]
        if missing:
            raise ValueError("finetune needs a strategy covering every candidate dim")
        seeds: dict[DimIndex, DimStatus] = {}
        for d in self.dims:
            status = strategy[d]
            if status == DimStatus.UNDECIDED:
                raise ValueError("finetune needs a fully decided strategy")
            if status == DimStatus.REPLICATED and self._partition_feasible(d):
                continue
            seeds[d] = status
        self._seeds = seeds
        self._decided = dict(seeds)
        self._position = self._next_position()
        self._done = self._position is None
        return self._state()

    def step(self, action: int) -> StepResult:
        if self._done:
            raise EpisodeError("episode is over")
        if action == ACTION_PARTITION:
            status = DimStatus.PARTITIONED
        elif action == ACTION_REPLICATE:
            status = DimStatus.REPLICATED
        else:
            raise EpisodeError(f"unknown action {action}")
        dim = self._position
        assert dim is not None
        seeds = dict(self._seeds)
        seeds[dim] = status
        result = propagate(self.graph, seeds, self.dims)
        if result.outcome is Outcome.CONFLICT:
            self._done = True
            return StepResult(self._state(), -1.0, True, {"conflict": True})

        decided: dict[DimIndex, DimStatus] = {}
        for d in self.dims:
            value = result.assignments[d.instruction_id].statuses[d.dim]
            if value != DimStatus.UNDECIDED:
                decided[d] = DimStatus(value)
        newly = [s for d, s in decided.items() if d not in self._decided]
        reward = 0.4 * sum(s == DimStatus.PARTITIONED for s in newly) + 0.1 * sum(
            s == DimStatus.REPLICATED for s in newly
        )
        self._seeds = seeds
        self._decided = decided
        info = {
            "conflict": False,
            "newly_partitioned": sum(s == DimStatus.PARTITIONED for s in newly),
            "newly_replicated": sum(s == DimStatus.REPLICATED for s in newly),
        }
        if result.outcome is Outcome.COMPLETE:
            self._done = True
            self._position = None
            info["partition_count"] = self.partition_count
        else:
            self._position = self._next_position()
        return StepResult(self._state(), reward, self._done, info)

    def action_mask(self) -> np.ndarray:
        # both decisions stay available; bad ones earn the conflict penalty
        return np.ones(self.num_actions, dtype=bool) if not self._done else np.zeros(
            self.num_actions, dtype=bool
        )

    # -- introspection ----------------------------------------------------

    @property
    def done(self) -> bool:
        return self._done

    @property
    def decided(self) -> dict[DimIndex, DimStatus]:
        return dict(self._decided)

    @property
    def seeds(self) -> dict[DimIndex, DimStatus]:
        return dict(self._seeds)

    @property
    def partition_count(self) -> int:
        return sum(s == DimStatus.PARTITIONED for s in self._decided.values())

    def strategy(self) -> dict[DimIndex, DimStatus]:
        """The completed assignment of every candidate dim."""
        if not self._done or len(self._decided) != len(self.dims):
            raise EpisodeError("no completed strategy available")
        return dict(self._decided)

    # -- internals --------------------------------------------------------

    def _next_position(self) -> DimIndex | None:
        for d in self.order:
            if d not in self._decided:
                return d
        return None

    def _state(self) -> np.ndarray:
        vec = np.full(self.state_dim, float(DimStatus.UNDECIDED), dtype=np.float64)
        for d, status in self._decided.items():
            vec[d.flat_index] = float(status)
        if self._position is None:
            vec[-1] = 1.0
        else:
            vec[-1] = self._position.flat_index / len(self.dims)
        return vec

    def _partition_feasible(self, dim: DimIndex) -> bool:
        trigger = (dim, DimStatus.PARTITIONED)
        if trigger in self.groups:
            return not self.groups[trigger].infeasible
        if trigger not in self._feasibility:
            result = propagate(self.graph, {dim: DimStatus.PARTITIONED}, self.dims)
            self._feasibility[trigger] = result.outcome is not Outcome.CONFLICT
        return self._feasibility[trigger]


class OppEnv(PartitionSearchEnv):
    """Operator partitioning over the trainable variable dims."""

    def __init__(
        self,
        graph: HloGraph,
        groups: Mapping[Trigger, LinkageGroup] | None = None,
        max_workers: int = 1,
    ):
        if not graph.trainable_variables:
            raise ValueError("operator partitioning needs trainable variables")
        dims = decision_dims(graph, graph.trainable_variables)
        if groups is None:
            groups = extract_linkage_groups(graph, dims, max_workers=max_workers)
        order = sorted_decision_order(groups)
        super().__init__(graph, dims, groups, order)


def adp_candidates(graph: HloGraph) -> list[int]:
    """Input tensors eligible for data parallelism.

    Parameters that are not trainable variables; constants never qualify.
    """
    trainable = set(graph.trainable_variables)
    return [
        ins.id
        for ins in graph.instructions
        if ins.opcode == "parameter" and ins.name not in trainable
    ]


class AdpEnv(PartitionSearchEnv):
    """Data-parallel search over candidate input dims, no linkage groups."""

    def __init__(self, graph: HloGraph):
        ids = adp_candidates(graph)
        if not ids:
            raise ValueError("the graph has no candidate input tensors")
        names = [graph.instruction(i).name for i in ids]
        dims = decision_dims(graph, names)
        super().__init__(graph, dims, groups={}, order=list(dims))


class PipeTrainEnv:
    """Pivot selection for a K-stage training pipeline.

    An episode picks K-1 pivots out of the pruned candidate list, in
    increasing forward order.  Per candidate the state carries the slowest
    hypothetical gradient allreduce, the slowest boundary transfer and the
    stage compute balance, each time block scaled by its maximum over the
    currently allowed candidates; a one-hot block marks the applied cuts.
    The terminal reward is 1/L for a memory-feasible plan, else -1/sqrt(L).
    """

    def __init__(
        self,
        graph: HloGraph,
        topo: DeviceTopology,
        num_stages: int,
        radius: int = 3,
        micro_batches: int = 4,
        micro_batch_size: int = 16,
        mem_per_device: float | None = None,
        reward_shape: str = "inv",
        backward_multiplier: float = 2.0,
    ):
        if reward_shape not in ("inv", "inv-sqrt"):
            raise ValueError(f"unknown reward shape {reward_shape!r}")
        self.graph = graph
        self.topo = topo
        self.num_stages = num_stages
        self.micro_batches = micro_batches
        self.micro_batch_size = micro_batch_size
        self.mem_per_device = mem_per_device
        self.reward_shape = reward_shape
        self.backward_multiplier = backward_multiplier
        self.candidates = candidate_pivots(graph, topo, num_stages, radius)
        self.num_actions = len(self.candidates)
        self.state_dim = 4 * len(self.candidates)
        self._applied: list[int] = []
        self._done = True

    def reset(self) -> np.ndarray:
        self._applied = []
        self._done = False
        return self._state()

    @property
    def done(self) -> bool:
        return self._done

    def action_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_actions, dtype=bool)
        if self._done:
            return mask
        remaining = (self.num_stages - 1) - len(self._applied)
        last = self._applied[-1] if self._applied else -1
        for i in range(self.num_actions):
            if i <= last:
                continue
            # keep room for the picks still owed after this one
            if self.num_actions - 1 - i < remaining - 1:
                continue
            mask[i] = True
        return mask

    def step(self, action: int) -> StepResult:
        if self._done:
            raise EpisodeError("episode is over")
        if not self.action_mask()[action]:
            raise EpisodeError(f"action {action} is masked")
        self._applied.append(action)
        if len(self._applied) < self.num_stages - 1:
            return StepResult(self._state(), 0.0, False, {})

        self._done = True
        pivots = tuple(self.candidates[i] for i in self._applied)
        metrics = stage_metrics(self.graph, pivots, self.backward_multiplier)
        cuts = proportional_device_cuts(metrics, self.topo)
        plan = PipelinePlan(pivots, cuts, self.micro_batches, self.micro_batch_size)
        length = max(pipeline_length(plan, metrics, self.topo), _MIN_LENGTH)
        feasible = self.mem_per_device is None or memory_feasible(
            plan, metrics, self.topo, self.mem_per_device
        )
        if not feasible:
            reward = -1.0 / math.sqrt(length)
        elif self.reward_shape == "inv":
            reward = 1.0 / length
        else:
            reward = 1.0 / math.sqrt(length)
        info = {
            "pipeline_length": length,
            "memory_feasible": feasible,
            "plan": plan,
            "metrics": metrics,
        }
        return StepResult(self._state(), reward, True, info)

    def _state(self) -> np.ndarray:
        n = self.num_actions
        reduces = np.zeros(n)
        transfers = np.zeros(n)
        balance = np.zeros(n)
        mask = self.action_mask()
        for i in np.flatnonzero(mask):
            pivots = [self.candidates[j] for j in self._applied] + [self.candidates[i]]
            metrics = stage_metrics(self.graph, pivots, self.backward_multiplier)
            counts = proportional_device_counts(
                [m.compute_ms for m in metrics], self.topo.num_devices
            )
            edges = np.cumsum([0] + counts)
            groups = [(int(edges[s]), int(edges[s + 1])) for s in range(len(counts))]
            reduces[i] = max(
                allreduce_time(m.param_bytes, range(start, end), self.topo)
                for m, (start, end) in zip(metrics, groups)
            )
            transfers[i] = max(
                transfer_time(
                    metrics[s].activation_bytes, groups[s][1] - 1, groups[s + 1][0], self.topo
                )
                for s in range(len(groups) - 1)
            )
            computes = [m.compute_ms for m in metrics]
            top = max(computes)
            balance[i] = min(computes) / top if top > 0 else 1.0
        for block in (reduces, transfers):
            top = block.max()
            if top > 0:
                block /= top
        onehot = np.zeros(n)
        onehot[self._applied] = 1.0
        return np.concatenate([reduces, transfers, balance, onehot])


def infer_search_bands(
    arrays: CoarsenedArrays,
    topo: DeviceTopology,
    num_stages: int,
    radius: int,
    cut_radius: int = 0,
) -> tuple[list[set[int]], list[set[int]]]:
    """Per-slot bands around the center solution.

    The center boundaries split the cumulative compute into equal shares;
    the center cuts split the device list evenly and then snap to the
    nearest server boundary, where stage groups avoid the slow inter-server
    ring links.  Boundary bands keep their center plus ``radius`` positions
    either side; cut bands stay pinned to the center solution unless
    ``cut_radius`` widens them.  Radius 0 degenerates to the center
    solution itself.
    """
    if radius < 0 or cut_radius < 0:
        raise ValueError("radius must be >= 0")
    picks = num_stages - 1
    d = topo.num_devices
    g = topo.gpus_per_server
    boundary_centers = []
    for s in range(picks):
        target = (s + 1) / num_stages
        center = int(np.searchsorted(arrays.c, target)) + 1
        boundary_centers.append(min(max(center, s + 1), GRANULARITY - picks + s))
    cut_centers = []
    for s in range(picks):
        if topo.num_servers > 1:
            # snap toward server boundaries, where groups dodge the slow links
            center = round((s + 1) * d / num_stages / g) * g
            center = min(max(center, g), d - g)
        else:
            center = min(max(round((s + 1) * d / num_stages), 1), d - 1)
        cut_centers.append(center)
    # collapse of neighboring centers would leave a slot with no legal pick
    spacing = g if topo.num_servers > 1 else 1
    for s in range(1, picks):
        boundary_centers[s] = max(boundary_centers[s], boundary_centers[s - 1] + 1)
        cut_centers[s] = max(cut_centers[s], cut_centers[s - 1] + spacing)
    for s in reversed(range(picks)):
        cut_centers[s] = min(cut_centers[s], d - (picks - s))
    for s in range(1, picks):
        cut_centers[s] = max(cut_centers[s], cut_centers[s - 1] + 1)
    boundaries = [
        {b for b in range(c - radius, c + radius + 1) if 1 <= b <= GRANULARITY - 1}
        for c in boundary_centers
    ]
    cuts = [
        {c for c in range(c0 - cut_radius, c0 + cut_radius + 1) if 1 <= c <= d - 1}
        for c0 in cut_centers
    ]
    return boundaries, cuts


class PipeInferEnv:
    """Stage-boundary and device-cut selection on coarsened cost arrays.

    One action space of size 127 + (D-1): an episode first picks K-1
    strictly increasing boundaries in 1..127, then K-1 strictly increasing
    device cuts in 1..D-1, with phase-dependent masks.  The terminal reward
    is 1/L where L is the pipeline length of the decoded plan on the
    normalized topology.
    """

    def __init__(
        self,
        arrays: CoarsenedArrays,
        topo: DeviceTopology,
        num_stages: int,
        micro_batches: int = 1,
        micro_batch_size: int = 16,
        allowed_boundaries: Sequence[set[int]] | None = None,
        allowed_cuts: Sequence[set[int]] | None = None,
    ):
        if arrays.granularity != GRANULARITY:
            raise ValueError(f"expected granularity {GRANULARITY}")
        for name, xs in (("C*", arrays.c), ("A*", arrays.a), ("W*", arrays.w)):
            if np.min(xs) < 0.0 or np.max(xs) > 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if num_stages < 2:
            raise ValueError("pipeline planning needs at least two stages")
        if num_stages > topo.num_devices:
            raise ValueError("more stages than devices")
        picks = num_stages - 1
        if allowed_boundaries is not None and len(allowed_boundaries) != picks:
            raise ValueError("need one boundary set per pick")
        if allowed_cuts is not None and len(allowed_cuts) != picks:
            raise ValueError("need one device-cut set per pick")
        self.arrays = arrays
        self.topo = topo
        self.topo_norm = topo.normalized()
        self.num_stages = num_stages
        self.micro_batches = micro_batches
        self.micro_batch_size = micro_batch_size
        self.allowed_boundaries = allowed_boundaries
        self.allowed_cuts = allowed_cuts
        d = topo.num_devices
        self.num_actions = (GRANULARITY - 1) + (d - 1)
        self.state_dim = 3 * GRANULARITY + d * d + 2 * picks
        bw = topo.bandwidth_matrix.copy()
        finite_max = bw[np.isfinite(bw)].max()
        bw[~np.isfinite(bw)] = finite_max
        self._bw_flat = (bw / finite_max).ravel()
        self._boundaries: list[int] = []
        self._cuts: list[int] = []
        self._done = True

    def reset(self) -> np.ndarray:
        self._boundaries = []
        self._cuts = []
        self._done = False
        return self._state()

    @property
    def done(self) -> bool:
        return self._done

    @property
    def boundaries(self) -> tuple[int, ...]:
        return tuple(self._boundaries)

    @property
    def device_cuts(self) -> tuple[int, ...]:
        return tuple(self._cuts)

    def action_mask(self) -> np.ndarray:
        mask = np.zeros(self.num_actions, dtype=bool)
        if self._done:
            return mask
        picks = self.num_stages - 1
        if len(self._boundaries) < picks:
            slot = len(self._boundaries)
            remaining = picks - slot
            last = self._boundaries[-1] if self._boundaries else 0
            band = self.allowed_boundaries[slot] if self.allowed_boundaries else None
            for b in range(last + 1, GRANULARITY):
                if (GRANULARITY - 1) - b < remaining - 1:
                    continue
                if band is not None and b not in band:
                    continue
                mask[b - 1] = True
        else:
            slot = len(self._cuts)
            remaining = picks - slot
            last = self._cuts[-1] if self._cuts else 0
            band = self.allowed_cuts[slot] if self.allowed_cuts else None
            d = self.topo.num_devices
            for c in range(last + 1, d):
                if (d - 1) - c < remaining - 1:
                    continue
                if band is not None and c not in band:
                    continue
                mask[GRANULARITY - 1 + c - 1] = True
        return mask

    def step(self, action: int) -> StepResult:
        if self._done:
            raise EpisodeError("episode is over")
        if not self.action_mask()[action]:
            raise EpisodeError(f"action {action} is masked")
        picks = self.num_stages - 1
        if action < GRANULARITY - 1:
            self._boundaries.append(action + 1)
        else:
            self._cuts.append(action - (GRANULARITY - 1) + 1)
        if len(self._cuts) < picks:
            return StepResult(self._state(), 0.0, False, {})

        self._done = True
        metrics = self.decode_metrics(self._boundaries)
        plan = PipelinePlan(
            tuple(self._boundaries),
            tuple(self._cuts),
            self.micro_batches,
            self.micro_batch_size,
        )
        length = max(pipeline_length(plan, metrics, self.topo_norm), _MIN_LENGTH)
        info = {
            "pipeline_length": length,
            "plan": plan,
            "metrics": metrics,
        }
        return StepResult(self._state(), 1.0 / length, True, info)

    def decode_metrics(self, boundaries: Sequence[int]) -> list[StageMetrics]:
        """Per-stage costs implied by the boundaries on the coarsened arrays.

        Compute and parameter prefixes difference out per stage; the
        activation payload of a stage is the A* entry at its boundary.
        Compute is scaled to milliseconds so that the pipeline length
        arithmetic (which divides by 1000) recovers the normalized units.
        """
        edges = [0] + list(boundaries) + [GRANULARITY]
        metrics = []
        for s in range(len(edges) - 1):
            lo, hi = edges[s], edges[s + 1]
            compute = self.arrays.c[hi - 1] - (self.arrays.c[lo - 1] if lo > 0 else 0.0)
            params = self.arrays.w[hi - 1] - (self.arrays.w[lo - 1] if lo > 0 else 0.0)
            activation = self.arrays.a[hi - 1] if hi < GRANULARITY else 0.0
            metrics.append(
                StageMetrics(
                    compute_ms=compute * 1000.0,
                    activation_bytes=activation,
                    param_bytes=params,
                )
            )
        return metrics

    def _state(self) -> np.ndarray:
        picks = self.num_stages - 1
        slots = np.zeros(2 * picks)
        for i, b in enumerate(self._boundaries):
            slots[i] = b / GRANULARITY
        for i, c in enumerate(self._cuts):
            slots[picks + i] = c / self.topo.num_devices
        return np.concatenate(
            [self.arrays.c, self.arrays.a, self.arrays.w, self._bw_flat, slots]
        )
