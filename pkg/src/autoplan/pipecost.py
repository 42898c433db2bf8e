"""Pipeline stage construction and the pipeline length cost model.

A plan cuts the forward instruction order into K stages at K-1 pivot
instructions (a pivot is the last instruction of its stage) and splits the
device list into K contiguous groups at K-1 device cuts.  Stages run
GPipe-style fill and drain over M micro batches; gradients are all-reduced
inside each stage's device group, overlapped across stages so only the
slowest stage's allreduce shows up in the length.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from typing import Sequence

from autoplan.ir import HloGraph, forward_subgraph
from autoplan.topology import DeviceTopology, allreduce_time, transfer_time


class InfeasiblePlanError(Exception):
    """A plan or configuration cannot be realized on the topology."""


@dataclass(frozen=True)
class StageMetrics:
    """Costs of one pipeline stage.

    ``compute_ms`` is the per-micro-batch forward plus backward time,
    ``activation_bytes`` the payload crossing the cut after this stage
    (zero for the last stage), ``param_bytes`` the trainable parameter bytes
    assigned to the stage.
    """

    compute_ms: float
    activation_bytes: float
    param_bytes: float
    num_variables: int = 0


@dataclass(frozen=True)
class PipelinePlan:
    """K-stage plan: K-1 pivot instruction ids and K-1 device cuts."""

    pivot_ids: tuple[int, ...]
    device_cuts: tuple[int, ...]
    micro_batches: int = 1
    micro_batch_size: int = 16

    def __post_init__(self) -> None:
        if len(self.pivot_ids) != len(self.device_cuts):
            raise InfeasiblePlanError("plan needs one device cut per pivot")
        if self.micro_batches < 1:
            raise InfeasiblePlanError("micro_batches must be >= 1")

    @property
    def num_stages(self) -> int:
        return len(self.pivot_ids) + 1


def device_groups(device_cuts: Sequence[int], num_devices: int) -> list[tuple[int, int]]:
    """Split devices [0, D) into contiguous half-open groups at the cuts."""
    cuts = list(device_cuts)
    if any(c2 <= c1 for c1, c2 in zip(cuts, cuts[1:])):
        raise InfeasiblePlanError("device cuts must be strictly increasing")
    if cuts and (cuts[0] < 1 or cuts[-1] > num_devices - 1):
        raise InfeasiblePlanError("device cuts must lie strictly inside (0, D)")
    edges = [0] + cuts + [num_devices]
    return [(edges[i], edges[i + 1]) for i in range(len(edges) - 1)]


def stage_metrics(
    graph: HloGraph, pivots: Sequence[int], backward_multiplier: float = 2.0
) -> list[StageMetrics]:
    """Split the forward order at the pivots and cost each stage.

    Compute sums the instructions' ``compute_cost_ms`` (missing costs count
    as zero) and adds the backward pass as ``backward_multiplier`` times the
    forward time.  Activations crossing a cut are tensors produced at or
    before the pivot with a forward consumer after it, counted once each.
    Trainable parameters belong to the stage of their first forward
    consumer.
    """
    order = forward_subgraph(graph)
    pos = {ins_id: i for i, ins_id in enumerate(order)}
    cut_positions = []
    for p in pivots:
        if p not in pos:
            raise InfeasiblePlanError(f"pivot {p} is not a forward instruction")
        cut_positions.append(pos[p])
    if any(b <= a for a, b in zip(cut_positions, cut_positions[1:])):
        raise InfeasiblePlanError("pivots must be strictly increasing in forward order")

    k = len(cut_positions) + 1

    def stage_of(position: int) -> int:
        return bisect.bisect_left(cut_positions, position)

    compute = [0.0] * k
    for i, ins_id in enumerate(order):
        cost = graph.instruction(ins_id).compute_cost_ms or 0.0
        compute[stage_of(i)] += cost

    activation = [0.0] * k
    for s, cut in enumerate(cut_positions):
        crossing = 0.0
        for i in range(cut + 1):
            ins = graph.instruction(order[i])
            if any(
                pos.get(cons, -1) > cut
                for cons in graph.consumers(ins.id)
                if graph.instruction(cons).is_forward
            ):
                crossing += ins.shape.byte_size
        activation[s] = crossing

    params = [0.0] * k
    variables = [0] * k
    for var_id in graph.trainable_ids():
        consumer_positions = [
            pos[c]
            for c in graph.consumers(var_id)
            if graph.instruction(c).is_forward and c in pos
        ]
        if consumer_positions:
            stage = stage_of(min(consumer_positions))
        else:
            stage = stage_of(pos[var_id]) if var_id in pos else 0
        params[stage] += graph.instruction(var_id).shape.byte_size
        variables[stage] += 1

    scale = 1.0 + backward_multiplier
    return [
        StageMetrics(
            compute_ms=compute[s] * scale,
            activation_bytes=activation[s],
            param_bytes=params[s],
            num_variables=variables[s],
        )
        for s in range(k)
    ]


def pipeline_length(
    plan: PipelinePlan, metrics: Sequence[StageMetrics], topo: DeviceTopology
) -> float:
    """GPipe-style pipeline length in seconds.

    With per-stage time ``t_s = compute_ms_s / 1000 / n_s`` the length is
    ``(M-1)*max(t) + sum(t) + sum(boundary transfers) + max(allreduce)``:
    fill and drain on the slowest stage, one pass through every stage, the
    stage boundary hops, and the slowest gradient allreduce (the rest
    overlap with it).
    """
    if len(metrics) != plan.num_stages:
        raise InfeasiblePlanError("metrics do not match the plan's stage count")
    groups = device_groups(plan.device_cuts, topo.num_devices)
    times = [
        m.compute_ms / 1000.0 / (end - start)
        for m, (start, end) in zip(metrics, groups)
    ]
    transfers = [
        transfer_time(metrics[s].activation_bytes, groups[s][1] - 1, groups[s + 1][0], topo)
        for s in range(len(groups) - 1)
    ]
    reduces = [
        allreduce_time(m.param_bytes, range(start, end), topo)
        for m, (start, end) in zip(metrics, groups)
    ]
    m_batches = plan.micro_batches
    return (
        (m_batches - 1) * max(times)
        + sum(times)
        + sum(transfers)
        + max(reduces)
    )


def memory_feasible(
    plan: PipelinePlan,
    metrics: Sequence[StageMetrics],
    topo: DeviceTopology,
    mem_per_device: float,
    optimizer_multiplier: float = 4.0,
) -> bool:
    """Check that every device fits its parameter shard plus activations.

    Per device of stage s the model keeps ``param_bytes / n_s`` weights
    blown up by the optimizer state multiplier, plus the in-flight
    activation working set: M micro batches of the stage's boundary
    activations, split over the stage replicas.  Exactly hitting the budget
    is feasible.
    """
    groups = device_groups(plan.device_cuts, topo.num_devices)
    if len(metrics) != len(groups):
        raise InfeasiblePlanError("metrics do not match the plan's stage count")
    for s, ((start, end), m) in enumerate(zip(groups, metrics)):
        n = end - start
        act_in = metrics[s - 1].activation_bytes if s > 0 else 0.0
        act_out = m.activation_bytes
        working_set = plan.micro_batches * (act_in + act_out) / n
        if m.param_bytes / n * optimizer_multiplier + working_set > mem_per_device:
            return False
    return True


def _largest_remainder(quotas: Sequence[float], total: int) -> list[int]:
    counts = [int(q) for q in quotas]
    remainder = total - sum(counts)
    order = sorted(
        range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i)
    )
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def proportional_device_counts(
    compute_ms: Sequence[float], num_devices: int
) -> list[int]:
    """Devices per stage proportional to compute, largest remainder, min 1."""
    k = len(compute_ms)
    if k > num_devices:
        raise InfeasiblePlanError(f"{k} stages need more than {num_devices} devices")
    total = sum(compute_ms)
    if total <= 0:
        quotas = [num_devices / k] * k
    else:
        quotas = [num_devices * c / total for c in compute_ms]
    counts = _largest_remainder(quotas, num_devices)
    # proportionality never starves a stage completely
    while any(c == 0 for c in counts):
        poorest = counts.index(0)
        richest = max(range(k), key=lambda i: (counts[i], -i))
        counts[richest] -= 1
        counts[poorest] = 1
    return counts


def proportional_device_cuts(
    metrics: Sequence[StageMetrics], topo: DeviceTopology
) -> tuple[int, ...]:
    """Device cuts allocating devices proportionally to stage compute."""
    counts = proportional_device_counts(
        [m.compute_ms for m in metrics], topo.num_devices
    )
    cuts = []
    acc = 0
    for c in counts[:-1]:
        acc += c
        cuts.append(acc)
    return tuple(cuts)


def allowed_device_cuts(topo: DeviceTopology, radius: int) -> list[int]:
    """Device cuts within ``radius`` of a server boundary.

    Server boundaries are the multiples of gpus_per_server strictly inside
    (0, D); radius 0 keeps exactly those.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    d = topo.num_devices
    allowed: set[int] = set()
    for m in range(topo.gpus_per_server, d, topo.gpus_per_server):
        for c in range(max(1, m - radius), min(d - 1, m + radius) + 1):
            allowed.add(c)
    return sorted(allowed)


def two_stage_device_cut(
    prefix_compute: float, suffix_compute: float, topo: DeviceTopology
) -> int:
    """Device cut implied by a two-way compute split."""
    counts = proportional_device_counts([prefix_compute, suffix_compute], topo.num_devices)
    return counts[0]


def candidate_pivots(
    graph: HloGraph, topo: DeviceTopology, num_stages: int, radius: int
) -> list[int]:
    """Pivots worth considering for a K-stage plan.

    A pivot stays when the device cut implied by its prefix/suffix compute
    split lands within ``radius`` of a server boundary, and when both sides
    of the cut hold at least one trainable variable (vacuous for graphs
    without trainables).  Raises when fewer than K-1 candidates survive.
    """
    if num_stages < 2:
        raise InfeasiblePlanError("pipeline planning needs at least two stages")
    if num_stages > topo.num_devices:
        raise InfeasiblePlanError("more stages than devices")
    order = forward_subgraph(graph)
    if len(order) < 2:
        raise InfeasiblePlanError("graph is too small to cut")
    pos = {ins_id: i for i, ins_id in enumerate(order)}

    costs = [graph.instruction(i).compute_cost_ms or 0.0 for i in order]
    prefix = []
    acc = 0.0
    for c in costs:
        acc += c
        prefix.append(acc)
    total = acc

    var_first_consumer: list[int] = []
    for var_id in graph.trainable_ids():
        consumer_positions = [
            pos[c]
            for c in graph.consumers(var_id)
            if graph.instruction(c).is_forward and c in pos
        ]
        if consumer_positions:
            var_first_consumer.append(min(consumer_positions))
        elif var_id in pos:
            var_first_consumer.append(pos[var_id])
    var_first_consumer.sort()

    allowed = set(allowed_device_cuts(topo, radius))
    kept: list[int] = []
    num_vars = len(var_first_consumer)
    for i in range(len(order) - 1):
        cut = two_stage_device_cut(prefix[i], total - prefix[i], topo)
        if cut not in allowed:
            continue
        if num_vars:
            before = bisect.bisect_right(var_first_consumer, i)
            if before == 0 or before == num_vars:
                continue
        kept.append(order[i])
    if len(kept) < num_stages - 1:
        raise InfeasiblePlanError(
            f"only {len(kept)} candidate pivots for {num_stages} stages; "
            "the configuration is infeasible at this radius"
        )
    return kept
