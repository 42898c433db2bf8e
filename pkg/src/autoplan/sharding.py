"""SPMD sharding status propagation over a computation graph.

Every tensor dimension carries one of three statuses: partitioned across all
devices, replicated, or undecided.  Seeding some dims and running the rule
table to a fixed point derives the statuses forced on the rest of the graph.
Because "partitioned" always means split across the whole device set, a
tensor can hold at most one partitioned dim; requesting a second one is a
conflict, and deciding one dim partitioned forces the tensor's remaining
dims to replicated.

Rules are monotone implications, so propagation is order independent: the
fixed point of a seed set does not depend on the order the seeds arrive in,
and seeding dims one at a time classifies conflict exactly as seeding them
all at once does.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum, IntEnum
from typing import Iterable, Mapping, Sequence

from autoplan.ir import (
    ELEMENTWISE_BINARY,
    ELEMENTWISE_UNARY,
    DimIndex,
    GraphValidationError,
    HloGraph,
    _pair_broadcast,
    _pair_reduce,
    _pair_reshape,
    decision_dims,
)


class DimStatus(IntEnum):
    """Sharding status of one tensor dimension."""

    PARTITIONED = 1
    REPLICATED = 0
    UNDECIDED = -1


class Outcome(Enum):
    COMPLETE = "complete"
    INCOMPLETE = "incomplete"
    CONFLICT = "conflict"


@dataclass(frozen=True)
class ShardingSpec:
    """Per-dimension statuses of one tensor.

    ``dims`` optionally carries the tensor extents so shape dependent rules
    can be applied to a spec without graph context.
    """

    statuses: tuple[int, ...]
    dims: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.dims is not None and len(self.dims) != len(self.statuses):
            raise ValueError("statuses and dims must have equal length")
        if sum(1 for s in self.statuses if s == DimStatus.PARTITIONED) > 1:
            raise ValueError("at most one dim of a tensor can be partitioned")

    @classmethod
    def undecided(cls, rank: int, dims: tuple[int, ...] | None = None) -> "ShardingSpec":
        return cls(statuses=(int(DimStatus.UNDECIDED),) * rank, dims=dims)

    @property
    def rank(self) -> int:
        return len(self.statuses)

    @property
    def partition_dim(self) -> int | None:
        """Index of the partitioned dim, or None when fully replicated/undecided."""
        for d, s in enumerate(self.statuses):
            if s == DimStatus.PARTITIONED:
                return d
        return None

    @property
    def is_fully_decided(self) -> bool:
        return all(s != DimStatus.UNDECIDED for s in self.statuses)


@dataclass(frozen=True)
class PropagationResult:
    """Outcome of running the rule table from a seed set to a fixed point.

    ``newly_decided`` lists the candidate dims that propagation derived
    beyond the seeds themselves, in flat-index order.
    """

    outcome: Outcome
    assignments: dict[int, ShardingSpec]
    conflict_site: int | None
    newly_decided: tuple[tuple[DimIndex, DimStatus], ...]


class _Conflict(Exception):
    def __init__(self, site: int):
        self.site = site


_P = int(DimStatus.PARTITIONED)
_R = int(DimStatus.REPLICATED)
_U = int(DimStatus.UNDECIDED)


def _set(state: dict[int, list[int]], tid: int, dim: int, value: int, site: int) -> bool:
    """Record one status, enforcing the single-partition rule per tensor."""
    row = state[tid]
    cur = row[dim]
    if cur == value:
        return False
    if cur != _U:
        raise _Conflict(site)
    if value == _P:
        if any(s == _P for s in row):
            raise _Conflict(site)
        row[dim] = _P
        # one partitioned dim pins the rest of the tensor to replicated
        for j in range(len(row)):
            if row[j] == _U:
                row[j] = _R
    else:
        row[dim] = value
    return True


def _link(state: dict[int, list[int]], a: tuple[int, int], b: tuple[int, int], site: int) -> bool:
    va = state[a[0]][a[1]]
    vb = state[b[0]][b[1]]
    if va == vb:
        return False
    if va == _U:
        return _set(state, a[0], a[1], vb, site)
    if vb == _U:
        return _set(state, b[0], b[1], va, site)
    raise _Conflict(site)


class PropagationEngine:
    """Reusable propagation over a fixed graph and candidate dim set."""

    def __init__(self, graph: HloGraph, candidates: Sequence[DimIndex] | None = None):
        self.graph = graph
        self.candidates = list(candidates) if candidates is not None else None
        self._plans: list[tuple[int, str, tuple]] = []
        self._forced_replicated: list[tuple[int, int]] = []
        self._build()

    def _build(self) -> None:
        g = self.graph
        for ins in g.instructions:
            out = ins.id
            ops = ins.operand_ids
            if ins.opcode in ELEMENTWISE_BINARY or ins.opcode in ELEMENTWISE_UNARY:
                links = [((op, d), (out, d)) for op in ops for d in range(ins.shape.rank)]
                self._plans.append((out, "links", tuple(links)))
            elif ins.opcode == "dot":
                a, b = ops
                self._plans.append((out, "dot", (a, b)))
            elif ins.opcode == "transpose":
                (a,) = ops
                rank = ins.shape.rank
                links = [((a, rank - 1 - d), (out, d)) for d in range(rank)]
                self._plans.append((out, "links", tuple(links)))
            elif ins.opcode == "reshape":
                (a,) = ops
                aligned, un_in, un_out = _pair_reshape(
                    g.instruction(a).shape.dims, ins.shape.dims
                )
                links = [((a, i), (out, j)) for i, j in aligned]
                self._plans.append((out, "links", tuple(links)))
                self._forced_replicated.extend((a, i) for i in un_in)
                self._forced_replicated.extend((out, j) for j in un_out)
            elif ins.opcode == "broadcast":
                (a,) = ops
                pairs = _pair_broadcast(g.instruction(a).shape.dims, ins.shape.dims)
                paired_out = {j for _, j in pairs}
                links = [((a, i), (out, j)) for i, j in pairs]
                self._plans.append((out, "links", tuple(links)))
                self._forced_replicated.extend(
                    (out, j) for j in range(ins.shape.rank) if j not in paired_out
                )
            elif ins.opcode == "reduce":
                (a,) = ops
                pairs, reduced = _pair_reduce(g.instruction(a).shape.dims, ins.shape.dims)
                links = [((a, i), (out, j)) for i, j in pairs]
                if links:
                    self._plans.append((out, "links", tuple(links)))
                if reduced and ins.shape.rank:
                    self._plans.append((out, "reduce", (a, tuple(reduced))))
            elif ins.opcode == "get-tuple-element":
                idx = g.tuple_element_index(ins)
                element = g.instruction(ops[0]).operand_ids[idx]
                links = [((element, d), (out, d)) for d in range(ins.shape.rank)]
                self._plans.append((out, "links", tuple(links)))
            # parameter, constant and tuple have no rule

    def _candidate_dims(self, seeds: Mapping[DimIndex, DimStatus]) -> list[DimIndex]:
        if self.candidates is not None:
            return self.candidates
        names = {self.graph.instruction(di.instruction_id).name for di in seeds}
        return decision_dims(self.graph, names)

    def run(self, seeds: Mapping[DimIndex, DimStatus]) -> PropagationResult:
        g = self.graph
        state: dict[int, list[int]] = {
            ins.id: [_U] * ins.shape.rank for ins in g.instructions
        }
        candidates = self._candidate_dims(seeds)
        seed_keys = set()
        conflict_site: int | None = None
        try:
            for tid, dim in self._forced_replicated:
                _set(state, tid, dim, _R, tid)
            for di in sorted(seeds, key=lambda d: (d.instruction_id, d.dim)):
                if di.instruction_id not in state:
                    raise GraphValidationError(f"seed references unknown instruction {di.instruction_id}")
                if di.dim >= len(state[di.instruction_id]):
                    raise GraphValidationError(
                        f"seed dim {di.dim} out of range for instruction {di.instruction_id}"
                    )
                seed_keys.add((di.instruction_id, di.dim))
                _set(state, di.instruction_id, di.dim, int(seeds[di]), di.instruction_id)
            self._fixed_point(state)
        except _Conflict as c:
            conflict_site = c.site

        assignments = {
            ins.id: ShardingSpec(statuses=tuple(state[ins.id]), dims=ins.shape.dims)
            for ins in g.instructions
        }
        if conflict_site is not None:
            return PropagationResult(Outcome.CONFLICT, assignments, conflict_site, ())
        newly = tuple(
            (di, DimStatus(state[di.instruction_id][di.dim]))
            for di in candidates
            if (di.instruction_id, di.dim) not in seed_keys
            and state[di.instruction_id][di.dim] != _U
        )
        complete = all(state[di.instruction_id][di.dim] != _U for di in candidates)
        outcome = Outcome.COMPLETE if complete else Outcome.INCOMPLETE
        return PropagationResult(outcome, assignments, None, newly)

    def _fixed_point(self, state: dict[int, list[int]]) -> None:
        max_rank = max((ins.shape.rank for ins in self.graph.instructions), default=1)
        cap = max(2, len(self.graph) * max(1, max_rank) + 2)
        for _ in range(cap):
            changed = False
            for site, kind, payload in self._plans:
                if kind == "links":
                    for a, b in payload:
                        changed |= _link(state, a, b, site)
                elif kind == "dot":
                    changed |= self._apply_dot(state, payload[0], payload[1], c=site)
                else:
                    changed |= self._apply_reduce(state, payload[0], payload[1], out=site)
            if not changed:
                return
        raise RuntimeError("sharding propagation failed to reach a fixed point")

    @staticmethod
    def _apply_dot(state: dict[int, list[int]], a: int, b: int, c: int) -> bool:
        """dot(A[m,k], B[k,n]) -> C[m,n].

        The m and n dims flow between operand and output; the contracting k
        dims must agree.  Partitioning m (n) leaves the other operand fully
        replicated, and a partitioned contracting dim forces the output to
        full replication, which models the implied allreduce.
        """
        changed = _link(state, (a, 0), (c, 0), c)
        changed |= _link(state, (b, 1), (c, 1), c)
        changed |= _link(state, (a, 1), (b, 0), c)
        if state[a][0] == _P or state[c][0] == _P:
            changed |= _set(state, b, 0, _R, c)
            changed |= _set(state, b, 1, _R, c)
        if state[b][1] == _P or state[c][1] == _P:
            changed |= _set(state, a, 0, _R, c)
            changed |= _set(state, a, 1, _R, c)
        if state[a][1] == _P or state[b][0] == _P:
            changed |= _set(state, c, 0, _R, c)
            changed |= _set(state, c, 1, _R, c)
        return changed

    @staticmethod
    def _apply_reduce(state: dict[int, list[int]], a: int, reduced: tuple[int, ...], out: int) -> bool:
        """A partitioned reduced dim implies an allreduce, so the output is
        fully replicated; a partitioned output dim rules that out."""
        changed = False
        out_row = state[out]
        if any(state[a][r] == _P for r in reduced):
            for j in range(len(out_row)):
                changed |= _set(state, out, j, _R, out)
        if any(s == _P for s in out_row):
            for r in reduced:
                changed |= _set(state, a, r, _R, out)
        return changed


def propagate(
    graph: HloGraph,
    seeds: Mapping[DimIndex, DimStatus],
    candidates: Sequence[DimIndex] | None = None,
) -> PropagationResult:
    """One-shot propagation of a seed set over a graph."""
    return PropagationEngine(graph, candidates).run(seeds)


def rule_for(
    opcode: str,
    operand_specs: Sequence[ShardingSpec],
    output_spec: ShardingSpec,
) -> tuple[tuple[ShardingSpec, ...], ShardingSpec] | None:
    """Apply one opcode's rule to standalone specs.

    Returns the updated (operand specs, output spec) or None on conflict.
    Shape dependent opcodes (reshape, broadcast, reduce) require specs that
    carry ``dims``.  For get-tuple-element pass the selected element's spec
    as the single operand.  Applying the rule twice is a no-op.
    """
    state: dict[int, list[int]] = {
        i: list(spec.statuses) for i, spec in enumerate(operand_specs)
    }
    out_id = len(operand_specs)
    state[out_id] = list(output_spec.statuses)

    def _need_dims(spec: ShardingSpec) -> tuple[int, ...]:
        if spec.dims is None:
            raise ValueError(f"rule for {opcode} needs specs with dims attached")
        return spec.dims

    links: list[tuple[tuple[int, int], tuple[int, int]]] = []
    forced: list[tuple[int, int]] = []
    reduce_plan: tuple[int, tuple[int, ...]] | None = None
    is_dot = False
    if opcode in ELEMENTWISE_BINARY or opcode in ELEMENTWISE_UNARY or opcode == "get-tuple-element":
        if any(spec.rank != output_spec.rank for spec in operand_specs):
            raise ValueError(f"rule for {opcode} needs operand ranks equal to the output rank")
        links = [((i, d), (out_id, d)) for i in range(len(operand_specs)) for d in range(output_spec.rank)]
    elif opcode == "dot":
        is_dot = True
    elif opcode == "transpose":
        rank = output_spec.rank
        if operand_specs[0].rank != rank:
            raise ValueError("rule for transpose needs operand rank equal to the output rank")
        links = [((0, rank - 1 - d), (out_id, d)) for d in range(rank)]
    elif opcode == "reshape":
        aligned, un_in, un_out = _pair_reshape(_need_dims(operand_specs[0]), _need_dims(output_spec))
        links = [((0, i), (out_id, j)) for i, j in aligned]
        forced = [(0, i) for i in un_in] + [(out_id, j) for j in un_out]
    elif opcode == "broadcast":
        pairs = _pair_broadcast(_need_dims(operand_specs[0]), _need_dims(output_spec))
        links = [((0, i), (out_id, j)) for i, j in pairs]
        paired = {j for _, j in pairs}
        forced = [(out_id, j) for j in range(output_spec.rank) if j not in paired]
    elif opcode == "reduce":
        pairs, reduced = _pair_reduce(_need_dims(operand_specs[0]), _need_dims(output_spec))
        links = [((0, i), (out_id, j)) for i, j in pairs]
        reduce_plan = (0, tuple(reduced))
    elif opcode in ("parameter", "constant", "tuple"):
        pass
    else:
        raise ValueError(f"unknown opcode {opcode!r}")

    try:
        for tid, dim in forced:
            _set(state, tid, dim, _R, tid)
        for _ in range(2 + sum(len(row) for row in state.values())):
            changed = False
            for a, b in links:
                changed |= _link(state, a, b, out_id)
            if is_dot:
                changed |= PropagationEngine._apply_dot(state, 0, 1, c=out_id)
            if reduce_plan is not None:
                changed |= PropagationEngine._apply_reduce(
                    state, reduce_plan[0], reduce_plan[1], out=out_id
                )
            if not changed:
                break
    except _Conflict:
        return None
    new_operands = tuple(
        ShardingSpec(statuses=tuple(state[i]), dims=spec.dims)
        for i, spec in enumerate(operand_specs)
    )
    new_output = ShardingSpec(statuses=tuple(state[out_id]), dims=output_spec.dims)
    return new_operands, new_output
