"""Shared test fixtures: graph builders, generators and brute-force oracles."""

from __future__ import annotations

import itertools
from typing import Mapping, Sequence

import numpy as np

from autoplan.ir import DimIndex, HloGraph, Instruction, TensorShape, decision_dims
from autoplan.sharding import DimStatus, Outcome, propagate
from autoplan.topology import DeviceTopology, allreduce_time, transfer_time
from autoplan.dataproc import GRANULARITY


class GraphBuilder:
    """Incremental Instruction-list builder for hand-made test graphs."""

    def __init__(self):
        self.instructions: list[Instruction] = []
        self.trainables: list[str] = []

    def add(self, name, opcode, operands=(), dims=(), element_size=4,
            is_forward=True, compute_cost_ms=None) -> int:
        self.instructions.append(
            Instruction(
                id=len(self.instructions),
                name=name,
                opcode=opcode,
                operand_ids=tuple(operands),
                shape=TensorShape(tuple(dims), element_size),
                is_forward=is_forward,
                compute_cost_ms=compute_cost_ms,
            )
        )
        return len(self.instructions) - 1

    def param(self, name, dims, trainable=False) -> int:
        if trainable:
            self.trainables.append(name)
        return self.add(name, "parameter", (), dims)

    def build(self) -> HloGraph:
        return HloGraph(self.instructions, self.trainables)


def linkage_chain_graph() -> HloGraph:
    """y = tanh((x @ w) + bias) * scale; partitioning w.d1 drags bias and scale.

    Candidate dims: w.d0, w.d1, bias.d0, scale.d0.  Seeding w.d1 partitioned
    settles all four: three partitioned (w.d1, bias.d0, scale.d0) and one
    replicated sibling (w.d0).
    """
    g = GraphBuilder()
    x = g.param("x", (4, 8))
    w = g.param("w", (8, 6), trainable=True)
    bias = g.param("bias", (6,), trainable=True)
    scale = g.param("scale", (6,), trainable=True)
    mm = g.add("mm", "dot", (x, w), (4, 6))
    bb = g.add("bias_b", "broadcast", (bias,), (4, 6))
    sa = g.add("sum", "add", (mm, bb), (4, 6))
    ac = g.add("act", "tanh", (sa,), (4, 6))
    sb = g.add("scale_b", "broadcast", (scale,), (4, 6))
    g.add("out", "multiply", (ac, sb), (4, 6))
    return g.build()


def two_layer_graph() -> HloGraph:
    """x @ w1 @ w2 with both weights trainable; classic contraction linkage."""
    g = GraphBuilder()
    x = g.param("x", (4, 8))
    w1 = g.param("w1", (8, 6), trainable=True)
    w2 = g.param("w2", (6, 5), trainable=True)
    h = g.add("h", "dot", (x, w1), (4, 6))
    g.add("y", "dot", (h, w2), (4, 5))
    return g.build()


def random_decision_graph(rng: np.random.Generator) -> HloGraph:
    """Random valid chain graph with 3-8 trainable decision dims.

    Shapes are consistent by construction; ops are drawn from dot, biased
    add, scaling, unary activations, transposes and residual adds, closed
    by a full reduce.
    """
    g = GraphBuilder()
    extents = [int(e) for e in rng.integers(2, 7, size=8)]
    n, d = extents[0], extents[1]
    x = g.param("x", (n, d))
    w0 = g.param("w0", (d, extents[2]), trainable=True)
    cur = g.add("mm0", "dot", (x, w0), (n, extents[2]))
    shape = (n, extents[2])
    budget = 8 - 2
    same_shape: dict[tuple[int, ...], int] = {shape: cur}
    k = 0
    for step in range(int(rng.integers(2, 6))):
        ops = ["unary", "transpose"]
        if budget >= 2:
            ops.append("dot")
        if budget >= 1:
            ops.extend(["bias", "scale"])
        if shape in same_shape and same_shape[shape] != cur:
            ops.append("residual")
        op = rng.choice(ops)
        k += 1
        if op == "dot":
            out = int(rng.integers(2, 7))
            w = g.param(f"w{k}", (shape[-1], out), trainable=True)
            cur = g.add(f"mm{k}", "dot", (cur, w), (shape[0], out))
            shape = (shape[0], out)
            budget -= 2
        elif op in ("bias", "scale"):
            v = g.param(f"v{k}", (shape[-1],), trainable=True)
            b = g.add(f"b{k}", "broadcast", (v,), shape)
            kind = "add" if op == "bias" else "multiply"
            cur = g.add(f"{kind}{k}", kind, (cur, b), shape)
            budget -= 1
        elif op == "unary":
            fn = str(rng.choice(["tanh", "exp"]))
            cur = g.add(f"{fn}{k}", fn, (cur,), shape)
        elif op == "transpose":
            shape = tuple(reversed(shape))
            cur = g.add(f"t{k}", "transpose", (cur,), shape)
        else:
            cur = g.add(f"res{k}", "add", (cur, same_shape[shape]), shape)
        same_shape.setdefault(shape, cur)
    g.add("loss", "reduce", (cur,), ())
    return g.build()


def stepwise_outcome(
    graph: HloGraph, dims: Sequence[DimIndex], assignment: Mapping[DimIndex, DimStatus]
) -> Outcome:
    """Classification when the seeds arrive one at a time in flat order."""
    result = None
    for t in range(1, len(dims) + 1):
        seeds = {d: assignment[d] for d in dims[:t]}
        result = propagate(graph, seeds, dims)
        if result.outcome is Outcome.CONFLICT:
            return Outcome.CONFLICT
    return result.outcome


def enumerate_completes(
    graph: HloGraph, dims: Sequence[DimIndex]
) -> list[frozenset[DimIndex]]:
    """Partition sets of every conflict-free full assignment."""
    completes = []
    for bits in itertools.product((DimStatus.PARTITIONED, DimStatus.REPLICATED), repeat=len(dims)):
        seeds = dict(zip(dims, bits))
        if propagate(graph, seeds, dims).outcome is Outcome.COMPLETE:
            completes.append(frozenset(d for d, s in seeds.items() if s == DimStatus.PARTITIONED))
    return completes


def brute_force_infer(
    arrays,
    topo: DeviceTopology,
    num_stages: int,
    micro_batches: int,
    micro_batch_size: int,
    boundary_sets: Sequence[set[int]] | None = None,
    cut_sets: Sequence[set[int]] | None = None,
    chunk: int = 512,
) -> tuple[tuple[int, ...], tuple[int, ...], float]:
    """Vectorized exhaustive minimum of the pipeline length on coarse arrays.

    Mirrors the environment's terminal decode: stage compute and params from
    prefix differences, activations at the boundaries, costs on the
    normalized topology.  ``boundary_sets``/``cut_sets`` restrict the sweep
    to per-slot candidate sets; None sweeps the full strictly increasing
    space.
    """
    topo_n = topo.normalized()
    d = topo.num_devices
    picks = num_stages - 1
    g = GRANULARITY

    def combos(sets, hi):
        if sets is None:
            return np.array(list(itertools.combinations(range(1, hi), picks)), dtype=int)
        pool = [
            c for c in itertools.product(*[sorted(s) for s in sets])
            if all(c[i] < c[i + 1] for i in range(picks - 1))
        ]
        return np.array(pool, dtype=int).reshape(-1, picks)

    b_combos = combos(boundary_sets, g)
    c_combos = combos(cut_sets, d)
    cpad = np.concatenate([[0.0], arrays.c])
    wpad = np.concatenate([[0.0], arrays.w])
    apad = np.concatenate([[0.0], arrays.a])
    edges = np.concatenate(
        [np.zeros((len(b_combos), 1), int), b_combos, np.full((len(b_combos), 1), g)], axis=1
    )
    comp = cpad[edges[:, 1:]] - cpad[edges[:, :-1]]
    wsum = wpad[edges[:, 1:]] - wpad[edges[:, :-1]]
    act = apad[b_combos]

    tr_unit = np.array([transfer_time(1.0, c - 1, c, topo_n) for c in range(1, d)])
    ar_table = {}
    for start in range(d):
        for end in range(start + 1, d + 1):
            ar_table[(start, end)] = allreduce_time(1.0, range(start, end), topo_n)
    cedges = np.concatenate(
        [np.zeros((len(c_combos), 1), int), c_combos, np.full((len(c_combos), 1), d)], axis=1
    )
    sizes = (cedges[:, 1:] - cedges[:, :-1]).astype(float)
    tr = tr_unit[c_combos - 1]
    ar = np.array(
        [[ar_table[(cedges[j, s], cedges[j, s + 1])] for s in range(num_stages)]
         for j in range(len(c_combos))]
    )

    best_l = np.inf
    best = None
    for lo in range(0, len(b_combos), chunk):
        hi = min(lo + chunk, len(b_combos))
        t = comp[lo:hi, None, :] / sizes[None, :, :]
        length = (micro_batches - 1) * t.max(axis=2) + t.sum(axis=2)
        length += (act[lo:hi, None, :] * tr[None, :, :]).sum(axis=2)
        length += (wsum[lo:hi, None, :] * ar[None, :, :]).max(axis=2)
        idx = np.unravel_index(np.argmin(length), length.shape)
        if length[idx] < best_l:
            best_l = float(length[idx])
            best = (
                tuple(int(v) for v in b_combos[lo + idx[0]]),
                tuple(int(v) for v in c_combos[idx[1]]),
            )
    return best[0], best[1], best_l


def label_map(graph: HloGraph, dims: Sequence[DimIndex]) -> dict[DimIndex, str]:
    return {d: f"{graph.instruction(d.instruction_id).name}.d{d.dim}" for d in dims}


def trainable_dims(graph: HloGraph) -> list[DimIndex]:
    return decision_dims(graph, graph.trainable_variables)
