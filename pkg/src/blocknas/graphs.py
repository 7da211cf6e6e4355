"""Compile layer-code lists into block DAGs and whole-network plans.

Graphs here are purely symbolic: nodes, edges, channel counts, spatial
shapes.  No tensors, no weights.  Channel bookkeeping follows one rule
everywhere: a convolution inside a block emits exactly the block's width,
identity/pooling/add preserve their input channels, and concat sums its two
inputs.  All layers left without a successor feed one implicit final concat,
so a block always has a single output node.
"""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

from .codes import (
    INPUT_STATE,
    CodeSpaceLimits,
    LayerCode,
    OpType,
    block_code_space,
    connection_code_space,
    validate_code,
)


class StructureError(ValueError):
    """Code list does not describe a well-formed structure."""


class ShapeError(ValueError):
    """Channel or spatial bookkeeping failed (e.g. add over unequal widths)."""


class LimitError(ValueError):
    """A structural budget (e.g. pooling count) was exceeded."""


#: op code of the distinguished input node (never a real layer op).
INPUT_OP = 0

_PRIMITIVES = {
    OpType.CONVOLUTION: ("relu", "conv", "batchnorm"),
    OpType.MAX_POOLING: ("max_pool",),
    OpType.AVERAGE_POOLING: ("avg_pool",),
    OpType.IDENTITY: ("identity",),
    OpType.ELEMENTAL_ADD: ("add",),
    OpType.CONCAT: ("concat",),
}


@dataclass(frozen=True)
class ShapeState:
    """Spatial extent and channel count carried along a network."""

    height: int
    width: int
    channels: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ShapeError(f"non-positive shape {self}")


@dataclass(frozen=True)
class GraphNode:
    node_id: int
    op_type: int
    kernel: int
    channels: int
    primitives: tuple[str, ...]


@dataclass(frozen=True)
class BlockGraph:
    """A validated block DAG: input node, layer nodes, implicit output concat."""

    codes: tuple[LayerCode, ...]
    input_channels: int
    nodes: tuple[GraphNode, ...]
    edges: tuple[tuple[int, int], ...]

    @property
    def input_id(self) -> int:
        return 0

    @property
    def output_id(self) -> int:
        return len(self.nodes) - 1

    @property
    def depth(self) -> int:
        return len(self.codes)

    @property
    def output_channels(self) -> int:
        return self.nodes[self.output_id].channels


def body_codes(codes: Sequence[LayerCode]) -> tuple[LayerCode, ...]:
    """Strip everything from the first terminal on; the terminal must exist."""
    if not codes:
        raise StructureError("empty code list")
    for i, code in enumerate(codes):
        if code.op_type == OpType.TERMINAL:
            return tuple(codes[:i])
    raise StructureError("code list has no terminal")


def _validate_body(body: Sequence[LayerCode], limits: CodeSpaceLimits) -> None:
    for i, code in enumerate(body):
        verdict = validate_code(code, i + 1, limits)
        if not verdict:
            raise StructureError(f"layer {i + 1}: {verdict.reason}")


@lru_cache(maxsize=8192)
def build_block(codes: tuple[LayerCode, ...], input_channels: int) -> BlockGraph:
    """Interpret a code list (ending in terminal) as a block DAG.

    Convolution nodes record their pre-activation expansion
    (relu -> conv -> batchnorm).  An elementwise add over unequal channel
    counts is a :class:`ShapeError`, not something silently repaired.
    """
    if input_channels < 1:
        raise ShapeError("input_channels must be >= 1")
    body = body_codes(codes)
    # Positions are validated against a widened space so a long body is not
    # rejected by the forced-terminal rule of the search-time limits.
    _validate_body(body, block_code_space(max(len(body) + 2, 2)))

    channels = [input_channels]
    edges: list[tuple[int, int]] = []
    nodes = [GraphNode(0, INPUT_OP, 0, input_channels, ("input",))]
    for i, code in enumerate(body, start=1):
        op = int(code.op_type)
        if op == OpType.CONVOLUTION:
            out_ch = input_channels
        elif op in (OpType.MAX_POOLING, OpType.AVERAGE_POOLING, OpType.IDENTITY):
            out_ch = channels[code.pred1]
        elif op == OpType.ELEMENTAL_ADD:
            left, right = channels[code.pred1], channels[code.pred2]
            if left != right:
                raise ShapeError(
                    f"add at layer {i} joins unequal channels: layer "
                    f"{code.pred1} has {left}, layer {code.pred2} has {right}")
            out_ch = left
        elif op == OpType.CONCAT:
            out_ch = channels[code.pred1] + channels[code.pred2]
        else:  # pragma: no cover - validation rejects anything else
            raise StructureError(f"unexpected op {op} at layer {i}")
        channels.append(out_ch)
        nodes.append(GraphNode(i, op, int(code.kernel), out_ch,
                               _PRIMITIVES[OpType(op)]))
        edges.append((code.pred1, i))
        if op in (OpType.ELEMENTAL_ADD, OpType.CONCAT):
            edges.append((code.pred2, i))

    has_successor = {u for u, _ in edges}
    leaves = [i for i in range(1, len(body) + 1) if i not in has_successor]
    output_id = len(body) + 1
    if leaves:
        out_ch = sum(channels[i] for i in leaves)
        edges.extend((leaf, output_id) for leaf in leaves)
    else:
        out_ch = input_channels
        edges.append((0, output_id))
    nodes.append(GraphNode(output_id, OpType.CONCAT, 0, out_ch, ("concat",)))
    return BlockGraph(tuple(body), input_channels, tuple(nodes), tuple(edges))


def leaf_multiple(codes: tuple[LayerCode, ...]) -> int:
    """Output channels of the block as a multiple of its input channels."""
    ref = 64
    return build_block(codes, ref).output_channels // ref


def topo_order(graph) -> tuple[int, ...]:
    """Deterministic topological order (Kahn's algorithm, ties by node id)."""
    node_ids = [n.node_id for n in graph.nodes]
    indegree = {i: 0 for i in node_ids}
    successors: dict[int, list[int]] = {i: [] for i in node_ids}
    for u, v in graph.edges:
        indegree[v] += 1
        successors[u].append(v)
    ready = [i for i in node_ids if indegree[i] == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        u = heapq.heappop(ready)
        order.append(u)
        for v in sorted(successors[u]):
            indegree[v] -= 1
            if indegree[v] == 0:
                heapq.heappush(ready, v)
    if len(order) != len(node_ids):  # pragma: no cover - structurally impossible
        raise StructureError("cycle detected")
    return tuple(order)


def in_degrees(graph) -> dict[int, int]:
    deg = {n.node_id: 0 for n in graph.nodes}
    for _, v in graph.edges:
        deg[v] += 1
    return deg


def out_degrees(graph) -> dict[int, int]:
    deg = {n.node_id: 0 for n in graph.nodes}
    for u, _ in graph.edges:
        deg[u] += 1
    return deg


def topology_fingerprint(graph) -> str:
    """A hash of the DAG that is invariant to node relabeling.

    Each node's label digests its op (and kernel/width where meaningful)
    together with the sorted labels of its predecessors, so two graphs get
    the same fingerprint exactly when their labeled topologies coincide.
    """
    preds: dict[int, list[int]] = {n.node_id: [] for n in graph.nodes}
    for u, v in graph.edges:
        preds[v].append(u)
    by_id = {n.node_id: n for n in graph.nodes}
    labels: dict[int, str] = {}
    for node_id in topo_order(graph):
        node = by_id[node_id]
        if isinstance(node, GraphNode):
            tag = f"{int(node.op_type)}:{int(node.kernel)}"
        else:
            tag = (f"{node.kind}:{node.op}:{int(node.kernel)}:"
                   f"{int(node.stride)}:{int(node.width)}")
        inner = tag + "|" + ",".join(sorted(labels[p] for p in preds[node_id]))
        labels[node_id] = hashlib.sha256(inner.encode()).hexdigest()
    return labels[max(labels)]


# ---------------------------------------------------------------------------
# Whole-network plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlanNode:
    node_id: int
    kind: str  # "stem" | "block" | "pool" | "head"
    op: str
    width: int
    kernel: int = 0
    stride: int = 1
    stage: int = -1


@dataclass(frozen=True)
class Adapter:
    """A recorded 1x1 projection (plus stride-2 pooling steps) on one edge."""

    edge: tuple[int, int]
    pool_steps: int
    in_channels: int
    out_channels: int
    out_height: int
    out_width: int


@dataclass(frozen=True)
class NetworkPlan:
    """A full network: stem, wired block instances, poolings, head.

    ``kind`` is ``"stack:<template>"`` for sequentially repeated blocks or
    ``"connection"`` for searched wirings.  A node with several in-edges sums
    them elementwise after each edge's adapter has matched its shape.  No
    block ever downsamples; spatial size changes only at stride-2 nodes.
    """

    kind: str
    block_codes: tuple[LayerCode, ...]
    nodes: tuple[PlanNode, ...]
    edges: tuple[tuple[int, int], ...]
    adapters: tuple[Adapter, ...]
    shapes: tuple[ShapeState, ...]
    input_shape: ShapeState
    num_classes: int

    @property
    def pooling_count(self) -> int:
        return sum(1 for n in self.nodes if n.kind == "pool")

    def stage_widths(self) -> tuple[int, ...]:
        widths = []
        for node in self.nodes:
            if node.kind == "block" and (not widths or widths[-1] != node.width):
                widths.append(node.width)
        return tuple(widths)


def _halved(extent: int) -> int:
    # stride-2 with same-style padding: 32 -> 16 -> 8, 224 -> 112.
    return (extent + 1) // 2


class _PlanBuilder:
    def __init__(self, block: BlockGraph, input_shape: ShapeState, num_classes: int):
        self.block_body = block.codes
        self.multiple = leaf_multiple(tuple(block.codes) + (
            LayerCode(len(block.codes) + 1, int(OpType.TERMINAL), 0, 0, 0),))
        self.input_shape = input_shape
        self.num_classes = num_classes
        self.nodes: list[PlanNode] = []
        self.edges: list[tuple[int, int]] = []
        self.adapters: list[Adapter] = []
        self.shapes: list[ShapeState] = []

    def add_node(self, kind, op, width, kernel=0, stride=1, stage=-1) -> int:
        node_id = len(self.nodes)
        self.nodes.append(PlanNode(node_id, kind, op, width, kernel, stride, stage))
        return node_id

    def out_shape(self, node_id: int) -> ShapeState:
        return self.shapes[node_id]

    def connect(self, src: int, dst_expected: ShapeState, dst_id: int) -> None:
        """Edge src -> dst, inserting one adapter if shapes disagree."""
        self.edges.append((src, dst_id))
        got = self.out_shape(src)
        if (got.height, got.width, got.channels) == (
                dst_expected.height, dst_expected.width, dst_expected.channels):
            return
        steps = 0
        h, w = got.height, got.width
        while (h, w) != (dst_expected.height, dst_expected.width):
            if h < dst_expected.height or steps > 16:
                raise ShapeError(
                    f"cannot align {got} to {dst_expected} on edge {src}->{dst_id}")
            h, w = _halved(h), _halved(w)
            steps += 1
        self.adapters.append(Adapter((src, dst_id), steps, got.channels,
                                     dst_expected.channels, dst_expected.height,
                                     dst_expected.width))

    def place_shape(self, node_id: int, shape: ShapeState) -> None:
        assert node_id == len(self.shapes)
        self.shapes.append(shape)

    def add_block_instance(self, width: int, inputs: list[int], spatial: tuple[int, int],
                           stage=-1) -> int:
        node_id = self.add_node("block", "block", width, stage=stage)
        expected = ShapeState(spatial[0], spatial[1], width)
        for src in inputs:
            self.connect(src, expected, node_id)
        self.place_shape(node_id, ShapeState(spatial[0], spatial[1],
                                             width * self.multiple))
        return node_id

    def add_pool(self, op: str, kernel: int, inputs: list[int],
                 spatial: tuple[int, int], channels: int, stage=-1) -> int:
        node_id = self.add_node("pool", op, channels, kernel=kernel, stride=2,
                                stage=stage)
        expected = ShapeState(spatial[0], spatial[1], channels)
        for src in inputs:
            self.connect(src, expected, node_id)
        self.place_shape(node_id, ShapeState(_halved(spatial[0]),
                                             _halved(spatial[1]), channels))
        return node_id

    def add_head(self, src: int) -> int:
        node_id = self.add_node("head", "gap_linear", self.num_classes)
        self.edges.append((src, node_id))
        self.place_shape(node_id, ShapeState(1, 1, self.num_classes))
        return node_id

    def finish(self, kind: str) -> NetworkPlan:
        return NetworkPlan(kind, tuple(self.block_body), tuple(self.nodes),
                           tuple(self.edges), tuple(self.adapters),
                           tuple(self.shapes), self.input_shape, self.num_classes)


def stack_network(block: BlockGraph, template: str, n: int, base_width: int = 32,
                  input_shape: tuple[int, int, int] | None = None,
                  num_classes: int = 100) -> NetworkPlan:
    """Repeat the block n times per stage, widths doubling after each pooling."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if template == "cifar":
        stages = 3
        default_input = (32, 32, 3)
        aggressive_stem = False
    elif template == "imagenet":
        stages = 4
        default_input = (224, 224, 3)
        aggressive_stem = True
    else:
        raise ValueError(f"unknown template name {template!r}")
    h, w, c = input_shape or default_input
    builder = _PlanBuilder(block, ShapeState(h, w, c), num_classes)

    stem_stride = 2 if aggressive_stem else 1
    stem = builder.add_node("stem", "conv", base_width, kernel=3, stride=stem_stride)
    sh, sw = (_halved(h), _halved(w)) if aggressive_stem else (h, w)
    builder.place_shape(stem, ShapeState(sh, sw, base_width))
    prev = stem
    if aggressive_stem:
        prev = builder.add_pool("max_pool", 3, [stem], (sh, sw), base_width)
        sh, sw = _halved(sh), _halved(sw)

    for stage in range(stages):
        width = base_width * (2 ** stage)
        if stage > 0:
            prev = builder.add_pool("max_pool", 3, [prev], (sh, sw),
                                    builder.out_shape(prev).channels, stage=stage)
            sh, sw = _halved(sh), _halved(sw)
        for _ in range(n):
            prev = builder.add_block_instance(width, [prev], (sh, sw), stage=stage)
    builder.add_head(prev)
    return builder.finish(f"stack:{template}")


#: "kernel" slot of a connection-space block entry -> channel width.
DEFAULT_CONNECTION_WIDTHS = (32, 64, 128)


def build_connection_network(codes: Sequence[LayerCode], block: BlockGraph,
                             widths: tuple[int, ...] = DEFAULT_CONNECTION_WIDTHS,
                             input_shape: tuple[int, int, int] = (32, 32, 3),
                             num_classes: int = 100,
                             limits: CodeSpaceLimits | None = None) -> NetworkPlan:
    """Wire block instances per a connection-space code list.

    Entries are chained sequentially; predecessor fields add extra edges
    (0 points at the stem, the immediate predecessor adds nothing new).
    Every edge whose endpoints disagree in channels or spatial size gets an
    explicit adapter: stride-2 pooling steps plus a 1x1 projection.
    """
    limits = limits or connection_code_space()
    body = body_codes(codes)
    _validate_body(body, connection_code_space(
        max(len(body) + 2, limits.max_layer_index), limits.max_pooling_layers))
    if len(body) + 1 > limits.max_layer_index:
        raise StructureError(
            f"{len(body)} entries exceed max_layer_index {limits.max_layer_index}")
    poolings = sum(1 for c in body
                   if c.op_type in (OpType.MAX_POOLING, OpType.AVERAGE_POOLING))
    if limits.max_pooling_layers is not None and poolings > limits.max_pooling_layers:
        raise LimitError(f"{poolings} pooling entries exceed the limit of "
                         f"{limits.max_pooling_layers}")

    h, w, c = input_shape
    builder = _PlanBuilder(block, ShapeState(h, w, c), num_classes)
    first_block = next((e for e in body if e.op_type == OpType.CONVOLUTION), None)
    stem_width = widths[first_block.kernel - 1] if first_block else widths[0]
    stem = builder.add_node("stem", "conv", stem_width, kernel=3, stride=1)
    builder.place_shape(stem, ShapeState(h, w, stem_width))

    ids = [stem]  # ids[i] is the plan node of entry i (ids[0] = stem)
    spatial = (h, w)
    for i, entry in enumerate(body, start=1):
        chain_src = ids[i - 1]
        inputs = [chain_src]
        # pred1 == previous entry just restates the chain; anything else is an
        # extra edge (0 points at the stem).  pred2 is unused in this space.
        if entry.pred1 != i - 1:
            inputs.append(ids[entry.pred1])
        if entry.op_type == OpType.CONVOLUTION:
            node = builder.add_block_instance(widths[entry.kernel - 1], inputs, spatial)
        else:
            op = "max_pool" if entry.op_type == OpType.MAX_POOLING else "avg_pool"
            node = builder.add_pool(op, entry.kernel, inputs, spatial,
                                    builder.out_shape(chain_src).channels)
            spatial = (_halved(spatial[0]), _halved(spatial[1]))
        ids.append(node)
    builder.add_head(ids[-1])
    return builder.finish("connection")


# ---------------------------------------------------------------------------
# JSON export
# ---------------------------------------------------------------------------

def graph_to_json(graph: BlockGraph) -> dict:
    return {
        "input_channels": graph.input_channels,
        "codes": [list(code) for code in graph.codes],
        "nodes": [{"id": n.node_id, "op_type": n.op_type, "kernel": n.kernel,
                   "channels": n.channels, "primitives": list(n.primitives)}
                  for n in graph.nodes],
        "edges": [list(e) for e in graph.edges],
        "input": graph.input_id,
        "output": graph.output_id,
    }


def plan_to_json(plan: NetworkPlan) -> dict:
    return {
        "kind": plan.kind,
        "block_codes": [list(code) for code in plan.block_codes],
        "nodes": [{"id": n.node_id, "kind": n.kind, "op": n.op, "width": n.width,
                   "kernel": n.kernel, "stride": n.stride, "stage": n.stage}
                  for n in plan.nodes],
        "edges": [list(e) for e in plan.edges],
        "adapters": [{"from": a.edge[0], "to": a.edge[1], "pool_steps": a.pool_steps,
                      "in_channels": a.in_channels, "out_channels": a.out_channels,
                      "out_height": a.out_height, "out_width": a.out_width}
                     for a in plan.adapters],
        "shapes": [{"id": i, "height": s.height, "width": s.width,
                    "channels": s.channels} for i, s in enumerate(plan.shapes)],
        "input_shape": [plan.input_shape.height, plan.input_shape.width,
                        plan.input_shape.channels],
        "num_classes": plan.num_classes,
    }
