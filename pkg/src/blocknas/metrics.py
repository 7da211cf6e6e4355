"""FLOPs, DAG density, and parameter counts for blocks and network plans.

Conventions: one multiply-accumulate is one FLOP; pooling, ReLU, batchnorm
and elementwise ops count zero FLOPs.  Convolutions carry no bias (the
batchnorm that follows them subsumes it), so a conv contributes
``k^2 * c_in * c_out`` parameters plus ``2 * c_out`` for the affine
batchnorm.  Rewards are computed on the block alone at one canonical input
shape so that every candidate is penalized on equal footing.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .codes import LayerCode, OpType
from .graphs import BlockGraph, NetworkPlan, ShapeState, build_block


@dataclass(frozen=True)
class ComplexityReport:
    flops: int
    density: Fraction
    params: int

    def to_json(self) -> dict:
        return {"flops": self.flops, "params": self.params,
                "density": [self.density.numerator, self.density.denominator]}


#: Input shape used when scoring a bare block for the composite reward.
CANONICAL_BLOCK_SHAPE = ShapeState(32, 32, 32)


def node_flops(graph: BlockGraph, node_id: int, spatial: tuple[int, int]) -> int:
    """MAC count of one block node at the given (constant) spatial size."""
    node = graph.nodes[node_id]
    if node.op_type != OpType.CONVOLUTION:
        return 0
    pred = next(u for u, v in graph.edges if v == node_id)
    c_in = graph.nodes[pred].channels
    return node.kernel ** 2 * c_in * node.channels * spatial[0] * spatial[1]


def node_params(graph: BlockGraph, node_id: int) -> int:
    node = graph.nodes[node_id]
    if node.op_type != OpType.CONVOLUTION:
        return 0
    pred = next(u for u, v in graph.edges if v == node_id)
    c_in = graph.nodes[pred].channels
    return node.kernel ** 2 * c_in * node.channels + 2 * node.channels


def count_flops(graph: BlockGraph, input_shape: ShapeState | None = None) -> int:
    """Total MACs of a block; spatial size never changes inside a block."""
    shape = input_shape or CANONICAL_BLOCK_SHAPE
    if shape.channels != graph.input_channels:
        raise ValueError(f"graph was built for {graph.input_channels} input "
                         f"channels, shape says {shape.channels}")
    spatial = (shape.height, shape.width)
    return sum(node_flops(graph, n.node_id, spatial) for n in graph.nodes)


def density(graph) -> Fraction:
    """Edge count over node count, input and implicit output included."""
    return Fraction(len(graph.edges), len(graph.nodes))


def count_params(graph) -> int:
    """Parameters of a block graph or a whole network plan."""
    if isinstance(graph, NetworkPlan):
        return _plan_params(graph)
    return sum(node_params(graph, n.node_id) for n in graph.nodes)


def block_complexity(graph: BlockGraph,
                     input_shape: ShapeState | None = None) -> ComplexityReport:
    return ComplexityReport(count_flops(graph, input_shape), density(graph),
                            count_params(graph))


def exceeds_parameter_budget(graph, budget: int) -> bool:
    return count_params(graph) > budget


# ---------------------------------------------------------------------------
# Network plans: stems, block instances, adapters, head
# ---------------------------------------------------------------------------

def conv_cost(kernel: int, c_in: int, c_out: int, h: int, w: int) -> tuple[int, int]:
    return kernel ** 2 * c_in * c_out * h * w, kernel ** 2 * c_in * c_out + 2 * c_out


def _with_terminal(body: tuple[LayerCode, ...]) -> tuple[LayerCode, ...]:
    return body + (LayerCode(len(body) + 1, int(OpType.TERMINAL), 0, 0, 0),)


def _plan_node_costs(plan: NetworkPlan):
    """Yield (flops, params) per plan node, then per adapter."""
    for node in plan.nodes:
        shape = plan.shapes[node.node_id]
        if node.kind == "stem":
            yield conv_cost(node.kernel, plan.input_shape.channels, node.width,
                             shape.height, shape.width)
        elif node.kind == "block":
            inner = build_block(_with_terminal(plan.block_codes), node.width)
            yield (count_flops(inner, ShapeState(shape.height, shape.width,
                                                 node.width)),
                   count_params(inner))
        elif node.kind == "head":
            src = next(u for u, v in plan.edges if v == node.node_id)
            c_in = plan.shapes[src].channels
            yield 0, c_in * plan.num_classes + plan.num_classes
        else:
            yield 0, 0
    for adapter in plan.adapters:
        yield conv_cost(1, adapter.in_channels, adapter.out_channels,
                         adapter.out_height, adapter.out_width)


def plan_flops(plan: NetworkPlan) -> int:
    return sum(f for f, _ in _plan_node_costs(plan))


def _plan_params(plan: NetworkPlan) -> int:
    return sum(p for _, p in _plan_node_costs(plan))


def plan_complexity(plan: NetworkPlan) -> ComplexityReport:
    return ComplexityReport(plan_flops(plan), density(plan), _plan_params(plan))
