import numpy as np
import pytest

from blocknas.codes import (
    DEFAULT_BLOCK_SPACE,
    DEFAULT_CONNECTION_SPACE,
    LayerCode,
    OpType,
    parse_block,
)
from blocknas.graphs import (
    LimitError,
    ShapeError,
    StructureError,
    build_block,
    build_connection_network,
    graph_to_json,
    in_degrees,
    out_degrees,
    plan_to_json,
    stack_network,
    topo_order,
    topology_fingerprint,
)

from reference_impls import (
    channel_multiples,
    dependency_respecting_shuffle,
    fingerprint_oracle,
    interpret_codes,
    random_body,
)

SHORTCUT = parse_block("1,1,3,0,0;2,1,3,1,0;3,4,0,0,0;4,5,0,2,3;5,7,0,0,0")
IDENTITY_BLOCK = parse_block("1,7,0,0,0")


def check_block_invariants(graph):
    """Independent invariant audit used by the fuzz tests."""
    ids = [n.node_id for n in graph.nodes]
    assert ids == list(range(len(ids)))
    assert all(u < v for u, v in graph.edges), "edges must go forward"
    indeg = in_degrees(graph)
    outdeg = out_degrees(graph)
    for node in graph.nodes:
        if node.node_id == graph.input_id:
            assert indeg[node.node_id] == 0
        elif node.node_id == graph.output_id:
            assert indeg[node.node_id] >= 1
            assert outdeg[node.node_id] == 0
        elif node.op_type in (5, 6):
            assert indeg[node.node_id] == 2
        else:
            assert indeg[node.node_id] == 1
        if node.node_id != graph.output_id:
            assert outdeg[node.node_id] >= 1, "every node must reach the output"


def test_shortcut_block_topology():
    graph = build_block(SHORTCUT, 32)
    assert len(graph.nodes) == 6
    add_nodes = [n for n in graph.nodes if n.op_type == 5]
    assert len(add_nodes) == 1
    add_id = add_nodes[0].node_id
    feeders = sorted(u for u, v in graph.edges if v == add_id)
    assert feeders == [2, 3]  # conv chain end and the identity path
    assert (add_id, graph.output_id) in graph.edges
    assert graph.nodes[3].op_type == 4 and (0, 3) in graph.edges


def test_terminal_only_block_is_identity():
    graph = build_block(IDENTITY_BLOCK, 48)
    assert graph.depth == 0
    assert graph.output_channels == 48
    assert graph.edges == ((0, 1),)


def test_conv_expansion_records_preactivation_order():
    graph = build_block(SHORTCUT, 32)
    assert graph.nodes[1].primitives == ("relu", "conv", "batchnorm")
    assert graph.nodes[3].primitives == ("identity",)


def test_add_channel_mismatch_names_both_layers():
    codes = parse_block("1,1,3,0,0;2,6,0,0,1;3,5,0,2,1;4,7,0,0,0")
    with pytest.raises(ShapeError) as err:
        build_block(codes, 32)
    message = str(err.value)
    assert "layer 2" in message and "layer 1" in message


def test_missing_terminal_is_structure_error():
    with pytest.raises(StructureError):
        build_block(parse_block("1,1,3,0,0"), 32)
    with pytest.raises(StructureError):
        build_block((), 32)


def test_layer_index_mismatch_is_structure_error():
    codes = (LayerCode(2, 1, 3, 1, 0), LayerCode(2, 7, 0, 0, 0))
    with pytest.raises(StructureError):
        build_block(codes, 32)


def test_random_lists_match_independent_interpreter():
    rng = np.random.default_rng(11)
    checked = 0
    while checked < 300:
        codes = random_body(rng, DEFAULT_BLOCK_SPACE, max_len=10)
        body = list(codes[:-1])
        if channel_multiples(body) is None:
            with pytest.raises(ShapeError):
                build_block(codes, 32)
            continue
        graph = build_block(codes, 32)
        node_count, edge_count, leaves = interpret_codes(body)
        assert len(graph.nodes) == node_count
        assert len(graph.edges) == edge_count
        got_leaves = sorted(u for u, v in graph.edges if v == graph.output_id)
        assert got_leaves == (leaves or [0])
        checked += 1


def test_build_fuzz_invariants():
    rng = np.random.default_rng(5)
    built = 0
    for _ in range(1500):
        codes = random_body(rng, DEFAULT_BLOCK_SPACE)
        try:
            graph = build_block(codes, 32)
        except ShapeError:
            continue
        check_block_invariants(graph)
        built += 1
    assert built > 300


def test_channel_rule():
    # conv resets to block width; concat sums; identity/pool preserve
    codes = parse_block("1,1,1,0,0;2,6,0,0,1;3,2,3,2,0;4,1,5,3,0;5,7,0,0,0")
    graph = build_block(codes, 16)
    assert [n.channels for n in graph.nodes] == [16, 16, 32, 32, 16, 16]


def test_topo_order_chain():
    graph = build_block(parse_block("1,1,3,0,0;2,1,3,1,0;3,1,3,2,0;4,7,0,0,0"), 8)
    assert topo_order(graph) == (0, 1, 2, 3, 4)


def test_topo_order_multibranch_before_concat():
    codes = parse_block("1,1,3,0,0;2,1,5,0,0;3,6,0,1,2;4,7,0,0,0")
    graph = build_block(codes, 8)
    order = topo_order(graph)
    assert order.index(3) > order.index(1) and order.index(3) > order.index(2)


def test_topo_order_respects_edges_on_random_blocks():
    rng = np.random.default_rng(3)
    done = 0
    while done < 500:
        codes = random_body(rng, DEFAULT_BLOCK_SPACE, max_len=12)
        try:
            graph = build_block(codes, 32)
        except ShapeError:
            continue
        pos = {node: i for i, node in enumerate(topo_order(graph))}
        assert all(pos[u] < pos[v] for u, v in graph.edges)
        done += 1


def test_fingerprint_matches_oracle_and_relabeling_invariance():
    rng = np.random.default_rng(9)
    done = 0
    while done < 200:
        codes = random_body(rng, DEFAULT_BLOCK_SPACE, max_len=9)
        body = list(codes[:-1])
        if channel_multiples(body) is None:
            continue
        graph = build_block(codes, 32)
        assert topology_fingerprint(graph) == fingerprint_oracle(body)
        shuffled = dependency_respecting_shuffle(body, rng)
        shuffled_codes = tuple(shuffled) + (
            LayerCode(len(shuffled) + 1, 7, 0, 0, 0),)
        assert topology_fingerprint(build_block(shuffled_codes, 32)) == \
            topology_fingerprint(graph)
        done += 1


# ---------------------------------------------------------------------------
# Stacked plans
# ---------------------------------------------------------------------------

def propagate_plan_shapes(plan):
    """Independent shape oracle: recompute every node's output shape."""
    shapes = {}
    preds = {n.node_id: [] for n in plan.nodes}
    for u, v in plan.edges:
        preds[v].append(u)
    adapters = {a.edge: a for a in plan.adapters}
    for node in plan.nodes:
        if node.kind == "stem":
            h = plan.input_shape.height
            w = plan.input_shape.width
            if node.stride == 2:
                h, w = (h + 1) // 2, (w + 1) // 2
            shapes[node.node_id] = (h, w, node.width)
            continue
        inputs = []
        for u in preds[node.node_id]:
            shape = shapes[u]
            adapter = adapters.get((u, node.node_id))
            if adapter is not None:
                h, w, _ = shape
                for _ in range(adapter.pool_steps):
                    h, w = (h + 1) // 2, (w + 1) // 2
                shape = (h, w, adapter.out_channels)
            inputs.append(shape)
        assert len(set(inputs)) == 1, f"unequal inputs at {node.node_id}: {inputs}"
        h, w, c = inputs[0]
        if node.kind == "block":
            assert c == node.width, "block instances take exactly their width"
            m = build_block(plan.block_codes + (LayerCode(
                len(plan.block_codes) + 1, 7, 0, 0, 0),), node.width).output_channels
            shapes[node.node_id] = (h, w, m)
        elif node.kind == "pool":
            shapes[node.node_id] = ((h + 1) // 2, (w + 1) // 2, c)
        else:
            shapes[node.node_id] = (1, 1, plan.num_classes)
    return shapes


def assert_plan_shapes_consistent(plan):
    oracle = propagate_plan_shapes(plan)
    for node_id, (h, w, c) in oracle.items():
        got = plan.shapes[node_id]
        assert (got.height, got.width, got.channels) == (h, w, c)


def test_stack_cifar_counts():
    graph = build_block(SHORTCUT, 32)
    plan = stack_network(graph, "cifar", 4, base_width=32)
    blocks = [n for n in plan.nodes if n.kind == "block"]
    assert len(blocks) == 12
    assert plan.stage_widths() == (32, 64, 128)
    assert plan.pooling_count == 2


def test_stack_single_repeat():
    graph = build_block(SHORTCUT, 32)
    plan = stack_network(graph, "cifar", 1)
    assert sum(1 for n in plan.nodes if n.kind == "block") == 3


def test_stack_unknown_template():
    graph = build_block(SHORTCUT, 32)
    with pytest.raises(ValueError):
        stack_network(graph, "mnist", 2)


def test_stack_spatial_halves_per_pooling():
    graph = build_block(SHORTCUT, 32)
    for template, expected_pools in (("cifar", 2), ("imagenet", 4)):
        plan = stack_network(graph, template, 2)
        assert plan.pooling_count == expected_pools
        assert_plan_shapes_consistent(plan)
        last_block = [n for n in plan.nodes if n.kind == "block"][-1]
        shape = plan.shapes[last_block.node_id]
        expected = plan.input_shape.height // 2 ** plan.pooling_count
        if template == "imagenet":  # stride-2 stem halves once more
            expected //= 2
        assert shape.height == expected


def test_channel_doubling_between_stages():
    graph = build_block(SHORTCUT, 32)
    for n in (1, 2, 4):
        widths = stack_network(graph, "cifar", n, base_width=16).stage_widths()
        assert all(b == 2 * a for a, b in zip(widths, widths[1:]))


def test_identity_block_plan_has_conv_only_in_stem_and_adapters():
    graph = build_block(IDENTITY_BLOCK, 32)
    plan = stack_network(graph, "cifar", 2)
    from blocknas.metrics import count_params, conv_cost
    stem = next(n for n in plan.nodes if n.kind == "stem")
    head_src = next(u for u, v in plan.edges
                    if v == max(n.node_id for n in plan.nodes))
    expected = conv_cost(3, 3, stem.width, 1, 1)[1]
    expected += plan.shapes[head_src].channels * plan.num_classes + plan.num_classes
    for adapter in plan.adapters:
        expected += conv_cost(1, adapter.in_channels, adapter.out_channels, 1, 1)[1]
    assert count_params(plan) == expected


def test_pcc_expansion_count_identity():
    rng = np.random.default_rng(21)
    done = 0
    while done < 100:
        codes = random_body(rng, DEFAULT_BLOCK_SPACE, max_len=10)
        if channel_multiples(list(codes[:-1])) is None:
            continue
        graph = build_block(codes, 32)
        convs = sum(1 for n in graph.nodes if n.op_type == 1)
        non_conv = sum(1 for n in graph.nodes
                       if n.op_type != 1 and n.node_id != graph.input_id)
        total = sum(len(n.primitives) for n in graph.nodes
                    if n.node_id != graph.input_id)
        assert total == 3 * convs + non_conv
        done += 1


# ---------------------------------------------------------------------------
# Connection plans
# ---------------------------------------------------------------------------

def connection_codes(entries):
    codes = [LayerCode(i, op, k, p1, 0)
             for i, (op, k, p1) in enumerate(entries, start=1)]
    codes.append(LayerCode(len(codes) + 1, 7, 0, 0, 0))
    return tuple(codes)


def test_sequential_degenerate_matches_stack_semantics():
    graph = build_block(SHORTCUT, 32)
    # two blocks per stage, widths 32/64/128, pooling between stages
    entries = [(1, 1, 0), (1, 1, 1), (2, 3, 2), (1, 2, 3), (1, 2, 4),
               (2, 3, 5), (1, 3, 6), (1, 3, 7)]
    plan = build_connection_network(connection_codes(entries), graph)
    stack = stack_network(graph, "cifar", 2, base_width=32)

    def essence(p):
        return ([(n.kind, n.op, n.width, n.kernel, n.stride) for n in p.nodes],
                list(p.edges), list(p.adapters), list(p.shapes))

    assert essence(plan) == essence(stack)


def test_extra_edge_across_pooling_gets_one_adapter():
    graph = build_block(IDENTITY_BLOCK, 32)
    entries = [(1, 1, 0), (2, 3, 1), (1, 1, 1)]  # third entry links back to first
    plan = build_connection_network(connection_codes(entries), graph)
    strided = [a for a in plan.adapters if a.pool_steps > 0]
    assert len(strided) == 1
    assert strided[0].pool_steps == 1
    assert strided[0].edge == (1, 3)
    assert_plan_shapes_consistent(plan)


def test_pooling_budget_enforced():
    graph = build_block(IDENTITY_BLOCK, 32)
    entries = [(2, 3, i) for i in range(6)]
    with pytest.raises(LimitError):
        build_connection_network(connection_codes(entries), graph)


def test_forward_reference_rejected():
    graph = build_block(IDENTITY_BLOCK, 32)
    codes = (LayerCode(1, 1, 1, 0, 0), LayerCode(2, 1, 1, 5, 0),
             LayerCode(3, 7, 0, 0, 0))
    with pytest.raises(StructureError):
        build_connection_network(codes, graph)


def test_random_connection_plans_have_consistent_shapes():
    from blocknas.agent import QTable, sample_trajectory
    rng = np.random.default_rng(17)
    graph = build_block(SHORTCUT, 32)
    table = QTable(DEFAULT_CONNECTION_SPACE)
    for _ in range(200):
        codes = sample_trajectory(table, 1.0, DEFAULT_CONNECTION_SPACE, rng)
        plan = build_connection_network(codes, graph)
        assert plan.pooling_count <= 5
        assert_plan_shapes_consistent(plan)


def test_json_exports():
    graph = build_block(SHORTCUT, 32)
    doc = graph_to_json(graph)
    assert doc["edges"] and doc["nodes"][0]["op_type"] == 0
    plan = stack_network(graph, "cifar", 2)
    pdoc = plan_to_json(plan)
    assert pdoc["kind"] == "stack:cifar"
    assert len(pdoc["shapes"]) == len(plan.nodes)
