import dataclasses
from fractions import Fraction

import numpy as np
import pytest

from blocknas.codes import DEFAULT_BLOCK_SPACE, LayerCode, parse_block
from blocknas.graphs import ShapeState, build_block, stack_network
from blocknas.metrics import (
    block_complexity,
    conv_cost,
    count_flops,
    count_params,
    density,
    exceeds_parameter_budget,
    node_flops,
    node_params,
    plan_complexity,
)

from reference_impls import channel_multiples, random_body

SHORTCUT = parse_block("1,1,3,0,0;2,1,3,1,0;3,4,0,0,0;4,5,0,2,3;5,7,0,0,0")


def test_single_conv_flops():
    graph = build_block(parse_block("1,1,3,0,0;2,7,0,0,0"), 32)
    # 3x3 kernel, 32 -> 32 channels, 32x32 spatial, one MAC per FLOP
    assert count_flops(graph, ShapeState(32, 32, 32)) == 9 * 32 * 32 * 32 * 32


def test_identity_block_zero_cost():
    graph = build_block(parse_block("1,7,0,0,0"), 32)
    assert count_flops(graph) == 0
    assert count_params(graph) == 0


def test_two_parallel_1x1_convs():
    graph = build_block(parse_block("1,1,1,0,0;2,1,1,0,0;3,7,0,0,0"), 16)
    assert count_flops(graph, ShapeState(8, 8, 16)) == 2 * (1 * 16 * 16 * 8 * 8)


def test_flops_shape_mismatch_raises():
    graph = build_block(parse_block("1,1,1,0,0;2,7,0,0,0"), 16)
    with pytest.raises(ValueError):
        count_flops(graph, ShapeState(8, 8, 32))


def test_chain_density():
    graph = build_block(parse_block("1,4,0,0,0;2,7,0,0,0"), 8)
    assert density(graph) == Fraction(2, 3)


def test_shortcut_density_hand_count():
    # input->c1->c2->add, input->id->add, add->out: 6 edges over 6 nodes
    assert density(build_block(SHORTCUT, 32)) == Fraction(1, 1)


def test_extra_edge_increases_density():
    graph = build_block(SHORTCUT, 32)
    denser = dataclasses.replace(graph, edges=graph.edges + ((0, graph.output_id),))
    assert density(denser) > density(graph)


def test_conv_params_formula():
    flops, params = conv_cost(3, 32, 64, 1, 1)
    assert params == 9 * 32 * 64 + 2 * 64 == 18560
    assert flops == 9 * 32 * 64


def test_parameter_budget_flag():
    graph = build_block(SHORTCUT, 32)
    plan = stack_network(graph, "cifar", 4)
    budget = count_params(plan)
    assert not exceeds_parameter_budget(plan, budget)
    assert exceeds_parameter_budget(plan, budget - 1)


def test_flops_and_params_additive_over_node_split():
    rng = np.random.default_rng(13)
    done = 0
    while done < 50:
        codes = random_body(rng, DEFAULT_BLOCK_SPACE, max_len=10)
        if channel_multiples(list(codes[:-1])) is None:
            continue
        graph = build_block(codes, 32)
        ids = [n.node_id for n in graph.nodes]
        half = len(ids) // 2
        spatial = (32, 32)
        split_flops = (sum(node_flops(graph, i, spatial) for i in ids[:half])
                       + sum(node_flops(graph, i, spatial) for i in ids[half:]))
        split_params = (sum(node_params(graph, i) for i in ids[:half])
                        + sum(node_params(graph, i) for i in ids[half:]))
        assert split_flops == count_flops(graph, ShapeState(32, 32, 32))
        assert split_params == count_params(graph)
        done += 1


def test_doubling_channels_quadruples_flops():
    rng = np.random.default_rng(29)
    done = 0
    while done < 50:
        codes = random_body(rng, DEFAULT_BLOCK_SPACE, max_len=10)
        if channel_multiples(list(codes[:-1])) is None:
            continue
        narrow = count_flops(build_block(codes, 16), ShapeState(32, 32, 16))
        wide = count_flops(build_block(codes, 32), ShapeState(32, 32, 32))
        assert wide == 4 * narrow
        done += 1


def test_density_stable_under_recomputation_and_relabeling():
    from reference_impls import dependency_respecting_shuffle
    rng = np.random.default_rng(31)
    done = 0
    while done < 50:
        codes = random_body(rng, DEFAULT_BLOCK_SPACE, max_len=9)
        body = list(codes[:-1])
        if channel_multiples(body) is None:
            continue
        graph = build_block(codes, 32)
        assert density(graph) == density(graph)
        shuffled = dependency_respecting_shuffle(body, rng)
        regraph = build_block(tuple(shuffled) + (
            LayerCode(len(shuffled) + 1, 7, 0, 0, 0),), 32)
        assert density(regraph) == density(graph)
        done += 1


def test_complexity_report_json():
    report = block_complexity(build_block(SHORTCUT, 32))
    doc = report.to_json()
    assert doc["flops"] == report.flops
    assert doc["density"] == [1, 1]


def test_plan_complexity_counts_head_and_stem():
    graph = build_block(parse_block("1,7,0,0,0"), 32)
    plan = stack_network(graph, "cifar", 1, base_width=8, num_classes=10)
    report = plan_complexity(plan)
    # stem 3x3 conv 3->8 plus two stage adapters (8->16, 16->32) plus head
    stem = conv_cost(3, 3, 8, 32, 32)
    a1 = conv_cost(1, 8, 16, 16, 16)
    a2 = conv_cost(1, 16, 32, 8, 8)
    assert report.flops == stem[0] + a1[0] + a2[0]
    assert report.params == stem[1] + a1[1] + a2[1] + 32 * 10 + 10
