import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from difftl.graph import (
    GraphError,
    HeadSpec,
    InvalidCutoffError,
    LayerGraph,
    LayerNode,
    block_boundaries,
    complexity_table,
    count_macs,
    count_params,
    enumerate_truncation_points,
    format_table,
)
from difftl.zoo import plain_convnet, reflect_units, torchvision_resnet


@pytest.fixture(scope="module")
def resnet50_graph():
    return torchvision_resnet("resnet50").graph(HeadSpec(2, pooled=True))


def conv(i, cin, cout, hw=4, k=3, span=None, **kw):
    return LayerNode(i, "conv", cout, cin, (hw, hw), (k, k), skip_span=span, **kw)


# --- examples -----------------------------------------------------------------------

def test_resnet50_has_17_points_and_block_ends(resnet50_graph):
    points = enumerate_truncation_points(resnet50_graph)
    assert len(points) == 17
    assert [p.layer_index for p in block_boundaries(resnet50_graph)] == [4, 33, 71, 127, 156]
    assert points[-1].layer_index == len(resnet50_graph)


def test_resnet50_full_counts(resnet50_graph):
    assert count_params(resnet50_graph) == pytest.approx(23.5e6, rel=0.02)
    assert count_macs(resnet50_graph) == pytest.approx(4.12e9, rel=0.02)


def test_resnet50_block3_truncation_counts(resnet50_graph):
    assert count_params(resnet50_graph, 127) == pytest.approx(8.55e6, rel=0.02)
    assert count_macs(resnet50_graph, 127) == pytest.approx(3.31e9, rel=0.02)


def test_plain_three_conv_net_every_layer_is_a_point():
    g = plain_convnet((3, 4, 8, 16)).graph()
    assert [p.layer_index for p in enumerate_truncation_points(g)] == [1, 2, 3]


def test_single_residual_unit_points():
    nodes = [conv(1, 3, 4)] + [conv(i, 4, 4, span=(2, 4)) for i in (2, 3, 4)]
    g = LayerGraph(tuple(nodes), (("b1", 1, 4),))
    assert [p.layer_index for p in enumerate_truncation_points(g)] == [1, 4]


def test_one_conv_with_linear_head_params():
    g = LayerGraph((conv(1, 3, 8),), (("b1", 1, 1),), HeadSpec(2, pooled=True), (3, 4, 4))
    assert count_params(g) == 3 * 3 * 3 * 8 + 8 * 2 + 2 == 234


def test_one_conv_macs_by_hand():
    node = conv(1, 3, 8, hw=4)
    assert node.macs == 4 * 4 * 8 * 3 * 9 == 3456
    g = LayerGraph((node,), (("b1", 1, 1),), HeadSpec(2), (3, 4, 4))
    assert count_macs(g) - g.head.macs(8, (4, 4)) == 3456


def test_bias_counted_when_present():
    g = plain_convnet((3, 4), bias=True).graph(HeadSpec(2))
    assert count_params(g) == 3 * 4 * 9 + 4 + 4 * 2 + 2


def test_resnet50_head_delta_vs_source_classifier(resnet50_graph):
    source = count_params(resnet50_graph, head=HeadSpec(1000))
    target = count_params(resnet50_graph, head=HeadSpec(2))
    assert source - target == (1000 - 2) * 2048 + (1000 - 2)


# --- errors ---------------------------------------------------------------------------

def test_cutoff_inside_span_names_the_span():
    nodes = [conv(1, 3, 4)] + [conv(i, 4, 4, span=(2, 4)) for i in (2, 3, 4)]
    g = LayerGraph(tuple(nodes), (("b1", 1, 4),))
    with pytest.raises(InvalidCutoffError, match=r"\(2, 4\)"):
        count_params(g, 3)


def test_missing_spatial_metadata_names_layer():
    node = LayerNode(1, "conv", 4, 3, None, (3, 3), name="stem.conv")
    g = LayerGraph((node,), (("b1", 1, 1),), input_shape=(3, 4, 4))
    with pytest.raises(GraphError, match="stem.conv"):
        count_macs(g)


def test_macs_need_input_shape():
    g = LayerGraph((conv(1, 3, 4),), (("b1", 1, 1),))
    with pytest.raises(GraphError, match="input_shape"):
        count_macs(g)


@pytest.mark.parametrize("blocks", [(("a", 1, 1),), (("a", 1, 1), ("b", 3, 3)), (("a", 2, 3),)])
def test_blocks_must_partition(blocks):
    nodes = tuple(conv(i, 4, 4) for i in (1, 2, 3))
    with pytest.raises(GraphError):
        LayerGraph(nodes, blocks)


def test_indices_must_be_contiguous():
    with pytest.raises(GraphError, match="contiguous"):
        LayerGraph((conv(1, 3, 4), conv(3, 4, 4)), (("a", 1, 2),))


def test_grouped_conv_divisibility():
    with pytest.raises(GraphError, match="groups"):
        LayerNode(1, "conv", 6, 4, (2, 2), (3, 3), groups=4)


def test_shared_parametric_module_rejected():
    import torch.nn as nn

    shared = nn.Conv2d(4, 4, 3, padding=1)
    with pytest.raises(GraphError, match="shared"):
        reflect_units([("a", "b1", shared), ("b", "b1", shared)], (4, 4, 4))


# --- serialization and table -------------------------------------------------------------

def test_graph_round_trip(tmp_path, resnet50_graph):
    path = tmp_path / "g.json"
    resnet50_graph.save(path)
    doc = json.loads(path.read_text())
    assert doc["format"] == "difftl-layer-graph" and doc["version"] == 1
    loaded = LayerGraph.load(path)
    assert loaded == resnet50_graph
    assert count_macs(loaded, 127) == count_macs(resnet50_graph, 127)


def test_complexity_table_rows(resnet50_graph):
    rows = complexity_table(resnet50_graph)
    assert len(rows) == 17
    assert rows[-1]["params_m"] == pytest.approx(count_params(resnet50_graph) / 1e6)
    assert "block3" in format_table(rows)


# --- properties -------------------------------------------------------------------------

@st.composite
def random_graphs(draw):
    n_blocks = draw(st.integers(1, 4))
    nodes, blocks = [], []
    cin, hw = 3, draw(st.integers(4, 16))
    for b in range(n_blocks):
        start = len(nodes) + 1
        for _ in range(draw(st.integers(1, 3))):
            residual = draw(st.booleans())
            length = draw(st.integers(2, 4)) if residual else 1
            first = len(nodes) + 1
            span = (first, first + length - 1) if residual else None
            for _ in range(length):
                kind = draw(st.sampled_from(["conv", "conv", "norm", "activation"]))
                i = len(nodes) + 1
                if kind == "conv" or i == 1:
                    cout = draw(st.integers(1, 16))
                    nodes.append(LayerNode(i, "conv", cout, cin, (hw, hw), (3, 3),
                                           bias=draw(st.booleans()), skip_span=span))
                    cin = cout
                else:
                    nodes.append(LayerNode(i, kind, cin, spatial_dims=(hw, hw), skip_span=span))
        blocks.append((f"block{b + 1}", start, len(nodes)))
    head = HeadSpec(draw(st.integers(2, 5)), pooled=draw(st.booleans()))
    return LayerGraph(tuple(nodes), tuple(blocks), head, (3, hw, hw))


@settings(max_examples=60, deadline=None)
@given(random_graphs())
def test_counts_monotone_in_cutoff(g):
    pts = enumerate_truncation_points(g)
    body = [sum(n.params for n in g.layers[: p.layer_index]) for p in pts]
    macs = [sum(n.macs for n in g.layers[: p.layer_index]) for p in pts]
    assert body == sorted(body) and macs == sorted(macs)
    pooled = HeadSpec(g.head.num_outputs, pooled=True)
    if all(g.node(p.layer_index).out_channels <= g.node(pts[-1].layer_index).out_channels for p in pts):
        with_head = [count_params(g, p, pooled) for p in pts]
        assert with_head[-1] == max(with_head)


@settings(max_examples=60, deadline=None)
@given(random_graphs())
def test_params_additive_split(g):
    L = len(g)
    for p in enumerate_truncation_points(g):
        k = p.layer_index
        rest = sum(n.params for n in g.layers[k:])
        head_diff = g.head.params(g.node(L).out_channels, g.node(L).spatial_dims) - g.head.params(
            p.out_channels, p.spatial_dims)
        assert count_params(g, k) + rest + head_diff == count_params(g)


@settings(max_examples=60, deadline=None)
@given(random_graphs())
def test_points_contain_last_layer_and_block_ends(g):
    ks = {p.layer_index for p in enumerate_truncation_points(g)}
    assert len(g) in ks
    assert {e for _, _, e in g.blocks} <= ks
    for k in ks:
        assert g.splitting_span(k) is None


@settings(max_examples=30, deadline=None)
@given(random_graphs())
def test_counting_is_pure(g):
    assert count_params(g) == count_params(g)
    assert count_macs(g) == count_macs(g)
    assert LayerGraph.from_dict(json.loads(json.dumps(g.to_dict()))) == g
