import copy
import json

import networkx as nx
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from strategies import small_graphs
from tailorforge.errors import GraphParseError, GraphValidationError
from tailorforge.fixtures import CONFIG_FILES, DATA_FILES, data_path, shipped_graph, tinynet
from tailorforge.graph import (
    OP_SCHEMAS,
    ComputationGraph,
    GraphBuilder,
    GraphNode,
    TensorShape,
    export_graph,
    graph_isomorphic,
    load_graph,
    relabel,
)


def doc(nodes, edges, inputs, outputs):
    return json.dumps({"nodes": nodes, "edges": edges, "inputs": inputs, "outputs": outputs})


CONV = {"id": "c", "op": "conv2d", "attrs": {"kernel": 3, "stride": 1, "padding": 1, "out_channels": 8},
        "inputs": ["e0"], "outputs": ["e1"]}


def test_single_conv_document():
    g = load_graph(doc([CONV], {"e0": {"dims": [1, 3, 8, 8], "dtype": "float32"}, "e1": None}, ["e0"], ["e1"]))
    assert len(g.nodes) == 1
    assert len(g.edges) == 2


def test_two_producers_name_the_edge():
    relu = {"id": "r", "op": "relu", "attrs": {}, "inputs": ["e0"], "outputs": ["e1"]}
    with pytest.raises(GraphValidationError) as err:
        load_graph(doc([CONV, relu], {"e0": None, "e1": None}, ["e0"], ["e1"]))
    assert err.value.edge_id == "e1"
    assert "e1" in str(err.value)


def test_tinynet_document_is_a_dag():
    g = load_graph(export_graph(tinynet()))
    assert len(g.nodes) == 18
    dg = nx.DiGraph()
    producer = {e: n.id for n in g.nodes for e in n.outputs}
    dg.add_nodes_from(n.id for n in g.nodes)
    dg.add_edges_from((producer[e], n.id) for n in g.nodes for e in n.inputs if e in producer)
    assert nx.is_directed_acyclic_graph(dg)


@pytest.mark.parametrize(
    "nodes, edges, inputs, outputs, fragment",
    [
        ([{"id": "a", "op": "relu", "attrs": {}, "inputs": ["e1"], "outputs": ["e0"]},
          {"id": "b", "op": "relu", "attrs": {}, "inputs": ["e0"], "outputs": ["e1"]}],
         {"e0": None, "e1": None}, [], ["e1"], "cycle"),
        ([{"id": "a", "op": "relu", "attrs": {}, "inputs": ["zz"], "outputs": ["e1"]}],
         {"e0": None, "e1": None}, ["e0"], ["e1"], "undeclared"),
        ([{"id": "a", "op": "conv2d", "attrs": {"kernel": 3}, "inputs": ["e0"], "outputs": ["e1"]}],
         {"e0": None, "e1": None}, ["e0"], ["e1"], "missing required"),
        ([{"id": "a", "op": "relu", "attrs": {"alpha": 1}, "inputs": ["e0"], "outputs": ["e1"]}],
         {"e0": None, "e1": None}, ["e0"], ["e1"], "unknown attribute"),
        ([{"id": "a", "op": "relu", "attrs": {}, "inputs": ["e0"], "outputs": ["e1"]},
          {"id": "a", "op": "relu", "attrs": {}, "inputs": ["e1"], "outputs": ["e2"]}],
         {"e0": None, "e1": None, "e2": None}, ["e0"], ["e2"], "duplicate node id"),
        ([{"id": "a", "op": "relu", "attrs": {}, "inputs": ["e0"], "outputs": ["e1"]}],
         {"e0": None, "e1": None, "e9": None}, ["e0"], ["e1"], "no producer"),
    ],
)
def test_validation_errors(nodes, edges, inputs, outputs, fragment):
    with pytest.raises(GraphValidationError) as err:
        load_graph(doc(nodes, edges, inputs, outputs))
    assert fragment in str(err.value)


@pytest.mark.parametrize("text", ["{", "[]", '{"nodes": []}', '{"format": "other/9", "nodes": [], "edges": {}, '
                                  '"inputs": [], "outputs": []}'])
def test_parse_errors(text):
    with pytest.raises(GraphParseError):
        load_graph(text)


def test_unknown_op_becomes_custom():
    node = {"id": "x", "op": "swish", "attrs": {"beta": 2}, "inputs": ["e0"], "outputs": ["e1"]}
    g = load_graph(doc([node], {"e0": None, "e1": None}, ["e0"], ["e1"]))
    assert g.nodes[0].op == "custom:swish"
    again = load_graph(export_graph(g))
    assert again.nodes[0].op == "custom:swish"


def test_identity_graph_round_trips_identically():
    b = GraphBuilder("empty")
    x = b.input((1, 3, 4, 4))
    b.output(b.op("identity", x))
    g = b.graph()
    data = export_graph(g)
    assert export_graph(load_graph(data)) == data


def test_tinynet_round_trip_and_determinism():
    g = tinynet()
    data = export_graph(g)
    assert data == export_graph(tinynet())
    assert graph_isomorphic(load_graph(data), g)
    assert oracles.isomorphic(load_graph(data), g)


def test_isomorphism_examples():
    g = tinynet()
    renamed = relabel(g, {n.id: f"node{i}" for i, n in enumerate(g.nodes)}, {e: f"t{e}" for e in g.edges})
    assert graph_isomorphic(g, renamed)
    changed = copy.deepcopy(g)
    first = changed.nodes[0]
    changed.nodes[0] = GraphNode(first.id, first.op, {**first.attrs, "stride": 1}, first.inputs, first.outputs)
    assert not graph_isomorphic(g, changed)
    assert not oracles.isomorphic(g, changed)


def test_shipped_data_files_match_builders():
    for name, builder in DATA_FILES.items():
        assert export_graph(shipped_graph(name)) == export_graph(builder())
    for name, text in CONFIG_FILES.items():
        assert data_path(name).read_text(encoding="utf-8") == text


def test_tensor_shape_text():
    s = TensorShape.parse("1x3x224x224:float16")
    assert s.nbytes == 3 * 224 * 224 * 2
    assert str(s) == "1x3x224x224:float16"
    with pytest.raises(ValueError):
        TensorShape((0, 3))


# ---------------------------------------------------------------------------
# properties


@given(small_graphs())
def test_round_trip_property(g):
    back = load_graph(export_graph(g))
    assert graph_isomorphic(back, g)
    assert export_graph(back) == export_graph(g)


@given(small_graphs(), st.randoms(use_true_random=False))
def test_isomorphism_invariant_under_permutation_and_renaming(g, rnd):
    nodes = list(g.nodes)
    rnd.shuffle(nodes)
    shuffled = ComputationGraph(nodes, dict(g.edges), list(g.inputs), list(g.outputs), dict(g.metadata))
    renamed = relabel(shuffled, {n.id: f"z{rnd.randrange(10**9)}_{i}" for i, n in enumerate(nodes)})
    assert graph_isomorphic(g, g)
    assert graph_isomorphic(g, renamed) and graph_isomorphic(renamed, g)


@given(small_graphs(max_ops=6), small_graphs(max_ops=6))
def test_isomorphism_agrees_with_networkx(a, b):
    assert graph_isomorphic(a, b) == oracles.isomorphic(a, b)
    assert graph_isomorphic(a, b) == graph_isomorphic(b, a)


def _check_invariants(g):
    """Independent restatement of the graph invariants."""
    ids = [n.id for n in g.nodes]
    assert len(ids) == len(set(ids))
    producers = {}
    for e in g.inputs:
        producers[e] = None
    for n in g.nodes:
        assert n.op in OP_SCHEMAS or n.op.startswith("custom:")
        if n.op in OP_SCHEMAS:
            assert set(OP_SCHEMAS[n.op].required) <= set(n.attrs)
        for e in n.inputs + n.outputs:
            assert e in g.edges
        for e in n.outputs:
            assert e not in producers
            producers[e] = n.id
    assert set(producers) == set(g.edges)
    dg = nx.DiGraph()
    dg.add_nodes_from(ids)
    dg.add_edges_from((producers[e], n.id) for n in g.nodes for e in n.inputs if producers.get(e))
    assert nx.is_directed_acyclic_graph(dg)


def _mutate(data, rnd):
    nodes = data["nodes"]
    if not nodes:
        return data
    choice = rnd.randrange(7)
    n = rnd.choice(nodes)
    if choice == 0 and n["attrs"]:
        del n["attrs"][rnd.choice(sorted(n["attrs"]))]
    elif choice == 1:
        n["inputs"] = [rnd.choice(list(data["edges"]) + ["ghost"])]
    elif choice == 2:
        n["outputs"] = [rnd.choice(list(data["edges"]))]
    elif choice == 3:
        n["id"] = rnd.choice(nodes)["id"]
    elif choice == 4:
        n["attrs"]["bogus"] = 1
    elif choice == 5:
        data["outputs"] = [rnd.choice(list(data["edges"]) + ["ghost"])]
    else:
        nodes.remove(n)
    return data


@given(small_graphs(), st.randoms(use_true_random=False))
def test_validation_soundness(g, rnd):
    data = json.loads(export_graph(g))
    for _ in range(rnd.randrange(1, 3)):
        data = _mutate(data, rnd)
    try:
        loaded = load_graph(json.dumps(data))
    except (GraphParseError, GraphValidationError):
        return
    _check_invariants(loaded)

