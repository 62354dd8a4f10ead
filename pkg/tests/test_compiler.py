from collections import Counter

import networkx as nx
import pytest
from hypothesis import given

import oracles
from conftest import compiled
from strategies import small_graphs
from tailorforge.compiler import (
    compile,
    compile_report,
    divide_stages,
    fork_join_regions,
    match_blocks,
    parse_operators,
    post_dominators,
)
from tailorforge.errors import CompileError
from tailorforge.fixtures import EXAMPLE_CONFIG, load_fixture, tinynet
from tailorforge.graph import GraphBuilder
from tailorforge.ir import Kind
from tailorforge.modspace import SpaceConfig, count_variants, parse_config
from tailorforge.templates import ACTIVATIONS, FFN_BLOCK, SHIPPED_TEMPLATES, BlockTemplate, P


def ffn_chain():
    b = GraphBuilder("ffn")
    x = b.input((1, 16))
    h = b.op("matmul", x, out_features=64)
    h = b.op("add", h)
    h = b.op("gelu", h)
    h = b.op("matmul", h, out_features=16)
    b.output(b.op("add", h))
    return b.graph()


def residual_fork():
    b = GraphBuilder("fork")
    x = b.input((1, 3, 8, 8))
    stem = b.op("conv2d", x, kernel=3, stride=1, padding=1, out_channels=8)
    t = b.op("conv2d", stem, kernel=3, stride=1, padding=1, out_channels=16)
    t = b.op("relu", t)
    t = b.op("conv2d", t, kernel=3, stride=1, padding=1, out_channels=8)
    h = b.op("add", t, stem)
    b.output(b.op("relu", h))
    return b.graph()


def widths_net(widths=(64, 64, 128, 128, 128)):
    b = GraphBuilder("widths")
    x = b.input((1, 3, 16, 16))
    h = b.op("conv2d", x, kernel=3, stride=1, padding=1, out_channels=widths[0])
    cur = widths[0]
    for w in widths:
        t = b.op("conv2d", h, kernel=3, stride=1, padding=1, out_channels=2 * w)
        t = b.op("relu", t)
        t = b.op("conv2d", t, kernel=3, stride=1, padding=1, out_channels=w)
        skip = h if w == cur else b.op("conv2d", h, kernel=1, stride=1, padding=0, out_channels=w)
        h = b.op("add", t, skip)
        cur = w
    b.output(b.op("global_pool", h))
    return b.graph()


def test_single_relu_is_bypassed():
    b = GraphBuilder("r")
    b.output(b.op("relu", b.input((1, 4))))
    (mod,) = parse_operators(b.graph())
    assert mod.kind == Kind.BYPASS


def test_ffn_chain_operators():
    mods = parse_operators(ffn_chain())
    kinds = Counter(m.kind for m in mods)
    assert kinds == {Kind.OPERATOR: 2, Kind.BYPASS: 3}
    assert [m.node.op for m in mods if m.kind == Kind.OPERATOR] == ["matmul", "matmul"]


def test_residual_fork_becomes_default_block():
    g = residual_fork()
    mods = parse_operators(g)
    blocks = [m for m in mods if not m.is_leaf]
    assert len(blocks) == 1 and blocks[0].template_name == "DefaultBlock"

    # oracle: nodes between the fork's consumers and its immediate post-dominator
    stem = g.nodes[0]
    pdom = oracles.post_dominators(g)
    succ = {c.id for c, _ in g.consumers()[stem.outputs[0]]}
    # the nearest strict post-dominator has the most post-dominators itself
    join = max((n for n in pdom[stem.id] if n not in (stem.id, "<sink>")), key=lambda n: len(pdom[n]))
    dg = nx.DiGraph()
    producer = {e: n.id for n in g.nodes for e in n.outputs}
    dg.add_edges_from((producer[e], n.id) for n in g.nodes for e in n.inputs if e in producer)
    region = {join} | {n for s in succ for n in ({s} | nx.descendants(dg, s)) if n in nx.ancestors(dg, join)}
    assert set(blocks[0].source_nodes) == region


@given(small_graphs())
def test_post_dominators_match_networkx(g):
    ours = {k: set(v) for k, v in post_dominators(g).items()}
    assert ours == oracles.post_dominators(g)


@given(small_graphs())
def test_fork_join_regions_are_disjoint(g):
    regions = fork_join_regions(g)
    seen = set()
    for r in regions:
        assert not (seen & r)
        seen |= r


def test_ffn_chain_matches_ffn_template():
    g = ffn_chain()
    (blk,) = match_blocks(parse_operators(g), [FFN_BLOCK], graph_outputs=g.outputs)
    assert blk.template_name == "FFNBlock"
    assert [h.name for h in blk.hooks] == ["expand_ratio"]
    assert blk.feature.meta("expand_ratio") == 4


def test_empty_template_list_is_identity():
    mods = parse_operators(tinynet())
    assert match_blocks(mods, []) == mods


def test_tinynet_auto_matching():
    model, _ = compile(tinynet())
    counts = Counter(b.template_name for b in model.blocks())
    assert counts == {"ResidualConvBlock": 3, "FFNBlock": 1}
    assert len(model.stages()) == 2


def test_widths_split_into_two_stages():
    g = widths_net()
    mods = match_blocks(parse_operators(g), SHIPPED_TEMPLATES, graph_outputs=g.outputs)
    model = divide_stages(mods, g)
    stages = model.stages()
    assert [len(s.children) for s in stages] == [2, 3]
    assert [s.feature.meta("depth") for s in stages] == [2, 3]
    # the projection-shortcut block opens the wider stage
    assert stages[1].children[0].template_name == "DefaultBlock"


def test_uniform_blocks_form_one_stage():
    g = widths_net((32, 32, 32))
    model, _ = compile(g)
    assert [len(s.children) for s in model.stages()] == [3]


def test_example_config_on_tinynet():
    model, space = compile(tinynet(), parse_config(EXAMPLE_CONFIG))
    dims = {d.dim_id: d.candidates for d in space.dims}
    assert dims == {
        "global/resolution": (128, 160, 192, 224),
        # stage[0] holds three blocks, so reduce_depth=-3 would empty it
        "stage[0]/reduce_depth": (-2, -1, 0),
        "stage[1]/block[0]/expand_ratio": (2, 3, 4),
    }
    report = compile_report(model, space)
    assert "  FFNBlock: 1" in report.splitlines()
    assert count_variants(space, model) == 4 * 3 * 3


def test_empty_var_sections():
    model, space = compile(tinynet(), parse_config('title = "t"\n[var.global_vars]\n[var.block_vars]\n'))
    assert len(space) == 0
    assert count_variants(space, model) == 1


def test_unknown_template_is_unsatisfiable():
    with pytest.raises(CompileError, match="TransformerBlock"):
        compile(tinynet(), parse_config('[arch]\nblocks = ["TransformerBlock"]\n'))


def test_template_without_matches_is_unsatisfiable():
    with pytest.raises(CompileError, match="AttentionBlock"):
        compile(tinynet(), parse_config('[arch]\nblocks = ["AttentionBlock"]\n'))
    with pytest.raises(CompileError, match="InvertedResidualBlock"):
        compile(tinynet(), parse_config("[var.block_vars]\nInvertedResidualBlock.expand_ratio = [2, 4]\n"))


def test_forced_overlap_names_nodes():
    stem_res = BlockTemplate("StemResidual", (
        P("stem", "conv2d", "entry"),
        P("conv1", "conv2d", "stem"),
        P("act", ACTIVATIONS, "conv1"),
        P("conv2", "conv2d", "act"),
        P("residual", "add", "conv2", "stem"),
    ))
    cfg = parse_config('[arch]\nblocks = ["ResidualConvBlock", "StemResidual"]\n')
    with pytest.raises(CompileError) as err:
        compile(tinynet(), cfg, templates=SHIPPED_TEMPLATES + (stem_res,))
    msg = str(err.value)
    assert "overlap" in msg and "conv2d_1" in msg and "add_4" in msg


def test_reduce_depth_legality():
    _, model, space = compiled("tinynet-4s")
    for d in space.dims:
        if d.scope == "stage":
            assert all(d.depth + r >= 1 for r in d.candidates)


def test_node_conservation_and_determinism(fixture_net):
    name, g, model, space = fixture_net
    assert sorted(n for leaf in model.leaves() for n in leaf.source_nodes) == sorted(n.id for n in g.nodes)
    again_model, again_space = compile(g, load_fixture(name)[1])
    assert compile_report(again_model, again_space) == compile_report(model, space)


def test_report_counts():
    _, model, space = compiled("tinynet-4s")
    lines = compile_report(model, space).splitlines()
    assert "nodes: 50" in lines
    assert "stages: 4" in lines
    assert "variants: 20736" in lines


def test_custom_ops_are_flagged():
    b = GraphBuilder("custom")
    x = b.input((1, 4, 8, 8))
    b.output(b.op("custom:swish", x))
    model, space = compile(b.graph(), SpaceConfig())
    report = compile_report(model, space)
    assert "custom_ops: 1" in report
