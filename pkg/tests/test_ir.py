import pytest
from hypothesis import given

import oracles
from conftest import FIXTURE_NAMES, compiled
from strategies import specs
from tailorforge.compiler import compile
from tailorforge.errors import LegalityError, NotUpdatedError, TransformError
from tailorforge.fixtures import with_declared_shapes
from tailorforge.graph import GraphBuilder, export_graph, graph_isomorphic
from tailorforge.ir import Kind, Modification, build, infer_shapes, transform, update
from tailorforge.modspace import SpaceConfig, apply_modifications, apply_subnet, parse_config


def residual_stack(n_blocks, channels=8, hw=16):
    b = GraphBuilder(f"stack{n_blocks}")
    x = b.input((1, 3, hw, hw))
    h = b.op("conv2d", x, kernel=3, stride=1, padding=1, out_channels=channels)
    for _ in range(n_blocks):
        t = b.op("conv2d", h, kernel=3, stride=1, padding=1, out_channels=4 * channels)
        t = b.op("relu", t)
        t = b.op("conv2d", t, kernel=3, stride=1, padding=1, out_channels=channels)
        h = b.op("add", t, h)
    b.output(b.op("global_pool", h))
    return b.graph()


def test_transform_sets_active_expand_ratio():
    _, model, _ = compiled("tinynet")
    ffn = model.find("stage[1]/block[0]")
    assert ffn.template_name == "FFNBlock"
    assert ffn.feature.meta("expand_ratio") == 4
    out = transform(model, Modification("stage[1]/block[0]/expand_ratio", 2))
    assert out.find("stage[1]/block[0]").feature.active("expand_ratio") == 2
    assert out.find("stage[1]/block[0]").feature.meta("expand_ratio") == 4
    # other attrs untouched, propagation pending
    assert out.feature == model.feature
    assert not out.updated


def test_stage_depth_reduction_marks_last_blocks_inactive():
    g = residual_stack(4)
    model, _ = compile(g, parse_config("[arch]\nblocks = [\"ResidualConvBlock\"]\n"))
    stage = model.find("stage[0]")
    assert stage.feature.meta("depth") == 4
    out = update(transform(model, Modification("stage[0]/reduce_depth", -2)))
    stage = out.find("stage[0]")
    assert stage.feature.active("depth") == 2
    assert [c.active for c in stage.children] == [True, True, False, False]
    assert len(build(out).nodes) == len(g.nodes) - 2 * 4


def test_update_propagates_resolution_to_elementwise_ops():
    _, model, _ = compiled("tinynet")
    out = apply_modifications(model, {"global/resolution": 160})
    relu = next(m for m in out.walk() if m.is_leaf and m.node.op == "relu")
    shape = relu.feature.out_shapes[0]
    assert shape.meta.dims == (1, 64, 112, 112)
    assert shape.active.dims == (1, 64, 80, 80)
    assert all(s.meta == s.active for s in relu.feature.attrs.values())


def test_conv_arithmetic():
    b = GraphBuilder("conv")
    x = b.input((1, 3, 224, 224))
    b.output(b.op("conv2d", x, kernel=3, stride=2, padding=1, out_channels=32))
    model, _ = compile(b.graph())
    (shapes,) = infer_shapes(model).values()
    assert shapes["out_shapes"][0].dims == (1, 32, 112, 112)


def test_no_modifications_keeps_meta_shapes():
    g, model, _ = compiled("tinynet")
    for m in model.walk():
        for slot in m.feature.in_shapes + m.feature.out_shapes:
            assert slot.meta == slot.active
    shapes = infer_shapes(model)
    path = model.structure.leaf_path
    for n in g.nodes:
        assert shapes[path[n.id]]["out_shapes"] == tuple(g.edges[e] for e in n.outputs)


def test_build_requires_update():
    _, model, _ = compiled("tinynet")
    pending = transform(model, Modification("global/resolution", 128))
    with pytest.raises(NotUpdatedError):
        build(pending)
    with pytest.raises(NotUpdatedError):
        infer_shapes(pending)


def test_single_bypass_model_builds_its_input():
    b = GraphBuilder("one")
    x = b.input((1, 4, 8, 8))
    b.output(b.op("relu", x))
    g = b.graph()
    model, _ = compile(g)
    assert [m.kind for m in model.leaves()] == [Kind.BYPASS]
    # build declares every edge shape; the input left its interior edge unshaped
    assert export_graph(build(model)) == export_graph(with_declared_shapes(g))


def test_resolution_128_first_conv():
    _, model, space = compiled("tinynet")
    shapes = infer_shapes(apply_modifications(model, {"global/resolution": 128}, space))
    assert shapes["op[0]"]["out_shapes"][0].dims == (1, 16, 64, 64)


def test_tinynet_1s_depth_reduction_node_count():
    g, model, space = compiled("tinynet-1s")
    built = apply_subnet(model, {"stage[0]/reduce_depth": -2}, space)
    assert len(built.nodes) == len(g.nodes) - 2 * 4
    stage = model.find("stage[0]")
    kept = set(stage.children[0].source_nodes)
    stage_nodes = {n.id for n in built.nodes} & set(stage.source_nodes)
    assert stage_nodes == kept


def test_shape_contradiction_reports_both_paths():
    b = GraphBuilder("rigid")
    x = b.input((1, 3, 16, 16))
    h = b.op("conv2d", x, kernel=3, stride=1, padding=1, out_channels=4)
    h = b.op("reshape", h, shape=[1, 4, 256])
    b.output(b.op("softmax", h))
    model, _ = compile(b.graph(), SpaceConfig())
    with pytest.raises(LegalityError) as err:
        update(transform(model, Modification("global/resolution", 8)))
    assert list(err.value.paths) == ["op[1]", "op[0]"]


@pytest.mark.parametrize("mod", [
    Modification("stage[9]/reduce_depth", -1),
    Modification("global/resolution", 999),
    Modification("stage[0]/reduce_depth", -3),
    Modification("stage[0]/block[0]/expand_ratio", 7),
    Modification("stage[0]/block[0]/kernel", 3),
])
def test_transform_errors(mod):
    _, model, _ = compiled("tinynet-1s")
    with pytest.raises(TransformError):
        transform(model, mod)


# ---------------------------------------------------------------------------
# properties


@pytest.mark.parametrize("name", FIXTURE_NAMES)
def test_shape_oracle_equivalence(name):
    _, model, space = compiled(name)
    path = model.structure.leaf_path

    @given(specs(space))
    def check(spec):
        shapes = infer_shapes(apply_modifications(model, spec, space))
        expected = oracles.propagate(apply_subnet(model, spec, space))
        assert len(shapes) == len(expected)
        for nid, (ins, outs) in expected.items():
            got = shapes[path[nid]]
            assert [(s.dims, s.dtype) for s in got["in_shapes"]] == ins
            assert [(s.dims, s.dtype) for s in got["out_shapes"]] == outs

    check()


@pytest.mark.parametrize("name", FIXTURE_NAMES)
def test_identity_transform_is_idempotent(name):
    _, model, space = compiled(name)
    for d in space.dims:
        assert update(transform(model, Modification(d.dim_id, d.default))) == model


def test_coverage_partition(fixture_net):
    _, g, model, _ = fixture_net
    owned = [nid for leaf in model.leaves() for nid in leaf.source_nodes]
    assert sorted(owned) == sorted(n.id for n in g.nodes)
    for m in model.walk():
        if not m.is_leaf:
            assert m.children
            assert sorted(m.source_nodes) == sorted(n for c in m.children for n in c.source_nodes)
    paths = [m.path for m in model.walk()]
    assert len(paths) == len(set(paths))


@pytest.mark.parametrize("name", FIXTURE_NAMES)
def test_monotone_legality(name):
    _, model, space = compiled(name)

    @given(specs(space))
    def check(spec):
        apply_subnet(model, spec, space)
        for dim_id in spec:
            relaxed = {k: v for k, v in spec.items() if k != dim_id}
            apply_subnet(model, relaxed, space)

    check()


@pytest.mark.parametrize("name", FIXTURE_NAMES)
def test_active_never_exceeds_meta(name):
    _, model, space = compiled(name)

    @given(specs(space))
    def check(spec):
        tree = apply_modifications(model, spec, space)
        for m in tree.walk():
            for attr, slot in m.feature.attrs.items():
                if attr in ("out_channels", "out_features", "depth", "resolution", "expand_ratio", "attn_ratio"):
                    if slot.active is not None:
                        assert slot.active <= slot.meta

    check()


def test_maximal_build_identity(fixture_net):
    _, g, model, space = fixture_net
    assert graph_isomorphic(build(model), g)
    assert oracles.isomorphic(apply_subnet(model, {}, space), g)
