import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import compiled
from strategies import specs
from tailorforge.compiler import compile
from tailorforge.enumerator import (
    DEFAULT_FUSION_RULES,
    FusionRule,
    OperatorFeatureKey,
    dependency_groups,
    enumerate_unique_operators,
    enumerate_with_stats,
    format_fusion_rules,
    format_manifest,
    key_of,
    parse_fusion_rules,
    parse_manifest,
)
from tailorforge.errors import ArtifactError
from tailorforge.graph import GraphBuilder
from tailorforge.modspace import apply_subnet

RULES = [r.pattern for r in DEFAULT_FUSION_RULES]


def brute_force_keys(model, space, fusion):
    owner = model.structure.owner
    out = set()
    for spec in space.iter_specs():
        g = apply_subnet(model, spec, space)
        out.update(oracles.graph_keys(g, RULES if fusion else (), owner))
    return out


def test_single_static_op_has_one_key():
    b = GraphBuilder("one")
    b.output(b.op("conv2d", b.input((1, 3, 8, 8)), kernel=3, stride=1, padding=1, out_channels=4))
    model, space = compile(b.graph())
    keys = enumerate_unique_operators(model, space)
    assert [k.text for k in keys] == [
        'conv2d{"bias":1,"kernel":3,"out_channels":4,"padding":1,"stride":1}|1x3x8x8:float32|1x4x8x8:float32'
    ]


@pytest.mark.parametrize("name", ["tinynet", "tinynet-1s", "tinyvit"])
@pytest.mark.parametrize("fusion", [False, True])
def test_pruned_equals_brute_force(name, fusion):
    _, model, space = compiled(name)
    keys = enumerate_unique_operators(model, space, DEFAULT_FUSION_RULES if fusion else None)
    assert {k.text for k in keys} == brute_force_keys(model, space, fusion)


def test_4s_sampled_keys_are_covered():
    # the exhaustive 4S comparison lives in the acceptance suite
    _, model, space = compiled("tinynet-4s")
    keys = {k.text for k in enumerate_unique_operators(model, space, DEFAULT_FUSION_RULES)}
    rng = random.Random(5)
    for _ in range(50):
        spec = space.normalize({d.dim_id: rng.choice(d.candidates) for d in space.dims})
        g = apply_subnet(model, spec, space)
        assert set(oracles.graph_keys(g, RULES, model.structure.owner)) <= keys


def test_key_of_first_block_conv():
    _, model, space = compiled("tinynet")
    key = key_of("stage[0]/block[0]/op[0]", {"global/resolution": 224}, model, space=space)
    assert key.text == ('conv2d{"bias":1,"kernel":3,"out_channels":64,"padding":1,"stride":1}'
                        "|1x16x112x112:float32|1x64x112x112:float32")


def test_key_of_ignores_unrelated_dims():
    _, model, space = compiled("tinynet-1s")
    path = "stage[0]/block[0]/op[0]"
    a = key_of(path, {"stage[0]/block[1]/expand_ratio": 2}, model, space=space)
    b = key_of(path, {}, model, space=space)
    assert a == b


def test_key_of_dropped_block_is_inactive():
    _, model, space = compiled("tinynet-1s")
    assert key_of("stage[0]/block[2]/op[0]", {"stage[0]/reduce_depth": -1}, model, space=space) is None
    with pytest.raises(KeyError):
        key_of("stage[7]/op[0]", {}, model, space=space)


def test_dependency_sets_tinynet_1s():
    _, model, space = compiled("tinynet-1s")
    deps = dependency_groups(model, space)
    assert deps["stage[0]/block[2]/op[0]"] == {"global/resolution", "stage[0]/block[2]/expand_ratio"}
    assert deps["stage[0]/block[2]/op[3]"] == {"global/resolution"}


@pytest.mark.parametrize("name", ["tinynet", "tinynet-1s", "tinynet-4s", "tinyvit"])
def test_dependency_structure(name):
    _, model, space = compiled(name)
    deps = dependency_groups(model, space)
    assert not any("reduce_depth" in d for ds in deps.values() for d in ds)
    st_ = model.structure
    pooled = False
    for nid in st_.order:
        path = st_.leaf_path[nid]
        if pooled:
            assert "global/resolution" not in deps[path], path
        if st_.nodes[nid].op == "global_pool":
            pooled = True


@pytest.mark.parametrize("name", ["tinynet-1s", "tinynet-4s", "tinyvit"])
def test_dependency_soundness(name):
    """Changing a dim outside an operator's set never changes its key."""
    _, model, space = compiled(name)
    deps = dependency_groups(model, space)
    paths = sorted(deps)

    @settings(max_examples=25)
    @given(specs(space), st.randoms(use_true_random=False))
    def check(spec, rnd):
        path = rnd.choice(paths)
        outside = [d for d in space.dims if d.dim_id not in deps[path] and d.scope != "stage"]
        if not outside:
            return
        dim = rnd.choice(outside)
        other = dict(spec)
        other[dim.dim_id] = rnd.choice(dim.candidates)
        assert key_of(path, spec, model, space=space) == key_of(path, space.normalize(other), model, space=space)

    check()


def test_work_bound_on_4s():
    _, model, space = compiled("tinynet-4s")
    keys, stats = enumerate_with_stats(model, space)
    variants = list(space.iter_specs())
    naive = len(variants) * stats.positions
    assert stats.computations <= stats.bound <= 0.05 * naive
    # active operator count depends only on the depth dims: build one variant per depth setting
    per_depth = {}
    occurrences = 0
    for spec in variants:
        depth = tuple(space.value(spec, d.dim_id) for d in space.dims if d.scope == "stage")
        if depth not in per_depth:
            per_depth[depth] = len(apply_subnet(model, spec, space).nodes)
        occurrences += per_depth[depth]
    assert len(keys) / occurrences <= 0.04


def test_jobs_do_not_change_keys():
    _, model, space = compiled("tinynet-4s")
    one = enumerate_unique_operators(model, space, DEFAULT_FUSION_RULES, jobs=1)
    two = enumerate_unique_operators(model, space, DEFAULT_FUSION_RULES, jobs=2)
    assert one == two


def test_manifest_round_trip():
    _, model, space = compiled("tinyvit")
    keys = enumerate_unique_operators(model, space, DEFAULT_FUSION_RULES)
    text = format_manifest(keys, DEFAULT_FUSION_RULES, "tinyvit")
    back, meta = parse_manifest(text)
    assert set(back) == keys
    assert parse_fusion_rules(meta["fusion_rules"]) == DEFAULT_FUSION_RULES
    assert format_manifest(back, DEFAULT_FUSION_RULES, "tinyvit") == text
    for k in keys:
        assert OperatorFeatureKey.parse(k.text) == k


@pytest.mark.parametrize("text", [
    "",
    "# tailorforge-manifest/9\n",
    "# tailorforge-manifest/1\n# keys: 2\nrelu{}|1:float32|1:float32\n",
    "# tailorforge-manifest/1\nnot a key\n",
])
def test_manifest_errors(text):
    with pytest.raises(ArtifactError):
        parse_manifest(text)


def test_fusion_rule_text():
    assert parse_fusion_rules("default") == DEFAULT_FUSION_RULES
    assert parse_fusion_rules("none") == ()
    assert parse_fusion_rules("cb=conv2d->batchnorm") == (FusionRule("cb", ("conv2d", "batchnorm")),)
    assert parse_fusion_rules(format_fusion_rules(DEFAULT_FUSION_RULES)) == DEFAULT_FUSION_RULES
    with pytest.raises(ArtifactError):
        parse_fusion_rules("relu")
