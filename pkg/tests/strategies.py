"""Hypothesis strategies shared by the test modules."""

import random

from hypothesis import strategies as st

from tailorforge.graph import GraphBuilder
from tailorforge.modspace import sample_subnet

import oracles


@st.composite
def small_graphs(draw, max_ops=10):
    """Random valid image DAGs: convs, elementwise ops, pools and residual adds."""
    b = GraphBuilder(draw(st.sampled_from(["g", "net", "model"])))
    c = draw(st.sampled_from([1, 3, 4]))
    hw = draw(st.sampled_from([8, 16]))
    x = b.input((1, c, hw, hw))
    edges = [(x, ((1, c, hw, hw), "float32"))]
    for _ in range(draw(st.integers(1, max_ops))):
        src, shape = edges[draw(st.integers(0, len(edges) - 1))]
        kind = draw(st.sampled_from(["conv", "relu", "gelu", "bn", "identity", "add", "dw", "pool"]))
        if kind == "conv":
            k = draw(st.sampled_from([1, 3]))
            attrs = dict(kernel=k, stride=1, padding=k // 2, out_channels=draw(st.sampled_from([2, 4, 8])))
            if draw(st.booleans()):
                attrs["bias"] = 0
            e = b.op("conv2d", src, **attrs)
        elif kind == "dw":
            e = b.op("depthwise_conv2d", src, kernel=3, stride=1, padding=1)
        elif kind == "pool":
            if shape[0][2] < 4:
                continue
            e = b.op("pool_max", src, kernel=2, stride=2, padding=0)
        elif kind == "add":
            same = [ed for ed, s in edges if s == shape]
            other = same[draw(st.integers(0, len(same) - 1))]
            e = b.op("add", src, other)
        else:
            e = b.op({"relu": "relu", "gelu": "gelu", "bn": "batchnorm", "identity": "identity"}[kind], src)
        node = b.nodes[-1]
        out = oracles.node_out_shapes(node.op, oracles.full_attrs(node), [dict(edges)[i] for i in node.inputs])[0]
        edges.append((e, out))
    b.output(edges[-1][0])
    return b.graph()


def specs(space, count=1):
    """Strategy of ``count`` legal SubNetSpecs drawn by a seeded sampler."""
    return st.integers(0, 2**32 - 1).map(lambda seed: _sample(space, seed, count))


def _sample(space, seed, count):
    rng = random.Random(seed)
    out = [sample_subnet(space, rng) for _ in range(count)]
    return out[0] if count == 1 else out
