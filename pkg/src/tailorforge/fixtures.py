"""Reference graphs and configs shipped with the package.

Each fixture is authored in code here; the ``data/`` directory carries the
exported ``.tfg``/``.toml`` copies, and the tests check the two stay equal.
"""

from __future__ import annotations

from importlib import resources

from .graph import ComputationGraph, GraphBuilder, read_graph
from .modspace import SpaceConfig, parse_config

EXAMPLE_CONFIG = """\
title = "Example"
[arch]
blocks = ["FFNBlock"]
[var.global_vars]
resolution = [128, 160, 192, 224]
[var.stage_vars]
reduce_depth = [-3, -2, -1, 0]
[var.block_vars]
FFNBlock.expand_ratio = [2, 3, 4]
"""

TINYNET_1S_CONFIG = """\
title = "TinyNet-1S"
[arch]
blocks = ["ResidualConvBlock"]
[var.global_vars]
resolution = [128, 224]
[var.stage_vars]
reduce_depth = [-2, -1, 0]
[var.block_vars]
ResidualConvBlock.expand_ratio = [2, 3, 4]
"""

TINYNET_4S_CONFIG = """\
title = "TinyNet-4S"
[arch]
blocks = ["ResidualConvBlock", "InvertedResidualBlock"]
[var.global_vars]
resolution = [160, 224]
[var.stage_vars]
reduce_depth = [-1, 0]
[var.block_vars]
ResidualConvBlock.expand_ratio = [2, 3, 4]
InvertedResidualBlock.expand_ratio = [2, 4]
"""

TINYVIT_CONFIG = """\
title = "TinyViT"
[arch]
blocks = ["AttentionBlock", "FFNBlock"]
[var.global_vars]
resolution = [32, 48, 64]
[var.stage_vars]
reduce_depth = [-2, -1, 0]
[var.block_vars]
AttentionBlock.attn_ratio = [0.5, 1]
FFNBlock.expand_ratio = [2, 3, 4]
"""


def with_declared_shapes(g: ComputationGraph) -> ComputationGraph:
    """Copy of ``g`` with every edge shape filled in by propagation."""
    from .compiler import meta_shapes

    shapes = meta_shapes(g)
    return ComputationGraph(list(g.nodes), {e: shapes[e] for e in g.edges}, list(g.inputs), list(g.outputs),
                            dict(g.metadata))


def _residual(b: GraphBuilder, x: str, channels: int, mid: int) -> str:
    t = b.op("conv2d", x, kernel=3, stride=1, padding=1, out_channels=mid)
    t = b.op("relu", t)
    t = b.op("conv2d", t, kernel=3, stride=1, padding=1, out_channels=channels)
    return b.op("add", t, x)


def _inverted_residual(b: GraphBuilder, x: str, channels: int, expand: int) -> str:
    t = b.op("conv2d", x, kernel=1, stride=1, padding=0, out_channels=expand)
    t = b.op("batchnorm", t)
    t = b.op("relu", t)
    t = b.op("depthwise_conv2d", t, kernel=3, stride=1, padding=1)
    t = b.op("batchnorm", t)
    t = b.op("relu", t)
    t = b.op("conv2d", t, kernel=1, stride=1, padding=0, out_channels=channels)
    t = b.op("batchnorm", t)
    return b.op("add", t, x)


def tinynet() -> ComputationGraph:
    """18 nodes: strided stem, three residual conv blocks, pooled FFN head."""
    b = GraphBuilder("TinyNet")
    x = b.input((1, 3, 224, 224))
    h = b.op("conv2d", x, kernel=3, stride=2, padding=1, out_channels=16)
    for _ in range(3):
        h = _residual(b, h, 16, 64)
    h = b.op("global_pool", h)
    h = b.op("reshape", h, shape=[1, -1])
    h = b.op("matmul", h, out_features=64)
    h = b.op("gelu", h)
    h = b.op("matmul", h, out_features=16)
    b.output(h)
    return with_declared_shapes(b.graph())


def tinynet_4s() -> ComputationGraph:
    """Four stages of two blocks each (three residual, one inverted residual)."""
    b = GraphBuilder("TinyNet-4S")
    x = b.input((1, 3, 224, 224))
    h = b.op("conv2d", x, kernel=3, stride=2, padding=1, out_channels=16)
    h = b.op("relu", h)
    for i, channels in enumerate((16, 24, 32)):
        if i:
            h = b.op("conv2d", h, kernel=3, stride=2, padding=1, out_channels=channels)
        for _ in range(2):
            h = _residual(b, h, channels, 4 * channels)
    h = b.op("conv2d", h, kernel=3, stride=2, padding=1, out_channels=48)
    for _ in range(2):
        h = _inverted_residual(b, h, 48, 192)
    h = b.op("global_pool", h)
    h = b.op("reshape", h, shape=[1, -1])
    h = b.op("matmul", h, out_features=10)
    b.output(h)
    return with_declared_shapes(b.graph())


def tinyvit() -> ComputationGraph:
    """Patch-embedding transformer: alternating attention and FFN blocks."""
    dim = 32
    b = GraphBuilder("TinyViT")
    x = b.input((1, 3, 64, 64))
    h = b.op("conv2d", x, kernel=8, stride=8, padding=0, out_channels=dim)
    h = b.op("reshape", h, shape=[1, dim, -1])
    h = b.op("transpose", h, perm=[0, 2, 1])
    for _ in range(2):
        t = b.op("layernorm", h)
        q = b.op("matmul", t, out_features=dim)
        k = b.op("matmul", t, out_features=dim)
        v = b.op("matmul", t, out_features=dim)
        kt = b.op("transpose", k, perm=[0, 2, 1])
        s = b.op("matmul", q, kt)
        s = b.op("softmax", s)
        c = b.op("matmul", s, v)
        c = b.op("matmul", c, out_features=dim)
        c = b.op("add", c)
        h = b.op("add", h, c)

        t = b.op("layernorm", h)
        t = b.op("matmul", t, out_features=4 * dim)
        t = b.op("add", t)
        t = b.op("gelu", t)
        t = b.op("matmul", t, out_features=dim)
        t = b.op("add", t)
        h = b.op("add", h, t)
    h = b.op("layernorm", h)
    h = b.op("matmul", h, out_features=10)
    b.output(h)
    return with_declared_shapes(b.graph())


FIXTURES = {
    "tinynet": (tinynet, EXAMPLE_CONFIG),
    "tinynet-1s": (tinynet, TINYNET_1S_CONFIG),
    "tinynet-4s": (tinynet_4s, TINYNET_4S_CONFIG),
    "tinyvit": (tinyvit, TINYVIT_CONFIG),
}

DATA_FILES = {
    "tinynet.tfg": tinynet,
    "tinynet_4s.tfg": tinynet_4s,
    "tinyvit.tfg": tinyvit,
}

CONFIG_FILES = {
    "example.toml": EXAMPLE_CONFIG,
    "tinynet_1s.toml": TINYNET_1S_CONFIG,
    "tinynet_4s.toml": TINYNET_4S_CONFIG,
    "tinyvit.toml": TINYVIT_CONFIG,
}


def data_path(name: str):
    return resources.files("tailorforge") / "data" / name


def load_fixture(name: str) -> tuple[ComputationGraph, SpaceConfig]:
    """(graph, config) for a named fixture."""
    builder, config = FIXTURES[name]
    return builder(), parse_config(config)


def shipped_graph(filename: str) -> ComputationGraph:
    with resources.as_file(data_path(filename)) as p:
        return read_graph(p)
