"""Framework-neutral computation graphs.

A graph is a DAG of operator nodes connected by named tensor edges.  Graphs
are architecture-only: they carry operator attributes and (optionally) edge
shapes, never weights.  The on-disk form is a JSON document (``.tfg``)::

    {"format": "tailorforge-graph/1",
     "metadata": {"name": "TinyNet"},
     "inputs": ["x"], "outputs": ["y"],
     "edges": {"x": {"dims": [1, 3, 224, 224], "dtype": "float32"}, "y": null},
     "nodes": [{"id": "n0", "op": "relu", "attrs": {}, "inputs": ["x"], "outputs": ["y"]}]}
"""

from __future__ import annotations

import hashlib
import heapq
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from .errors import GraphParseError, GraphValidationError

FORMAT_TAG = "tailorforge-graph/1"

DTYPE_SIZES = {"float32": 4, "float16": 2, "int64": 8, "bool": 1}


@dataclass(frozen=True)
class OpSchema:
    required: tuple[str, ...] = ()
    optional: Mapping[str, Any] = field(default_factory=dict)
    min_inputs: int = 1
    max_inputs: int | None = 1
    outputs: int | None = 1  # None: determined by attrs (split)


_KPS = ("kernel", "stride", "padding")

OP_SCHEMAS: dict[str, OpSchema] = {
    "conv2d": OpSchema(required=_KPS + ("out_channels",), optional={"bias": 1}),
    "depthwise_conv2d": OpSchema(required=_KPS, optional={"bias": 1}),
    "matmul": OpSchema(optional={"out_features": None}, max_inputs=2),
    "add": OpSchema(max_inputs=2),
    "mul": OpSchema(max_inputs=2),
    "relu": OpSchema(),
    "gelu": OpSchema(),
    "softmax": OpSchema(optional={"axis": -1}),
    "batchnorm": OpSchema(),
    "layernorm": OpSchema(),
    "pool_avg": OpSchema(required=_KPS),
    "pool_max": OpSchema(required=_KPS),
    "global_pool": OpSchema(),
    "reshape": OpSchema(required=("shape",)),
    "concat": OpSchema(required=("axis",), max_inputs=None),
    "split": OpSchema(required=("axis", "sizes"), outputs=None),
    "transpose": OpSchema(required=("perm",)),
    "identity": OpSchema(),
}

_LIST_ATTRS = {"shape", "sizes", "perm"}


def is_custom(op: str) -> bool:
    return op.startswith("custom:")


def canonical_attrs(op: str, attrs: Mapping[str, Any]) -> dict[str, Any]:
    """Attributes with schema defaults filled in, sorted by name."""
    schema = OP_SCHEMAS.get(op)
    full = dict(attrs)
    if schema is not None:
        for name, default in schema.optional.items():
            if default is not None:
                full.setdefault(name, default)
    return {k: full[k] for k in sorted(full)}


@dataclass(frozen=True)
class TensorShape:
    dims: tuple[int, ...]
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(self.dims))
        if not self.dims:
            raise ValueError("tensor shape needs at least one dimension")
        for d in self.dims:
            if not isinstance(d, int) or isinstance(d, bool) or d < 1:
                raise ValueError(f"invalid extent {d!r} in {self.dims}")
        if self.dtype not in DTYPE_SIZES:
            raise ValueError(f"unknown dtype {self.dtype!r}")

    @property
    def rank(self) -> int:
        return len(self.dims)

    @property
    def numel(self) -> int:
        n = 1
        for d in self.dims:
            n *= d
        return n

    @property
    def nbytes(self) -> int:
        return self.numel * DTYPE_SIZES[self.dtype]

    def with_dims(self, dims) -> "TensorShape":
        return TensorShape(tuple(dims), self.dtype)

    def __str__(self):
        return "x".join(map(str, self.dims)) + ":" + self.dtype

    @classmethod
    def parse(cls, text: str) -> "TensorShape":
        dims, _, dtype = text.partition(":")
        return cls(tuple(int(d) for d in dims.split("x")), dtype or "float32")

    def to_json(self):
        return {"dims": list(self.dims), "dtype": self.dtype}


@dataclass(frozen=True)
class GraphNode:
    id: str
    op: str
    attrs: Mapping[str, Any]
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]

    def attr(self, name, default=None):
        if name in self.attrs:
            return self.attrs[name]
        schema = OP_SCHEMAS.get(self.op)
        if schema is not None and schema.optional.get(name) is not None:
            return schema.optional[name]
        return default


@dataclass
class ComputationGraph:
    nodes: list[GraphNode]
    edges: dict[str, TensorShape | None]
    inputs: list[str]
    outputs: list[str]
    metadata: dict[str, Any] = field(default_factory=dict)

    def node(self, node_id: str) -> GraphNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def producers(self) -> dict[str, GraphNode]:
        return {e: n for n in self.nodes for e in n.outputs}

    def consumers(self) -> dict[str, list[tuple[GraphNode, int]]]:
        out = defaultdict(list)
        for n in self.nodes:
            for pos, e in enumerate(n.inputs):
                out[e].append((n, pos))
        return out

    def topological_order(self) -> list[GraphNode]:
        """Kahn's algorithm; ties go to the earlier node in ``nodes``."""
        producer_idx = {e: i for i, n in enumerate(self.nodes) for e in n.outputs}
        indegree = [0] * len(self.nodes)
        succ = defaultdict(list)
        for i, n in enumerate(self.nodes):
            deps = {producer_idx[e] for e in n.inputs if e in producer_idx}
            indegree[i] = len(deps)
            for d in deps:
                succ[d].append(i)
        ready = [i for i, d in enumerate(indegree) if d == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            i = heapq.heappop(ready)
            order.append(self.nodes[i])
            for j in succ[i]:
                indegree[j] -= 1
                if indegree[j] == 0:
                    heapq.heappush(ready, j)
        if len(order) != len(self.nodes):
            stuck = next(n.id for i, n in enumerate(self.nodes) if indegree[i] > 0)
            raise GraphValidationError("graph contains a cycle", node_id=stuck)
        return order


# ---------------------------------------------------------------------------
# validation


def _check_attr_value(node_id, name, value):
    if name in _LIST_ATTRS:
        if not isinstance(value, list) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            raise GraphValidationError(f"attribute {name!r} must be an integer list", node_id=node_id)
    elif not isinstance(value, (int, float, str)) or isinstance(value, bool):
        raise GraphValidationError(f"attribute {name!r} has unsupported value {value!r}", node_id=node_id)


def _validate_node(node: GraphNode):
    if is_custom(node.op):
        for name, value in node.attrs.items():
            if not (isinstance(value, list) or isinstance(value, (int, float, str))):
                raise GraphValidationError(f"attribute {name!r} has unsupported value", node_id=node.id)
        if not node.inputs or not node.outputs:
            raise GraphValidationError("custom op needs inputs and outputs", node_id=node.id)
        return
    schema = OP_SCHEMAS[node.op]
    for name in schema.required:
        if name not in node.attrs:
            raise GraphValidationError(f"missing required attribute {name!r} for {node.op}", node_id=node.id)
    for name, value in node.attrs.items():
        if name not in schema.required and name not in schema.optional:
            raise GraphValidationError(f"unknown attribute {name!r} for {node.op}", node_id=node.id)
        _check_attr_value(node.id, name, value)
    n_in = len(node.inputs)
    if n_in < schema.min_inputs or (schema.max_inputs is not None and n_in > schema.max_inputs):
        raise GraphValidationError(f"{node.op} cannot take {n_in} input(s)", node_id=node.id)
    expected_out = schema.outputs if schema.outputs is not None else len(node.attrs["sizes"])
    if len(node.outputs) != expected_out:
        raise GraphValidationError(
            f"{node.op} must have {expected_out} output(s), got {len(node.outputs)}", node_id=node.id
        )
    if node.op == "matmul":
        has_out = "out_features" in node.attrs
        if n_in == 1 and not has_out:
            raise GraphValidationError("single-input matmul requires out_features", node_id=node.id)
        if n_in == 2 and has_out:
            raise GraphValidationError("two-input matmul must not set out_features", node_id=node.id)
    if node.op == "reshape" and sum(1 for d in node.attrs["shape"] if d == -1) > 1:
        raise GraphValidationError("reshape allows at most one inferred (-1) slot", node_id=node.id)


def validate_graph(g: ComputationGraph) -> None:
    """Raise GraphValidationError unless ``g`` satisfies every graph invariant."""
    seen_ids = set()
    for n in g.nodes:
        if n.id in seen_ids:
            raise GraphValidationError("duplicate node id", node_id=n.id)
        seen_ids.add(n.id)
        _validate_node(n)
        for e in n.inputs + n.outputs:
            if e not in g.edges:
                raise GraphValidationError("references undeclared edge", node_id=n.id, edge_id=e)
    producer = {}
    for e in g.inputs:
        if e not in g.edges:
            raise GraphValidationError("graph input is not a declared edge", edge_id=e)
        if e in producer:
            raise GraphValidationError("edge listed twice as graph input", edge_id=e)
        producer[e] = None
    for n in g.nodes:
        for e in n.outputs:
            if e in producer:
                raise GraphValidationError("edge has more than one producer", node_id=n.id, edge_id=e)
            producer[e] = n.id
    for e in g.edges:
        if e not in producer:
            raise GraphValidationError("edge has no producer and is not a graph input", edge_id=e)
    for e in g.outputs:
        if e not in g.edges:
            raise GraphValidationError("graph output is not a declared edge", edge_id=e)
    g.topological_order()  # cycle check

    reached = set(g.inputs)
    for n in g.topological_order():
        if any(e in reached for e in n.inputs):
            reached.update(n.outputs)
    for e in g.outputs:
        if e not in reached:
            raise GraphValidationError("graph output not reachable from graph inputs", edge_id=e)


# ---------------------------------------------------------------------------
# serialization


def _parse_shape(edge_id, raw):
    if raw is None:
        return None
    if not isinstance(raw, dict) or "dims" not in raw:
        raise GraphParseError(f"edge {edge_id!r}: shape must be null or {{dims, dtype}}")
    try:
        return TensorShape(tuple(raw["dims"]), raw.get("dtype", "float32"))
    except (TypeError, ValueError) as exc:
        raise GraphValidationError(str(exc), edge_id=edge_id) from None


def graph_from_dict(doc: Mapping[str, Any]) -> ComputationGraph:
    if not isinstance(doc, dict):
        raise GraphParseError("graph document must be an object")
    fmt = doc.get("format", FORMAT_TAG)
    if fmt != FORMAT_TAG:
        raise GraphParseError(f"unsupported graph format {fmt!r} (expected {FORMAT_TAG})")
    try:
        raw_nodes = doc["nodes"]
        raw_edges = doc["edges"]
        inputs = list(doc["inputs"])
        outputs = list(doc["outputs"])
    except (KeyError, TypeError) as exc:
        raise GraphParseError(f"missing top-level key {exc}") from None
    nodes = []
    for raw in raw_nodes:
        try:
            op = str(raw["op"])
            if op not in OP_SCHEMAS and not is_custom(op):
                op = "custom:" + op
            nodes.append(
                GraphNode(
                    id=str(raw["id"]),
                    op=op,
                    attrs=dict(raw.get("attrs") or {}),
                    inputs=tuple(raw["inputs"]),
                    outputs=tuple(raw["outputs"]),
                )
            )
        except (KeyError, TypeError) as exc:
            raise GraphParseError(f"malformed node entry {raw!r}: {exc}") from None
    if not isinstance(raw_edges, dict):
        raise GraphParseError("'edges' must map edge ids to shapes")
    edges = {str(k): _parse_shape(k, v) for k, v in raw_edges.items()}
    g = ComputationGraph(nodes, edges, inputs, outputs, dict(doc.get("metadata") or {}))
    validate_graph(g)
    return g


def load_graph(serialized: bytes | str) -> ComputationGraph:
    """Parse and validate a ``.tfg`` document."""
    if isinstance(serialized, bytes):
        serialized = serialized.decode("utf-8")
    try:
        doc = json.loads(serialized)
    except json.JSONDecodeError as exc:
        raise GraphParseError(f"invalid graph document: {exc}") from None
    return graph_from_dict(doc)


def read_graph(path) -> ComputationGraph:
    with open(path, "rb") as fh:
        return load_graph(fh.read())


def export_graph(g: ComputationGraph) -> bytes:
    """Serialize deterministically: topological node order, sorted edges and attrs."""
    dump = lambda obj: json.dumps(obj, sort_keys=True, separators=(", ", ": "))  # noqa: E731
    lines = ["{", f'  "format": {dump(FORMAT_TAG)},']
    lines.append(f'  "metadata": {dump(g.metadata)},')
    lines.append(f'  "inputs": {dump(list(g.inputs))},')
    lines.append(f'  "outputs": {dump(list(g.outputs))},')
    lines.append('  "edges": {')
    edge_lines = [
        f"    {dump(e)}: {dump(None if g.edges[e] is None else g.edges[e].to_json())}"
        for e in sorted(g.edges)
    ]
    lines.append(",\n".join(edge_lines))
    lines.append("  },")
    lines.append('  "nodes": [')
    node_lines = [
        "    "
        + dump({"id": n.id, "op": n.op, "attrs": dict(n.attrs), "inputs": list(n.inputs), "outputs": list(n.outputs)})
        for n in g.topological_order()
    ]
    lines.append(",\n".join(node_lines))
    lines.append("  ]")
    lines.append("}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def write_graph(g: ComputationGraph, path) -> None:
    with open(path, "wb") as fh:
        fh.write(export_graph(g))


# ---------------------------------------------------------------------------
# isomorphism


def _h(*parts) -> str:
    return hashlib.blake2b(repr(parts).encode(), digest_size=12).hexdigest()


def _canonical_form(g: ComputationGraph):
    order = g.topological_order()
    producer = {}
    for n in order:
        for k, e in enumerate(n.outputs):
            producer[e] = (n.id, k)
    input_pos = {e: i for i, e in enumerate(g.inputs)}
    output_pos = defaultdict(list)
    for i, e in enumerate(g.outputs):
        output_pos[e].append(i)
    consumers = g.consumers()

    def source(e, labels):
        if e in input_pos:
            return ("in", input_pos[e])
        nid, k = producer[e]
        return (labels[nid], k)

    base = {n.id: (n.op, tuple(canonical_attrs(n.op, n.attrs).items())) for n in order}
    fwd = {}
    for n in order:
        fwd[n.id] = _h(base[n.id], tuple(source(e, fwd) for e in n.inputs), len(n.outputs))
    bwd = {}
    for n in reversed(order):
        outs = tuple(
            (tuple(sorted((bwd[c.id], pos) for c, pos in consumers.get(e, ()))), tuple(output_pos.get(e, ())))
            for e in n.outputs
        )
        bwd[n.id] = _h(base[n.id], outs)
    label = {nid: fwd[nid] + bwd[nid] for nid in fwd}

    # refine ties by neighbourhood ranks until the partition is stable
    for _ in range(len(order)):
        ranked = sorted(set(label.values()))
        rank = {lab: i for i, lab in enumerate(ranked)}
        node_rank = {k: rank[v] for k, v in label.items()}
        new = {}
        for n in order:
            ins = tuple(source(e, node_rank) for e in n.inputs)
            outs = tuple(
                tuple(sorted((rank[label[c.id]], pos) for c, pos in consumers.get(e, ()))) for e in n.outputs
            )
            new[n.id] = _h(label[n.id], ins, outs)
        if len(set(new.values())) == len(set(label.values())):
            break
        label = new

    position = {n.id: i for i, n in enumerate(order)}
    canon = sorted(order, key=lambda n: (label[n.id], position[n.id]))
    index = {n.id: i for i, n in enumerate(canon)}

    def ref(e):
        if e in input_pos:
            return ("in", input_pos[e])
        nid, k = producer[e]
        return (index[nid], k)

    body = tuple((base[n.id], tuple(ref(e) for e in n.inputs), len(n.outputs)) for n in canon)
    ins = tuple(str(g.edges[e]) if g.edges.get(e) is not None else None for e in g.inputs)
    outs = tuple(ref(e) for e in g.outputs)
    return ins, outs, body


def graph_isomorphic(a: ComputationGraph, b: ComputationGraph) -> bool:
    """Structural equality up to node/edge renaming.

    Compares op types, attributes (with defaults filled), input-position
    wiring, graph-input shapes and output order.  Interior edge shapes are
    derivable from those and are ignored.
    """
    if len(a.nodes) != len(b.nodes) or len(a.inputs) != len(b.inputs) or len(a.outputs) != len(b.outputs):
        return False
    return _canonical_form(a) == _canonical_form(b)


def relabel(g: ComputationGraph, node_map=None, edge_map=None) -> ComputationGraph:
    """Copy of ``g`` with node and/or edge ids renamed."""
    nm = node_map or {}
    em = edge_map or {}
    ren = lambda e: em.get(e, e)  # noqa: E731
    return ComputationGraph(
        nodes=[
            GraphNode(nm.get(n.id, n.id), n.op, dict(n.attrs), tuple(map(ren, n.inputs)), tuple(map(ren, n.outputs)))
            for n in g.nodes
        ],
        edges={ren(e): s for e, s in g.edges.items()},
        inputs=[ren(e) for e in g.inputs],
        outputs=[ren(e) for e in g.outputs],
        metadata=dict(g.metadata),
    )


class GraphBuilder:
    """Small helper for authoring graphs in code."""

    def __init__(self, name: str, **metadata):
        self.metadata = {"name": name, **metadata}
        self.nodes: list[GraphNode] = []
        self.edges: dict[str, TensorShape | None] = {}
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self._counter = 0

    def _edge(self, shape=None) -> str:
        e = f"e{len(self.edges)}"
        self.edges[e] = shape
        return e

    def input(self, dims: Iterable[int], dtype="float32") -> str:
        e = self._edge(TensorShape(tuple(dims), dtype))
        self.inputs.append(e)
        return e

    def op(self, op: str, *inputs: str, n_out: int = 1, name: str | None = None, **attrs):
        node_id = name or f"{op.replace(':', '_')}_{self._counter}"
        self._counter += 1
        outs = tuple(self._edge() for _ in range(n_out))
        self.nodes.append(GraphNode(node_id, op, attrs, tuple(inputs), outs))
        return outs[0] if n_out == 1 else list(outs)

    def output(self, *edges: str):
        self.outputs.extend(edges)

    def graph(self) -> ComputationGraph:
        g = ComputationGraph(list(self.nodes), dict(self.edges), list(self.inputs), list(self.outputs), dict(self.metadata))
        validate_graph(g)
        return g
