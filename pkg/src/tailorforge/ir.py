"""TailorIR: the hierarchical SuperNet representation.

Every module (operator, bypassed static op, block, stage, model) carries a
:class:`Feature` holding meta (maximal) and active (currently selected)
values.  ``transform`` edits active attributes, ``update`` re-derives every
dependent attribute and shape in one feed-forward pass, and ``build`` emits
the active architecture as a plain :class:`ComputationGraph`.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Any, Mapping

from .errors import LegalityError, NotUpdatedError, ShapeError, TransformError
from .graph import ComputationGraph, GraphNode, TensorShape, canonical_attrs, is_custom

DYNAMIC_OPS = frozenset({"conv2d", "depthwise_conv2d", "matmul", "concat"})
PASS_THROUGH = frozenset({"relu", "gelu", "softmax", "batchnorm", "layernorm", "identity"})


class Kind(str, Enum):
    OPERATOR = "operator"
    BYPASS = "static_bypass"
    BLOCK = "block"
    STAGE = "stage"
    MODEL = "model"


@dataclass(frozen=True)
class Slot:
    meta: Any
    active: Any


@dataclass(frozen=True)
class Feature:
    attrs: Mapping[str, Slot] = field(default_factory=dict)
    in_shapes: tuple[Slot, ...] = ()
    out_shapes: tuple[Slot, ...] = ()

    def active(self, name):
        return self.attrs[name].active

    def meta(self, name):
        return self.attrs[name].meta


@dataclass(frozen=True)
class HookBinding:
    """A block-level width knob and the operator attributes it drives.

    The knob value is a ratio relative to the block's entry width; each target
    attribute scales proportionally from its meta width.
    """

    name: str
    targets: tuple[tuple[str, str, int], ...]  # (node id, attr, meta width)
    meta_value: Fraction

    def widths(self, value) -> dict[tuple[str, str], int]:
        return dict(_hook_widths(self, value))


@functools.lru_cache(maxsize=4096)
def _hook_widths(hook: HookBinding, value) -> tuple:
    scale = Fraction(value).limit_denominator(10**6) / hook.meta_value
    return tuple(((node_id, attr), math.floor(meta_width * scale + Fraction(1, 2)))
                 for node_id, attr, meta_width in hook.targets)


@dataclass(frozen=True)
class Structure:
    """Static facts about the source graph shared by every tree derived from it."""

    graph: ComputationGraph
    order: tuple[str, ...]
    nodes: Mapping[str, GraphNode]
    input_shapes: Mapping[str, TensorShape]
    leaf_path: Mapping[str, str]
    owner: Mapping[str, str | None]  # node id -> enclosing block path (None at model level)
    producer: Mapping[str, str]  # edge -> node id
    meta_shapes: Mapping[str, TensorShape]
    canonical: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)  # node id -> canonical attrs


@dataclass(frozen=True)
class TailorModule:
    kind: Kind
    path: str
    feature: Feature
    children: tuple["TailorModule", ...] = ()
    template_name: str | None = None
    source_nodes: tuple[str, ...] = ()
    node: GraphNode | None = None
    active: bool = True
    hooks: tuple[HookBinding, ...] = ()
    inputs: tuple[str, ...] = ()
    outputs: tuple[str, ...] = ()
    structure: Structure | None = field(default=None, compare=False, repr=False)
    updated: bool = True
    state: "ActiveState | None" = field(default=None, compare=False, repr=False)  # cached by update()

    @property
    def is_leaf(self) -> bool:
        return self.kind in (Kind.OPERATOR, Kind.BYPASS)

    def find(self, path: str) -> "TailorModule":
        if path == self.path:
            return self
        for child in self.children:
            if path == child.path or path.startswith(child.path + "/"):
                return child.find(path)
        raise KeyError(path)

    def walk(self):
        yield self
        for child in self.children:
            yield from child.walk()

    def leaves(self):
        for m in self.walk():
            if m.is_leaf:
                yield m

    def blocks(self):
        for m in self.walk():
            if m.kind == Kind.BLOCK:
                yield m

    def stages(self):
        return [c for c in self.children if c.kind == Kind.STAGE]


@dataclass(frozen=True)
class Modification:
    dim_id: str
    value: Any


# ---------------------------------------------------------------------------
# deduction rules


def _conv_out(size, kernel, stride, padding):
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeError(f"spatial size {size} too small for kernel {kernel}, stride {stride}, padding {padding}")
    return out


def _axis(axis, rank):
    a = axis + rank if axis < 0 else axis
    if not 0 <= a < rank:
        raise ShapeError(f"axis {axis} out of range for rank {rank}")
    return a


def deduce(op: str, attrs: Mapping[str, Any], ins: list[TensorShape], n_out: int = 1) -> tuple[TensorShape, ...]:
    """Output shapes of one operator given its (canonical) attrs and input shapes."""
    x = ins[0]
    if op in PASS_THROUGH or is_custom(op):
        return (x,) * n_out
    if op in ("conv2d", "depthwise_conv2d", "pool_avg", "pool_max"):
        if x.rank != 4:
            raise ShapeError(f"{op} expects a rank-4 input, got {x}")
        n, c, h, w = x.dims
        k, s, p = attrs["kernel"], attrs["stride"], attrs["padding"]
        oc = attrs["out_channels"] if op == "conv2d" else c
        return (x.with_dims((n, oc, _conv_out(h, k, s, p), _conv_out(w, k, s, p))),)
    if op == "global_pool":
        if x.rank != 4:
            raise ShapeError(f"global_pool expects a rank-4 input, got {x}")
        return (x.with_dims((x.dims[0], x.dims[1], 1, 1)),)
    if op == "matmul":
        if len(ins) == 1:
            return (x.with_dims(x.dims[:-1] + (attrs["out_features"],)),)
        a, b = ins
        if a.rank < 2 or b.rank != a.rank:
            raise ShapeError(f"matmul rank mismatch: {a} @ {b}")
        if a.dims[:-2] != b.dims[:-2]:
            raise ShapeError(f"matmul batch dims differ: {a} @ {b}")
        if a.dims[-1] != b.dims[-2]:
            raise ShapeError(f"matmul inner dims differ: {a} @ {b}")
        return (a.with_dims(a.dims[:-1] + (b.dims[-1],)),)
    if op in ("add", "mul"):
        if len(ins) == 2 and ins[0].dims != ins[1].dims:
            raise ShapeError(f"{op} operands differ: {ins[0]} vs {ins[1]}")
        return (x,)
    if op == "reshape":
        target = list(attrs["shape"])
        known = 1
        for d in target:
            if d != -1:
                if d < 1:
                    raise ShapeError(f"reshape extent {d} invalid")
                known *= d
        if -1 in target:
            if x.numel % known:
                raise ShapeError(f"cannot reshape {x} to {target}")
            target[target.index(-1)] = x.numel // known
        elif known != x.numel:
            raise ShapeError(f"cannot reshape {x} to {target}")
        return (x.with_dims(tuple(target)),)
    if op == "concat":
        a = _axis(attrs["axis"], x.rank)
        total = 0
        for y in ins:
            if y.rank != x.rank or any(y.dims[i] != x.dims[i] for i in range(x.rank) if i != a):
                raise ShapeError(f"concat operands differ off-axis: {x} vs {y}")
            total += y.dims[a]
        dims = list(x.dims)
        dims[a] = total
        return (x.with_dims(dims),)
    if op == "split":
        a = _axis(attrs["axis"], x.rank)
        sizes = attrs["sizes"]
        if sum(sizes) != x.dims[a]:
            raise ShapeError(f"split sizes {sizes} do not sum to {x.dims[a]}")
        outs = []
        for s in sizes:
            dims = list(x.dims)
            dims[a] = s
            outs.append(x.with_dims(dims))
        return tuple(outs)
    if op == "transpose":
        perm = attrs["perm"]
        if sorted(perm) != list(range(x.rank)):
            raise ShapeError(f"perm {perm} invalid for {x}")
        return (x.with_dims(tuple(x.dims[i] for i in perm)),)
    raise ShapeError(f"no deduction rule for op {op!r}")


# ---------------------------------------------------------------------------
# active-state resolution


@dataclass
class ActiveState:
    attrs: dict[str, dict]  # node id -> canonical active attrs
    in_shapes: dict[str, tuple[TensorShape, ...]]
    out_shapes: dict[str, tuple[TensorShape, ...]]
    edge_shapes: dict[str, TensorShape]
    alias: dict[str, str]
    inactive: set[str]

    def resolve(self, edge: str) -> str:
        while edge in self.alias:
            edge = self.alias[edge]
        return edge


def _input_shape(model: TailorModule, edge: str) -> TensorShape:
    shape = model.structure.input_shapes[edge]
    res = model.feature.attrs.get("resolution")
    if res is not None and shape.rank == 4 and res.active != res.meta:
        shape = shape.with_dims(shape.dims[:2] + (res.active, res.active))
    return shape


def resolve_active(model: TailorModule) -> ActiveState:
    """Derive every active attribute and shape of ``model`` in one top-down pass."""
    st = model.structure
    overrides: dict[str, dict[str, Any]] = {}
    inactive: set[str] = set()
    alias: dict[str, str] = {}
    block_exit: dict[str, TailorModule] = {}
    for block in model.blocks():
        if not block.active:
            inactive.update(block.source_nodes)
            block_exit[st.producer[block.outputs[0]]] = block
            continue
        for hook in block.hooks:
            value = block.feature.attrs[hook.name].active
            if value == hook.meta_value:
                continue
            for (node_id, attr), w in hook.widths(value).items():
                overrides.setdefault(node_id, {})[attr] = w

    edge_shapes = {e: _input_shape(model, e) for e in st.graph.inputs}
    state = ActiveState({}, {}, {}, edge_shapes, alias, inactive)
    for nid in st.order:
        if nid in inactive:
            blk = block_exit.get(nid)
            if blk is not None:
                entry = state.resolve(blk.inputs[0])
                alias[blk.outputs[0]] = entry
            continue
        node = st.nodes[nid]
        attrs = st.canonical.get(nid)
        attrs = dict(attrs) if attrs is not None else canonical_attrs(node.op, node.attrs)
        if nid in overrides:
            attrs.update(overrides[nid])
        ins = tuple(edge_shapes[state.resolve(e)] for e in node.inputs)
        try:
            outs = deduce(node.op, attrs, list(ins), len(node.outputs))
        except ShapeError as exc:
            paths = [st.leaf_path[nid]] + sorted(
                {st.leaf_path[st.producer[state.resolve(e)]] for e in node.inputs if state.resolve(e) in st.producer}
            )
            raise LegalityError(f"{st.leaf_path[nid]} ({node.op}): {exc}; inputs from {paths[1:] or ['graph input']}", paths) from None
        state.attrs[nid] = attrs
        state.in_shapes[nid] = ins
        state.out_shapes[nid] = outs
        for e, s in zip(node.outputs, outs):
            edge_shapes[e] = s
    return state


# ---------------------------------------------------------------------------
# transform / update / build


def _evolve(obj, **changes):
    """``dataclasses.replace`` without re-running __init__ (hot path)."""
    new = object.__new__(type(obj))
    new.__dict__.update(obj.__dict__)
    new.__dict__.update(changes)
    return new


def _replace_at(module: TailorModule, path: str, fn) -> TailorModule:
    if module.path == path:
        return fn(module)
    for i, child in enumerate(module.children):
        if path == child.path or path.startswith(child.path + "/"):
            children = module.children[:i] + (_replace_at(child, path, fn),) + module.children[i + 1 :]
            return _evolve(module, children=children)
    raise TransformError(f"unknown module path {path!r}")


def _set_attr(module: TailorModule, name: str, value) -> TailorModule:
    attrs = dict(module.feature.attrs)
    attrs[name] = Slot(attrs[name].meta, value)
    return _evolve(module, feature=_evolve(module.feature, attrs=attrs))


def split_dim_id(dim_id: str) -> tuple[str, str]:
    """``stage[0]/block[2]/expand_ratio`` -> (``stage[0]/block[2]``, ``expand_ratio``)."""
    path, _, name = dim_id.rpartition("/")
    if path == "global":
        path = ""
    return path, name


def transform(m: TailorModule, mod: Modification) -> TailorModule:
    """Apply one modification to the active Feature it addresses (no propagation)."""
    path, name = split_dim_id(mod.dim_id)
    try:
        target = m.find(path)
    except KeyError:
        raise TransformError(f"unknown module path {path or 'global'!r} in {mod.dim_id!r}") from None
    value = mod.value

    if name == "resolution":
        if target.kind != Kind.MODEL or "resolution" not in target.feature.attrs:
            raise TransformError(f"{mod.dim_id!r}: resolution only applies to a model with image input")
        meta = target.feature.meta("resolution")
        if not isinstance(value, int) or isinstance(value, bool) or not 1 <= value <= meta:
            raise TransformError(f"{mod.dim_id!r}: resolution {value!r} outside [1, {meta}]")
        new = _set_attr(target, "resolution", value)
    elif name == "reduce_depth":
        if target.kind != Kind.STAGE or "depth" not in target.feature.attrs:
            raise TransformError(f"{mod.dim_id!r}: module has no depth hook")
        meta = target.feature.meta("depth")
        if not isinstance(value, int) or isinstance(value, bool) or value > 0 or meta + value < 1:
            raise TransformError(f"{mod.dim_id!r}: reduce_depth {value!r} illegal for depth {meta}")
        depth = meta + value
        stage = _set_attr(target, "depth", depth)
        children = tuple(
            c if c.active == (i < depth) else _evolve(c, active=i < depth) for i, c in enumerate(stage.children)
        )
        new = _evolve(stage, children=children)
    else:
        hook = next((h for h in target.hooks if h.name == name), None)
        if hook is None:
            raise TransformError(f"{mod.dim_id!r}: {target.kind.value} at {path!r} exposes no {name!r}")
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value <= 0 or value > hook.meta_value:
            raise TransformError(f"{mod.dim_id!r}: value {value!r} outside (0, {float(hook.meta_value):g}]")
        if any(w < 1 for w in hook.widths(value).values()):
            raise TransformError(f"{mod.dim_id!r}: value {value!r} shrinks a width below 1")
        new = _set_attr(target, name, value)

    root = _replace_at(m, path, lambda _: new)
    return _evolve(root, updated=False, state=None)


def _shape_slots(meta, active):
    return tuple(Slot(mm, aa) for mm, aa in zip(meta, active))


def _refresh(module: TailorModule, state: ActiveState, meta_shapes, meta_io) -> TailorModule:
    if module.is_leaf:
        nid = module.node.id
        if nid in state.inactive:
            # inactive leaves keep their meta values; active is undefined
            feature = Feature(
                {k: Slot(s.meta, None) for k, s in module.feature.attrs.items()},
                tuple(Slot(s.meta, None) for s in module.feature.in_shapes),
                tuple(Slot(s.meta, None) for s in module.feature.out_shapes),
            )
        else:
            attrs = state.attrs[nid]
            feature = Feature(
                {k: Slot(s.meta, attrs[k]) for k, s in module.feature.attrs.items()},
                _shape_slots((s.meta for s in module.feature.in_shapes), state.in_shapes[nid]),
                _shape_slots((s.meta for s in module.feature.out_shapes), state.out_shapes[nid]),
            )
        return _evolve(module, feature=feature)
    children = tuple(_refresh(c, state, meta_shapes, meta_io) for c in module.children)
    if module.kind == Kind.MODEL:
        ins, outs = meta_io
    else:
        ins, outs = module.inputs, module.outputs
    if module.active and not (set(module.source_nodes) <= state.inactive):
        feature = Feature(
            module.feature.attrs,
            tuple(Slot(meta_shapes[e], state.edge_shapes[state.resolve(e)]) for e in ins),
            tuple(Slot(meta_shapes[e], state.edge_shapes[state.resolve(e)]) for e in outs),
        )
    else:
        feature = Feature(
            module.feature.attrs,
            tuple(Slot(meta_shapes[e], None) for e in ins),
            tuple(Slot(meta_shapes[e], None) for e in outs),
        )
    return _evolve(module, feature=feature, children=children)


def update(m: TailorModule) -> TailorModule:
    """Re-derive active attributes and shapes everywhere; raise on illegal states."""
    state = resolve_active(m)
    st = m.structure
    root = _refresh(m, state, st.meta_shapes, (tuple(st.graph.inputs), tuple(st.graph.outputs)))
    return _evolve(root, updated=True, state=state)


def _require_updated(m: TailorModule) -> ActiveState:
    if m.kind != Kind.MODEL or m.structure is None:
        raise TypeError("expected a compiled model root")
    if not m.updated:
        raise NotUpdatedError("model has pending transforms; call update() first")
    return m.state if m.state is not None else resolve_active(m)


def build(m: TailorModule) -> ComputationGraph:
    """Emit the active architecture as a computation graph."""
    state = _require_updated(m)
    st = m.structure
    nodes = []
    edges: dict[str, TensorShape | None] = {e: state.edge_shapes[e] for e in st.graph.inputs}
    for nid in st.order:
        if nid in state.inactive:
            continue
        src = st.nodes[nid]
        attrs = dict(src.attrs)
        base = st.canonical.get(nid) or canonical_attrs(src.op, src.attrs)
        for k, v in state.attrs[nid].items():
            if base[k] != v:
                attrs[k] = v
        inputs = tuple(state.resolve(e) for e in src.inputs)
        nodes.append(GraphNode(nid, src.op, attrs, inputs, src.outputs))
        for e, s in zip(src.outputs, state.out_shapes[nid]):
            edges[e] = s
    outputs = [state.resolve(e) for e in st.graph.outputs]
    return ComputationGraph(nodes, edges, list(st.graph.inputs), outputs, dict(st.graph.metadata))


def build_pending(m: TailorModule) -> ComputationGraph:
    """``build(update(m))`` without materializing the refreshed Feature tree.

    Runs the same legality pass as :func:`update`; used on hot paths that
    only need the emitted graph.
    """
    if m.kind != Kind.MODEL or m.structure is None:
        raise TypeError("expected a compiled model root")
    state = m.state if m.updated and m.state is not None else resolve_active(m)
    return build(_evolve(m, updated=True, state=state))


def infer_shapes(model: TailorModule) -> dict[str, dict[str, tuple[TensorShape, ...]]]:
    """Active in/out shapes of every active operator-level module, keyed by path."""
    state = _require_updated(model)
    st = model.structure
    return {
        st.leaf_path[nid]: {"in_shapes": state.in_shapes[nid], "out_shapes": state.out_shapes[nid]}
        for nid in st.order
        if nid not in state.inactive
    }
