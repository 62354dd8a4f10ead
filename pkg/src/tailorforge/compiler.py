"""Three-step compilation of a static graph into a TailorIR SuperNet.

1. ``parse_operators``: one leaf module per node; fork-join regions (fan-outs
   traced to their nearest common post-dominator) grouped into DefaultBlocks.
2. ``match_blocks``: anchored template matching replaces regions with
   templated blocks that expose width hooks.
3. ``divide_stages``: consecutive droppable blocks with equal output shape
   form stages carrying a depth hook.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import replace
from fractions import Fraction
from typing import Iterable, Sequence

from .errors import CompileError, LegalityError, ShapeError, TransformError
from .graph import ComputationGraph, GraphNode, TensorShape, canonical_attrs, is_custom
from .ir import (
    DYNAMIC_OPS,
    Feature,
    HookBinding,
    Kind,
    Modification,
    Slot,
    Structure,
    TailorModule,
    deduce,
    transform,
    update,
)
from .modspace import Dim, ModificationSpace, SpaceConfig, count_variants
from .templates import DEFAULT_BLOCK, SHIPPED_TEMPLATES, BlockTemplate, Match, find_matches, hook_meta_value

log = logging.getLogger(__name__)

_SINK = "<sink>"


# ---------------------------------------------------------------------------
# step 1


def meta_shapes(g: ComputationGraph) -> dict[str, TensorShape]:
    """Propagate shapes from the declared graph inputs; check declared edges."""
    shapes = {}
    for e in g.inputs:
        if g.edges.get(e) is None:
            raise CompileError(f"graph input {e!r} has no declared shape")
        shapes[e] = g.edges[e]
    for node in g.topological_order():
        ins = [shapes[e] for e in node.inputs]
        try:
            outs = deduce(node.op, canonical_attrs(node.op, node.attrs), ins, len(node.outputs))
        except ShapeError as exc:
            raise CompileError(f"node {node.id!r}: {exc}") from None
        for e, s in zip(node.outputs, outs):
            declared = g.edges.get(e)
            if declared is not None and declared != s:
                raise CompileError(f"edge {e!r}: declared shape {declared} but {node.op} produces {s}")
            shapes[e] = s
    return shapes


def _leaf(node: GraphNode, shapes) -> TailorModule:
    attrs = canonical_attrs(node.op, node.attrs)
    kind = Kind.OPERATOR if node.op in DYNAMIC_OPS else Kind.BYPASS
    feature = Feature(
        {k: Slot(v, v) for k, v in attrs.items()},
        tuple(Slot(shapes[e], shapes[e]) for e in node.inputs),
        tuple(Slot(shapes[e], shapes[e]) for e in node.outputs),
    )
    return TailorModule(kind, node.id, feature, source_nodes=(node.id,), node=node,
                        inputs=tuple(node.inputs), outputs=tuple(node.outputs))


def post_dominators(g: ComputationGraph) -> dict[str, frozenset]:
    """Post-dominator sets over nodes, with a virtual sink after every output."""
    order = [n.id for n in g.topological_order()]
    consumers = g.consumers()
    outputs = set(g.outputs)
    pdom = {_SINK: frozenset({_SINK})}
    for nid in reversed(order):
        node = g.node(nid)
        succ = {c.id for e in node.outputs for c, _ in consumers.get(e, ())}
        if not succ or any(e in outputs for e in node.outputs):
            succ.add(_SINK)
        common = frozenset.intersection(*(pdom[s] for s in succ))
        pdom[nid] = common | {nid}
    return pdom


def fork_join_regions(g: ComputationGraph) -> list[set[str]]:
    """Maximal, merged node sets between each fan-out and its convergence point."""
    order = [n.id for n in g.topological_order()]
    position = {nid: i for i, nid in enumerate(order)}
    consumers = g.consumers()
    pdom = post_dominators(g)

    forks = []  # (consumer ids, node to include or None)
    for e in g.inputs:
        cs = {c.id for c, _ in consumers.get(e, ())}
        if len(cs) >= 2:
            forks.append((cs, None))
    for nid in order:
        node = g.node(nid)
        used = [e for e in node.outputs if consumers.get(e)]
        cs = {c.id for e in used for c, _ in consumers[e]}
        if len(cs) >= 2:
            forks.append((cs, nid if len(used) >= 2 else None))

    regions = []
    for cs, head in forks:
        common = frozenset.intersection(*(pdom[c] for c in cs)) - {_SINK}
        if not common:
            continue  # branches never converge
        join = min(common, key=position.__getitem__)
        region = set()
        stack = list(cs)
        while stack:
            nid = stack.pop()
            if nid in region:
                continue
            region.add(nid)
            if nid == join:
                continue
            for e in g.node(nid).outputs:
                stack.extend(c.id for c, _ in consumers.get(e, ()))
        if head is not None:
            region.add(head)
        regions.append(region)

    # keep maximal regions, then merge partial overlaps until disjoint
    regions.sort(key=len, reverse=True)
    kept: list[set[str]] = []
    for r in regions:
        if any(r <= k for k in kept):
            continue
        kept.append(r)
    merged = True
    while merged:
        merged = False
        for i in range(len(kept)):
            for j in range(i + 1, len(kept)):
                if kept[i] & kept[j]:
                    kept[i] |= kept.pop(j)
                    merged = True
                    break
            if merged:
                break
    kept.sort(key=lambda r: min(position[n] for n in r))
    return kept


def _region_io(node_ids: Sequence[str], nodes, consumers, graph_outputs):
    inside = set(node_ids)
    produced = {e for nid in node_ids for e in nodes[nid].outputs}
    ins = []
    for nid in node_ids:
        for e in nodes[nid].inputs:
            if e not in produced and e not in ins:
                ins.append(e)
    outs = []
    for nid in node_ids:
        for e in nodes[nid].outputs:
            escapes = e in graph_outputs or any(c.id not in inside for c in consumers.get(e, ()))
            if escapes and e not in outs:
                outs.append(e)
    return tuple(ins), tuple(outs)


def _block(template_name, leaves, inputs, outputs, shapes, hooks=(), attrs=None) -> TailorModule:
    feature = Feature(
        attrs or {},
        tuple(Slot(shapes[e], shapes[e]) for e in inputs),
        tuple(Slot(shapes[e], shapes[e]) for e in outputs),
    )
    source = tuple(nid for leaf in leaves for nid in leaf.source_nodes)
    return TailorModule(Kind.BLOCK, "", feature, tuple(leaves), template_name, source,
                        hooks=tuple(hooks), inputs=inputs, outputs=outputs)


def parse_operators(g: ComputationGraph) -> list[TailorModule]:
    """Step 1: leaf modules in topological order, fork-join regions grouped."""
    shapes = meta_shapes(g)
    order = g.topological_order()
    nodes = {n.id: n for n in order}
    consumers = g.consumers()
    edge_consumers = {e: [c for c, _ in cs] for e, cs in consumers.items()}
    leaves = {n.id: _leaf(n, shapes) for n in order}

    owner = {}
    blocks = {}
    for i, region in enumerate(fork_join_regions(g)):
        members = [n.id for n in order if n.id in region]
        ins, outs = _region_io(members, nodes, edge_consumers, set(g.outputs))
        blocks[i] = _block(DEFAULT_BLOCK, [leaves[m] for m in members], ins, outs, shapes)
        for m in members:
            owner[m] = i

    out, emitted = [], set()
    for n in order:
        b = owner.get(n.id)
        if b is None:
            out.append(leaves[n.id])
        elif b not in emitted:
            emitted.add(b)
            out.append(blocks[b])
    return out


# ---------------------------------------------------------------------------
# step 2


def _graph_tables(mods):
    nodes, order = {}, []
    for m in mods:
        for leaf in (m.leaves() if not m.is_leaf else [m]):
            nodes[leaf.node.id] = leaf.node
            order.append(leaf.node.id)
    consumers: dict[str, list[GraphNode]] = {}
    for nid in order:
        seen = set()
        for e in nodes[nid].inputs:
            if e not in seen:
                consumers.setdefault(e, []).append(nodes[nid])
                seen.add(e)
    edges = []
    produced = {e for n in nodes.values() for e in n.outputs}
    for nid in order:
        for e in nodes[nid].inputs:
            if e not in produced and e not in edges:
                edges.append(e)
    for nid in order:
        edges.extend(nodes[nid].outputs)
    return nodes, order, consumers, edges


def _hooks_for(match: Match, leaves_by_id, shapes) -> tuple[list[HookBinding], dict]:
    hooks, attrs = [], {}
    entry_shape = shapes[match.entry]
    for spec in match.template.hooks:
        base = entry_shape.dims[spec.axis]
        targets = []
        for pattern_name, attr in spec.targets:
            nid = match.node_for(pattern_name)
            width = leaves_by_id[nid].feature.meta(attr)
            targets.append((nid, attr, width))
        meta = Fraction(targets[0][2], base)
        hooks.append(HookBinding(spec.name, tuple(targets), meta))
        value = hook_meta_value(targets[0][2], base)
        attrs[spec.name] = Slot(value, value)
    return hooks, attrs


def match_blocks(
    mods: list[TailorModule],
    templates: Iterable[BlockTemplate],
    forced: bool = False,
    graph_outputs: Iterable[str] = (),
) -> list[TailorModule]:
    """Step 2: replace template matches by templated blocks.

    Earlier topological position wins, then the longer match, then template
    order.  With ``forced`` (templates named in the config), matches of two
    different templates that overlap are a compile error.
    """
    templates = list(templates)
    if not templates:
        return list(mods)
    nodes, order, consumers, edges = _graph_tables(mods)
    position = {nid: i for i, nid in enumerate(order)}
    graph_outputs = set(graph_outputs)

    leaves_by_id, default_of = {}, {}
    for idx, m in enumerate(mods):
        if m.is_leaf:
            leaves_by_id[m.node.id] = m
        else:
            for leaf in m.leaves():
                leaves_by_id[leaf.node.id] = leaf
                if m.template_name == DEFAULT_BLOCK:
                    default_of[leaf.node.id] = idx
    default_members = {}
    for nid, idx in default_of.items():
        default_members.setdefault(idx, set()).add(nid)

    candidates = []
    for ti, t in enumerate(templates):
        for match in find_matches(t, nodes, consumers, edges, graph_outputs):
            ids = set(match.node_ids)
            # a match may swallow DefaultBlocks, never split one
            touched = {default_of[n] for n in ids if n in default_of}
            if any(not default_members[b] <= ids for b in touched):
                continue
            start = min(position[n] for n in ids)
            candidates.append((start, -len(ids), ti, match.variant, match))
    candidates.sort(key=lambda c: c[:4])

    claimed: dict[str, Match] = {}
    accepted = []
    for *_, match in candidates:
        clash = [claimed[n] for n in match.node_ids if n in claimed]
        if clash:
            other = clash[0]
            if forced and other.template.name != match.template.name:
                shared = sorted(set(match.node_ids) & set(other.node_ids), key=position.__getitem__)
                raise CompileError(
                    f"forced templates overlap: {other.template.name} at {list(other.node_ids)} and "
                    f"{match.template.name} at {list(match.node_ids)} share nodes {shared}"
                )
            continue
        for n in match.node_ids:
            claimed[n] = match
        accepted.append(match)

    shapes = {}
    for leaf in leaves_by_id.values():
        for e, s in zip(leaf.inputs, leaf.feature.in_shapes):
            shapes[e] = s.meta
        for e, s in zip(leaf.outputs, leaf.feature.out_shapes):
            shapes[e] = s.meta

    blocks_at = {}
    for match in accepted:
        members = sorted(match.node_ids, key=position.__getitem__)
        hooks, attrs = _hooks_for(match, leaves_by_id, shapes)
        blk = _block(match.template.name, [leaves_by_id[n] for n in members], (match.entry,), (match.exit,),
                     shapes, hooks, attrs)
        blocks_at[members[0]] = blk

    out = []
    for m in mods:
        ids = [m.node.id] if m.is_leaf else [leaf.node.id for leaf in m.leaves()]
        if any(n in claimed for n in ids):
            for n in ids:
                if n in blocks_at:
                    out.append(blocks_at[n])
            continue
        out.append(m)
    first = {id(m): min(position[n] for n in m.source_nodes) for m in out}
    out.sort(key=lambda m: first[id(m)])
    return out


# ---------------------------------------------------------------------------
# step 3


def _changes_resolution(block: TailorModule) -> bool:
    ins = [s.meta for s in block.feature.in_shapes]
    outs = [s.meta for s in block.feature.out_shapes]
    if len(ins) != 1 or len(outs) != 1:
        return True
    a, b = ins[0], outs[0]
    if a.rank != b.rank:
        return True
    return a.rank == 4 and a.dims[2:] != b.dims[2:]


def _droppable(block: TailorModule) -> bool:
    return (
        len(block.inputs) == 1
        and len(block.outputs) == 1
        and block.feature.in_shapes[0].meta == block.feature.out_shapes[0].meta
    )


def _renamed(leaf: TailorModule, path: str) -> TailorModule:
    return replace(leaf, path=path)


def divide_stages(mods: list[TailorModule], graph: ComputationGraph) -> TailorModule:
    """Step 3: group blocks into stages and return the model root."""
    groups: list[list[TailorModule] | TailorModule] = []
    current: list[TailorModule] | None = None
    closed = False
    for m in mods:
        if m.is_leaf:
            groups.append(m)
            current = None
            continue
        joins = (
            current is not None
            and not closed
            and _droppable(m)
            and m.inputs == current[-1].outputs
            and m.feature.out_shapes[0].meta == current[-1].feature.out_shapes[0].meta
        )
        if joins:
            current.append(m)
            continue
        current = [m]
        groups.append(current)
        closed = m.template_name == DEFAULT_BLOCK and _changes_resolution(m)

    shapes = meta_shapes(graph)
    leaf_path, owner = {}, {}
    children = []
    n_loose = n_stage = 0
    for item in groups:
        if isinstance(item, TailorModule):
            path = f"op[{n_loose}]"
            n_loose += 1
            leaf_path[item.node.id] = path
            owner[item.node.id] = None
            children.append(_renamed(item, path))
            continue
        spath = f"stage[{n_stage}]"
        n_stage += 1
        blocks = []
        for j, blk in enumerate(item):
            bpath = f"{spath}/block[{j}]"
            leaves = []
            for i, leaf in enumerate(blk.leaves()):
                lpath = f"{bpath}/op[{i}]"
                leaf_path[leaf.node.id] = lpath
                owner[leaf.node.id] = bpath
                leaves.append(_renamed(leaf, lpath))
            blocks.append(replace(blk, path=bpath, children=tuple(leaves)))
        attrs = {"depth": Slot(len(blocks), len(blocks))} if len(blocks) >= 2 else {}
        feature = Feature(attrs, blocks[0].feature.in_shapes, blocks[-1].feature.out_shapes)
        children.append(TailorModule(
            Kind.STAGE, spath, feature, tuple(blocks),
            source_nodes=tuple(n for b in blocks for n in b.source_nodes),
            inputs=blocks[0].inputs, outputs=blocks[-1].outputs,
        ))

    order = tuple(n.id for n in graph.topological_order())
    nodes = {n.id: n for n in graph.nodes}
    producer = {e: n.id for n in graph.nodes for e in n.outputs}
    input_shapes = {e: shapes[e] for e in graph.inputs}
    canonical = {n.id: canonical_attrs(n.op, n.attrs) for n in graph.nodes}
    structure = Structure(graph, order, nodes, input_shapes, leaf_path, owner, producer, shapes, canonical)

    attrs = {}
    images = [s for s in input_shapes.values() if s.rank == 4]
    if len(images) == 1 and images[0].dims[2] == images[0].dims[3]:
        attrs["resolution"] = Slot(images[0].dims[2], images[0].dims[2])
    feature = Feature(
        attrs,
        tuple(Slot(shapes[e], shapes[e]) for e in graph.inputs),
        tuple(Slot(shapes[e], shapes[e]) for e in graph.outputs),
    )
    return TailorModule(Kind.MODEL, "", feature, tuple(children), source_nodes=order,
                        inputs=tuple(graph.inputs), outputs=tuple(graph.outputs), structure=structure)


# ---------------------------------------------------------------------------
# driver


def _check_dim(model: TailorModule, dim: Dim) -> None:
    for value in dim.candidates:
        try:
            update(transform(model, Modification(dim.dim_id, value)))
        except (TransformError, LegalityError) as exc:
            raise CompileError(f"{dim.dim_id}: candidate {value!r} is illegal: {exc}") from None


def bind_space(model: TailorModule, cfg: SpaceConfig) -> ModificationSpace:
    """Instantiate config dimensions against the compiled module tree."""
    dims = []
    for name, values in cfg.global_vars.items():
        slot = model.feature.attrs.get(name)
        if slot is None:
            raise CompileError(f"global modification {name!r} has no target (model input is not a square image)")
        if slot.meta not in values:
            raise CompileError(f"global_vars.{name}: candidates {list(values)} must include the original value {slot.meta}")
        dims.append(Dim(f"global/{name}", "global", values, slot.meta))

    stages = model.stages()
    for name, values in cfg.stage_vars.items():
        bound = 0
        for k, stage in enumerate(stages):
            if "depth" not in stage.feature.attrs:
                continue
            depth = stage.feature.meta("depth")
            legal = tuple(v for v in values if depth + v >= 1)
            if 0 not in legal:
                raise CompileError(f"stage_vars.{name}: candidates {list(values)} must include 0")
            dims.append(Dim(f"{stage.path}/{name}", "stage", legal, 0, stage=k, depth=depth))
            bound += 1
        if not bound:
            raise CompileError(f"stage_vars.{name}: no stage has two or more blocks to reduce")

    block_dims = []
    for key, values in cfg.block_vars.items():
        template, _, hook = key.partition(".")
        bound = 0
        for k, stage in enumerate(stages):
            for j, blk in enumerate(stage.children):
                if blk.template_name != template:
                    continue
                if hook not in blk.feature.attrs:
                    raise CompileError(f"block_vars.{key}: template {template} exposes no {hook!r} "
                                       f"(hooks: {', '.join(h.name for h in blk.hooks) or 'none'})")
                meta = blk.feature.meta(hook)
                if meta not in values:
                    raise CompileError(f"block_vars.{key}: candidates {list(values)} must include "
                                       f"the original value {meta} of {blk.path}")
                block_dims.append(Dim(f"{blk.path}/{hook}", "block", values, meta, stage=k, block=j))
                bound += 1
        if not bound:
            raise CompileError(f"block_vars.{key}: no {template} block in the model")
    block_dims.sort(key=lambda d: (d.stage, d.block))
    dims.extend(block_dims)

    space = ModificationSpace(dims)
    for d in space.dims:
        _check_dim(model, d)
    return space


def compile(g: ComputationGraph, cfg: SpaceConfig | None = None,
            templates: Sequence[BlockTemplate] = SHIPPED_TEMPLATES) -> tuple[TailorModule, ModificationSpace]:
    """Compile ``g`` into a SuperNet and bind the modification space of ``cfg``."""
    cfg = cfg or SpaceConfig()
    by_name = {t.name: t for t in templates}
    if cfg.blocks is None:
        active, forced = list(templates), False
    else:
        unknown = [b for b in cfg.blocks if b not in by_name and b != DEFAULT_BLOCK]
        if unknown:
            raise CompileError(f"[arch] blocks: unknown template(s) {unknown} (known: {', '.join(by_name)})")
        active, forced = [by_name[b] for b in cfg.blocks if b in by_name], True

    mods = parse_operators(g)
    mods = match_blocks(mods, active, forced, g.outputs)
    if forced:
        found = Counter(m.template_name for m in mods if not m.is_leaf)
        missing = [t.name for t in active if not found[t.name]]
        if missing:
            raise CompileError(f"[arch] blocks: template(s) {missing} match nothing in the model")
    model = divide_stages(mods, g)
    space = bind_space(model, cfg)
    model = update(model)
    log.info("compiled %s: %d stages, %d dims", g.metadata.get("name", "graph"), len(model.stages()), len(space))
    return model, space


compile_graph = compile


def compile_report(model: TailorModule, space: ModificationSpace) -> str:
    """Deterministic plain-text summary of a compiled model."""
    st = model.structure
    leaves = list(model.leaves())
    dynamic = sum(1 for m in leaves if m.kind == Kind.OPERATOR)
    bypass = [m for m in leaves if m.kind == Kind.BYPASS]
    custom = [m for m in leaves if is_custom(m.node.op)]
    loose = [m for m in model.children if m.is_leaf]
    blocks = list(model.blocks())
    counts = Counter(b.template_name for b in blocks)

    lines = [
        f"graph: {st.graph.metadata.get('name', '')}",
        f"nodes: {len(leaves)}",
        f"dynamic_operators: {dynamic}",
        f"static_bypass: {len(bypass)}",
        f"custom_ops: {len(custom)}",
    ]
    lines += [f"  custom {m.path} {m.node.op} ({m.node.id})" for m in custom]
    lines.append(f"unmatched_ops: {len(loose)}")
    lines += [f"  unmatched {m.path} {m.node.op} ({m.node.id})" for m in loose]
    lines.append(f"blocks: {len(blocks)}")
    for name in sorted(counts):
        lines.append(f"  {name}: {counts[name]}")
    lines.append(f"stages: {len(model.stages())}")
    for stage in model.stages():
        depth = stage.feature.attrs.get("depth")
        kinds = ",".join(b.template_name for b in stage.children)
        lines.append(f"  {stage.path} depth={len(stage.children)} elastic={'yes' if depth else 'no'} "
                     f"out={stage.feature.out_shapes[0].meta} blocks=[{kinds}]")
    lines.append(f"dims: {len(space)}")
    for d in space.dims:
        cands = ",".join(str(c) for c in d.candidates)
        lines.append(f"  {d.dim_id} [{cands}] default={d.default}")
    lines.append(f"variants: {count_variants(space, model)}")
    return "\n".join(lines) + "\n"
