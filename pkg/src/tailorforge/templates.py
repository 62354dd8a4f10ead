"""Block templates and the anchored DAG matcher used to recognise them.

A template is a small DAG of op-type predicates.  Every pattern node reads
from ``"entry"`` (the block's single input edge) or from earlier pattern
nodes; the last present node is the block's exit.  Optional nodes are
expanded into concrete variants up front, so matching itself is a plain
backtracking search anchored at one entry edge.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

ACTIVATIONS = frozenset({"relu", "gelu"})


@dataclass(frozen=True)
class PatternNode:
    name: str
    ops: frozenset[str]
    inputs: tuple[str, ...]
    optional: bool = False
    commutative: bool = False


def P(name, ops, *inputs, optional=False, commutative=False) -> PatternNode:
    ops = frozenset({ops} if isinstance(ops, str) else ops)
    return PatternNode(name, ops, tuple(inputs), optional, commutative)


@dataclass(frozen=True)
class HookSpec:
    """Width knob: ``targets`` scale with the ratio against the entry width on ``axis``."""

    name: str
    targets: tuple[tuple[str, str], ...]
    axis: int


@dataclass(frozen=True)
class BlockTemplate:
    name: str
    pattern: tuple[PatternNode, ...] = ()
    hooks: tuple[HookSpec, ...] = ()
    variants: tuple[tuple[PatternNode, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = set()
        for p in self.pattern:
            for ref in p.inputs:
                if ref != "entry" and ref not in names:
                    raise ValueError(f"{self.name}: {p.name} reads {ref!r} before it is defined")
            names.add(p.name)
        if self.pattern:
            if not any("entry" in p.inputs for p in self.pattern):
                raise ValueError(f"{self.name}: pattern never reads the entry edge")
            used = {r for p in self.pattern for r in p.inputs}
            dangling = [p.name for p in self.pattern[:-1] if p.name not in used and not p.optional]
            if dangling:
                raise ValueError(f"{self.name}: nodes {dangling} are neither consumed nor the exit")
        required = {p.name for p in self.pattern if not p.optional}
        for hook in self.hooks:
            for target, _ in hook.targets:
                if target not in required:
                    raise ValueError(f"{self.name}: hook target {target!r} must be a required node")
        object.__setattr__(self, "variants", tuple(self._expand()))

    @property
    def hook_names(self) -> tuple[str, ...]:
        return tuple(h.name for h in self.hooks)

    def _expand(self):
        optional = [p.name for p in self.pattern if p.optional]
        seen = set()
        # larger variants first so the longest match at an anchor is found first
        for k in range(len(optional) + 1):
            for dropped in itertools.combinations(optional, k):
                dropped = set(dropped)
                redirect = {}
                nodes = []
                for p in self.pattern:
                    ins = tuple(redirect.get(r, r) for r in p.inputs)
                    if p.name in dropped:
                        redirect[p.name] = ins[0]
                        continue
                    nodes.append(PatternNode(p.name, p.ops, ins, False, p.commutative))
                key = tuple(nodes)
                if key in seen or not nodes:
                    continue
                seen.add(key)
                yield key


DEFAULT_BLOCK = "DefaultBlock"

FFN_BLOCK = BlockTemplate(
    "FFNBlock",
    (
        P("norm", "layernorm", "entry", optional=True),
        P("fc1", "matmul", "norm"),
        P("bias1", "add", "fc1", optional=True),
        P("act", ACTIVATIONS, "bias1"),
        P("fc2", "matmul", "act"),
        P("bias2", "add", "fc2", optional=True),
        P("residual", "add", "entry", "bias2", optional=True, commutative=True),
    ),
    (HookSpec("expand_ratio", (("fc1", "out_features"),), -1),),
)

RESIDUAL_CONV_BLOCK = BlockTemplate(
    "ResidualConvBlock",
    (
        P("conv1", "conv2d", "entry"),
        P("bn1", "batchnorm", "conv1", optional=True),
        P("act1", ACTIVATIONS, "bn1"),
        P("conv2", "conv2d", "act1"),
        P("bn2", "batchnorm", "conv2", optional=True),
        P("residual", "add", "entry", "bn2", commutative=True),
        P("act2", ACTIVATIONS, "residual", optional=True),
    ),
    (HookSpec("expand_ratio", (("conv1", "out_channels"),), 1),),
)

INVERTED_RESIDUAL_BLOCK = BlockTemplate(
    "InvertedResidualBlock",
    (
        P("expand", "conv2d", "entry"),
        P("bn1", "batchnorm", "expand", optional=True),
        P("act1", ACTIVATIONS, "bn1"),
        P("dw", "depthwise_conv2d", "act1"),
        P("bn2", "batchnorm", "dw", optional=True),
        P("act2", ACTIVATIONS, "bn2"),
        P("project", "conv2d", "act2"),
        P("bn3", "batchnorm", "project", optional=True),
        P("residual", "add", "entry", "bn3", optional=True, commutative=True),
    ),
    (HookSpec("expand_ratio", (("expand", "out_channels"),), 1),),
)

ATTENTION_BLOCK = BlockTemplate(
    "AttentionBlock",
    (
        P("norm", "layernorm", "entry", optional=True),
        P("q", "matmul", "norm"),
        P("k", "matmul", "norm"),
        P("v", "matmul", "norm"),
        P("kt", "transpose", "k"),
        P("scores", "matmul", "q", "kt"),
        P("attn", "softmax", "scores"),
        P("context", "matmul", "attn", "v"),
        P("proj", "matmul", "context"),
        P("bias", "add", "proj", optional=True),
        P("residual", "add", "entry", "bias", optional=True, commutative=True),
    ),
    (HookSpec("attn_ratio", (("q", "out_features"), ("k", "out_features"), ("v", "out_features")), -1),),
)

SHIPPED_TEMPLATES: tuple[BlockTemplate, ...] = (
    FFN_BLOCK,
    RESIDUAL_CONV_BLOCK,
    INVERTED_RESIDUAL_BLOCK,
    ATTENTION_BLOCK,
)

TEMPLATE_NAMES = tuple(t.name for t in SHIPPED_TEMPLATES) + (DEFAULT_BLOCK,)


def template_by_name(name: str, templates: Iterable[BlockTemplate] = SHIPPED_TEMPLATES) -> BlockTemplate:
    for t in templates:
        if t.name == name:
            return t
    raise KeyError(name)


@dataclass(frozen=True)
class Match:
    template: BlockTemplate
    variant: int
    binding: tuple[tuple[str, str], ...]  # (pattern name, node id) in pattern order
    entry: str
    exit: str

    @property
    def node_ids(self) -> tuple[str, ...]:
        return tuple(nid for _, nid in self.binding)

    def node_for(self, pattern_name: str) -> str:
        return dict(self.binding)[pattern_name]


def _match_variant(variant, entry, consumers, nodes, graph_outputs):
    bound: dict[str, str] = {}
    used: set[str] = set()

    def edge_of(ref):
        return entry if ref == "entry" else nodes[bound[ref]].outputs[0]

    def rec(i):
        if i == len(variant):
            yield dict(bound)
            return
        p = variant[i]
        want = [edge_of(r) for r in p.inputs]
        for node in consumers.get(want[0], ()):
            if node.id in used or node.op not in p.ops:
                continue
            if len(node.inputs) != len(want) or len(node.outputs) != 1:
                continue
            if p.commutative:
                if sorted(node.inputs) != sorted(want):
                    continue
            elif list(node.inputs) != want:
                continue
            bound[p.name] = node.id
            used.add(node.id)
            yield from rec(i + 1)
            del bound[p.name]
            used.discard(node.id)

    exit_name = variant[-1].name
    for binding in rec(0):
        ids = set(binding.values())
        closed = True
        for name, nid in binding.items():
            if name == exit_name:
                continue
            e = nodes[nid].outputs[0]
            if e in graph_outputs or any(c.id not in ids for c in consumers.get(e, ())):
                closed = False
                break
        if closed:
            return binding
    return None


def find_matches(template: BlockTemplate, nodes, consumers, edges, graph_outputs=()) -> list[Match]:
    """All anchored matches of ``template``: one per (entry edge, variant) at most.

    ``nodes`` maps node id -> GraphNode, ``consumers`` maps edge -> list of
    consuming nodes (each node listed once per edge).
    """
    graph_outputs = set(graph_outputs)
    found = []
    for entry in edges:
        if entry not in consumers:
            continue
        for vi, variant in enumerate(template.variants):
            binding = _match_variant(variant, entry, consumers, nodes, graph_outputs)
            if binding is None:
                continue
            ordered = tuple((p.name, binding[p.name]) for p in variant)
            found.append(Match(template, vi, ordered, entry, nodes[ordered[-1][1]].outputs[0]))
    return found


def hook_meta_value(meta_width: int, base_width: int):
    ratio = Fraction(meta_width, base_width)
    return int(ratio) if ratio.denominator == 1 else float(ratio)
