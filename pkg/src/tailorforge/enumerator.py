"""Unique-operator extraction with modification-dependency pruning.

An operator's key only changes with the dimensions that reach its attributes
or input shapes.  ``dependency_groups`` finds those dimensions statically by
tagging tensor axes with the dims that can resize them; enumeration then
iterates only each position's own dims instead of the whole design space.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .errors import ArtifactError
from .graph import TensorShape, is_custom
from .ir import PASS_THROUGH, ActiveState, TailorModule, resolve_active
from .modspace import ModificationSpace, _transformed

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "tailorforge-manifest/1"


# ---------------------------------------------------------------------------
# keys


@dataclass(frozen=True)
class OpFeature:
    op: str
    attrs: tuple[tuple[str, object], ...]  # sorted by name
    in_shapes: tuple[TensorShape, ...]
    out_shapes: tuple[TensorShape, ...]

    def text(self) -> str:
        attrs = json.dumps(dict(self.attrs), sort_keys=True, separators=(",", ":"))
        ins = ",".join(str(s) for s in self.in_shapes)
        outs = ",".join(str(s) for s in self.out_shapes)
        return f"{self.op}{attrs}|{ins}|{outs}"

    @classmethod
    def parse(cls, text: str) -> "OpFeature":
        head, ins, outs = text.rsplit("|", 2)
        brace = head.index("{")
        attrs = json.loads(head[brace:])
        attrs = tuple((k, tuple(v) if isinstance(v, list) else v) for k, v in sorted(attrs.items()))
        parse = lambda part: tuple(TensorShape.parse(s) for s in part.split(",")) if part else ()  # noqa: E731
        return cls(head[:brace], attrs, parse(ins), parse(outs))


@dataclass(frozen=True)
class OperatorFeatureKey:
    """Canonical identity of a (possibly fused) operator configuration."""

    op_seq: tuple[OpFeature, ...]
    text: str = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "text", " + ".join(f.text() for f in self.op_seq))

    def __str__(self):
        return self.text

    def __eq__(self, other):
        return isinstance(other, OperatorFeatureKey) and self.text == other.text

    def __hash__(self):
        return hash(self.text)

    def __lt__(self, other):
        return self.text < other.text

    @property
    def fused(self) -> bool:
        return len(self.op_seq) > 1

    @classmethod
    def parse(cls, text: str) -> "OperatorFeatureKey":
        return cls(tuple(OpFeature.parse(part) for part in text.strip().split(" + ")))


def _freeze(v):
    return tuple(v) if isinstance(v, list) else v


def op_feature(op: str, attrs: Mapping, ins, outs) -> OpFeature:
    return OpFeature(op, tuple((k, _freeze(attrs[k])) for k in sorted(attrs)), tuple(ins), tuple(outs))


# ---------------------------------------------------------------------------
# fusion


@dataclass(frozen=True)
class FusionRule:
    name: str
    pattern: tuple[str, ...]

    def __post_init__(self):
        if len(self.pattern) < 2:
            raise ValueError(f"fusion rule {self.name!r} needs at least two ops")

    @classmethod
    def parse(cls, text: str) -> "FusionRule":
        """``conv2d->batchnorm->relu`` (optionally ``name=...``)."""
        name, sep, chain = text.partition("=")
        if not sep:
            chain, name = name, name.replace("->", "_")
        return cls(name.strip(), tuple(p.strip() for p in chain.split("->")))


DEFAULT_FUSION_RULES: tuple[FusionRule, ...] = (
    FusionRule("conv_bn_relu", ("conv2d", "batchnorm", "relu")),
    FusionRule("conv_bn", ("conv2d", "batchnorm")),
    FusionRule("matmul_add", ("matmul", "add")),
    FusionRule("conv_relu", ("conv2d", "relu")),
)


def format_fusion_rules(rules: Sequence[FusionRule] | None) -> str:
    return ";".join(f"{r.name}={'->'.join(r.pattern)}" for r in (rules or ()))


def parse_fusion_rules(text: str) -> tuple[FusionRule, ...]:
    """``default``, ``none``/empty, or ``name=a->b;c->d`` lists."""
    text = text.strip()
    if text == "default":
        return DEFAULT_FUSION_RULES
    if text in ("", "none"):
        return ()
    try:
        return tuple(FusionRule.parse(part) for part in text.split(";") if part.strip())
    except ValueError as exc:
        raise ArtifactError(f"bad fusion rules {text!r}: {exc}") from None


def ruleset_hash(rules: Sequence[FusionRule] | None) -> str:
    text = format_fusion_rules(rules)
    return hashlib.sha256(text.encode()).hexdigest()[:16] if text else "none"


def fusion_groups(model: TailorModule, rules: Sequence[FusionRule] | None) -> list[tuple[str, ...]]:
    """Static grouping of node ids into costing units, in topological order.

    Greedy left-to-right, longest rule first.  A chain link must be the sole
    consumer of a non-output edge, and chains never leave their block (or the
    model level), so groups do not depend on the active depth.
    """
    st = model.structure
    consumers: dict[str, list[str]] = {}
    for nid in st.order:
        for e in st.nodes[nid].inputs:
            consumers.setdefault(e, []).append(nid)
    outputs = set(st.graph.outputs)
    ordered = sorted(rules or (), key=lambda r: -len(r.pattern))

    grouped: set[str] = set()
    groups = []
    for nid in st.order:
        if nid in grouped:
            continue
        chosen = (nid,)
        for rule in ordered:
            chain = [nid]
            cur = nid
            for want in rule.pattern[1:]:
                node = st.nodes[cur]
                if node.op != rule.pattern[len(chain) - 1] or len(node.outputs) != 1:
                    break
                e = node.outputs[0]
                nxt = consumers.get(e, [])
                if e in outputs or len(nxt) != 1:
                    break
                c = nxt[0]
                if c in grouped or st.nodes[c].op != want or st.owner[c] != st.owner[nid]:
                    break
                chain.append(c)
                cur = c
            if len(chain) == len(rule.pattern) and st.nodes[nid].op == rule.pattern[0]:
                chosen = tuple(chain)
                break
        grouped.update(chosen)
        groups.append(chosen)
    return groups


# ---------------------------------------------------------------------------
# keys under a spec


INACTIVE = None


def state_for(model: TailorModule, spec: Mapping, space: ModificationSpace | None = None) -> ActiveState:
    """Resolved active state (legality-checked) of ``spec``."""
    return resolve_active(_transformed(model, spec, space))


def group_key(state: ActiveState, model: TailorModule, group: Sequence[str]) -> OperatorFeatureKey | None:
    if group[0] in state.inactive:
        return INACTIVE
    st = model.structure
    return OperatorFeatureKey(tuple(
        op_feature(st.nodes[n].op, state.attrs[n], state.in_shapes[n], state.out_shapes[n]) for n in group
    ))


def key_of(op_path: str, spec: Mapping, model: TailorModule, fusion_rules=None,
           space: ModificationSpace | None = None) -> OperatorFeatureKey | None:
    """Key of the operator (or fused group containing it) at ``op_path``; None if inactive."""
    st = model.structure
    by_path = {p: n for n, p in st.leaf_path.items()}
    if op_path not in by_path:
        raise KeyError(f"no operator at {op_path!r}")
    nid = by_path[op_path]
    group = next(g for g in fusion_groups(model, fusion_rules) if nid in g)
    return group_key(state_for(model, spec, space), model, group)


def active_keys(state: ActiveState, model: TailorModule, groups) -> list[OperatorFeatureKey]:
    """Keys of every active costing unit, in topological order."""
    out = []
    for g in groups:
        k = group_key(state, model, g)
        if k is not None:
            out.append(k)
    return out


# ---------------------------------------------------------------------------
# dependency analysis


def _hook_targets(model: TailorModule, space: ModificationSpace) -> dict[str, set[str]]:
    """node id -> block dims that rewrite one of its attributes."""
    out: dict[str, set[str]] = {}
    for d in space.dims:
        if d.scope != "block":
            continue
        path, _, name = d.dim_id.rpartition("/")
        block = model.find(path)
        for hook in block.hooks:
            if hook.name == name:
                for nid, _, _ in hook.targets:
                    out.setdefault(nid, set()).add(d.dim_id)
    return out


def _axis(a, rank):
    return a + rank if a < 0 else a


def _propagate(op, attrs, ins: list[tuple[frozenset, ...]], out_ranks, own: frozenset):
    """Axis tags of each output given input axis tags."""
    empty = frozenset()
    x = ins[0]
    if op in PASS_THROUGH or is_custom(op) or op in ("add", "mul"):
        if len(ins) == 1:
            return [x] * len(out_ranks)
        merged = tuple(frozenset().union(*(t[i] for t in ins)) for i in range(len(x)))
        return [merged] * len(out_ranks)
    if op == "conv2d":
        return [(x[0], own, x[2], x[3])]
    if op in ("depthwise_conv2d", "pool_avg", "pool_max"):
        return [x]
    if op == "global_pool":
        return [(x[0], x[1], empty, empty)]
    if op == "matmul":
        if len(ins) == 1:
            return [x[:-1] + (own,)]
        a, b = ins
        batch = tuple(a[i] | b[i] for i in range(len(a) - 2))
        return [batch + (a[-2], b[-1])]
    if op == "reshape":
        everything = frozenset().union(*x)
        return [tuple(everything if d == -1 else empty for d in attrs["shape"])]
    if op == "transpose":
        return [tuple(x[i] for i in attrs["perm"])]
    if op == "concat":
        return [tuple(frozenset().union(*(t[i] for t in ins)) for i in range(len(x)))]
    if op == "split":
        a = _axis(attrs["axis"], len(x))
        return [tuple(empty if i == a else x[i] for i in range(len(x)))] * len(out_ranks)
    # unknown ops: every output axis may depend on everything upstream
    everything = frozenset().union(*(frozenset().union(*t) for t in ins))
    return [(everything,) * r for r in out_ranks]


def dependency_groups(model: TailorModule, space: ModificationSpace) -> dict[str, frozenset[str]]:
    """Leaf path -> dims whose value can change that operator's key.

    Depth dims never appear: dropping shape-preserving blocks leaves every
    surviving operator's shapes untouched.
    """
    st = model.structure
    hooks = _hook_targets(model, space)
    tags: dict[str, tuple[frozenset, ...]] = {}
    res_dims = frozenset(d.dim_id for d in space.dims if d.scope == "global" and d.dim_id.endswith("/resolution"))
    for e in st.graph.inputs:
        shape = st.meta_shapes[e]
        if shape.rank == 4 and "resolution" in model.feature.attrs:
            tags[e] = (frozenset(), frozenset(), res_dims, res_dims)
        else:
            tags[e] = (frozenset(),) * shape.rank

    deps = {}
    for nid in st.order:
        node = st.nodes[nid]
        ins = [tags[e] for e in node.inputs]
        own = frozenset(hooks.get(nid, ()))
        deps[st.leaf_path[nid]] = own.union(*(t for axes in ins for t in axes))
        outs = _propagate(node.op, st.canonical[nid], ins, [st.meta_shapes[e].rank for e in node.outputs], own)
        for e, t in zip(node.outputs, outs):
            tags[e] = t
    return deps


# ---------------------------------------------------------------------------
# enumeration


@dataclass
class EnumerationStats:
    positions: int = 0
    computations: int = 0
    bound: int = 0  # sum over positions of prod |candidates| of their deps
    states: int = 0  # distinct resolved specs


def _position_specs(space: ModificationSpace, dims: Sequence[str]):
    cands = [space.dim(d).candidates for d in dims]
    for values in itertools.product(*cands):
        yield tuple(zip(dims, values))


def _enumerate_chunk(model, space, groups, deps_per_group):
    cache: dict[tuple, ActiveState] = {}
    keys = set()
    computations = 0
    for group, dims in zip(groups, deps_per_group):
        for assignment in _position_specs(space, dims):
            frozen = tuple(sorted(assignment))
            state = cache.get(frozen)
            if state is None:
                state = cache[frozen] = state_for(model, dict(assignment), space)
            keys.add(group_key(state, model, group))
            computations += 1
    return keys, computations, len(cache)


def enumerate_with_stats(model: TailorModule, space: ModificationSpace, fusion_rules=None,
                         jobs: int = 1) -> tuple[set[OperatorFeatureKey], EnumerationStats]:
    deps = dependency_groups(model, space)
    st = model.structure
    order = {d.dim_id: i for i, d in enumerate(space.dims)}
    groups = fusion_groups(model, fusion_rules)
    group_deps = []
    for g in groups:
        dims = set().union(*(deps[st.leaf_path[n]] for n in g))
        group_deps.append(tuple(sorted(dims, key=order.__getitem__)))

    stats = EnumerationStats(positions=len(groups))
    for dims in group_deps:
        n = 1
        for d in dims:
            n *= len(space.dim(d).candidates)
        stats.bound += n

    keys: set[OperatorFeatureKey] = set()
    if jobs <= 1 or len(groups) < 2:
        keys, stats.computations, stats.states = _enumerate_chunk(model, space, groups, group_deps)
    else:
        chunks = [(groups[i::jobs], group_deps[i::jobs]) for i in range(jobs)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_enumerate_chunk, model, space, g, d) for g, d in chunks if g]
            for fut in futures:
                part, comps, states = fut.result()
                keys |= part
                stats.computations += comps
                stats.states += states
    log.info("enumerated %d unique keys from %d positions (%d key computations)",
             len(keys), stats.positions, stats.computations)
    return keys, stats


def enumerate_unique_operators(model: TailorModule, space: ModificationSpace, fusion_rules=None,
                               jobs: int = 1) -> set[OperatorFeatureKey]:
    """Every distinct (fused) operator key over all SubNets of ``space``."""
    return enumerate_with_stats(model, space, fusion_rules, jobs)[0]


# ---------------------------------------------------------------------------
# manifest file


def format_manifest(keys: Iterable[OperatorFeatureKey], fusion_rules=None, model_name: str = "") -> str:
    texts = sorted({k.text for k in keys})
    lines = [
        f"# {MANIFEST_FORMAT}",
        f"# model: {model_name}",
        f"# fusion: {ruleset_hash(fusion_rules)}",
        f"# fusion_rules: {format_fusion_rules(fusion_rules)}",
        f"# keys: {len(texts)}",
    ]
    return "\n".join(lines + texts) + "\n"


def parse_manifest(text: str) -> tuple[list[OperatorFeatureKey], dict[str, str]]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != f"# {MANIFEST_FORMAT}":
        raise ArtifactError(f"not a {MANIFEST_FORMAT} manifest (header: {lines[0] if lines else '<empty>'!r})")
    meta, keys = {}, []
    for line in lines[1:]:
        if line.startswith("#"):
            k, _, v = line[1:].partition(":")
            meta[k.strip()] = v.strip()
        elif line.strip():
            try:
                keys.append(OperatorFeatureKey.parse(line))
            except (ValueError, KeyError) as exc:
                raise ArtifactError(f"malformed manifest key {line!r}: {exc}") from None
    if "keys" in meta and int(meta["keys"]) != len(keys):
        raise ArtifactError(f"manifest declares {meta['keys']} keys but lists {len(keys)}")
    return keys, meta
