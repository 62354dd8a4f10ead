"""Modification spaces: config parsing, SubNet specs, counting and sampling.

The config format is TOML::

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

from __future__ import annotations

import math
import random
import sys
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Any, Iterator

from .errors import ConfigError, SpecError
from .graph import ComputationGraph
from .ir import Modification, TailorModule, build_pending, transform, update

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

GLOBAL_VARS = ("resolution",)
STAGE_VARS = ("reduce_depth",)


@dataclass(frozen=True)
class SpaceConfig:
    title: str = ""
    blocks: tuple[str, ...] | None = None  # None: every shipped template is eligible
    global_vars: Mapping[str, tuple] = field(default_factory=dict)
    stage_vars: Mapping[str, tuple] = field(default_factory=dict)
    block_vars: Mapping[str, tuple] = field(default_factory=dict)  # "Template.attr" -> choices

    @property
    def is_empty(self) -> bool:
        return not (self.global_vars or self.stage_vars or self.block_vars)


def _choices(where: str, raw) -> tuple:
    if not isinstance(raw, list) or not raw:
        raise ConfigError(f"{where}: expected a non-empty list of numbers")
    for v in raw:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{where}: {v!r} is not a number")
    if len(set(raw)) != len(raw):
        raise ConfigError(f"{where}: duplicate choices in {raw}")
    return tuple(raw)


def parse_config(text: str) -> SpaceConfig:
    """Parse a modification-space config document."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config syntax error: {exc}") from None
    unknown = set(doc) - {"title", "arch", "var"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")

    blocks = None
    arch = doc.get("arch", {})
    if set(arch) - {"blocks"}:
        raise ConfigError(f"unknown [arch] keys: {sorted(set(arch) - {'blocks'})}")
    if "blocks" in arch:
        if not isinstance(arch["blocks"], list) or not all(isinstance(b, str) for b in arch["blocks"]):
            raise ConfigError("[arch] blocks must be a list of template names")
        blocks = tuple(arch["blocks"])

    var = doc.get("var", {})
    if set(var) - {"global_vars", "stage_vars", "block_vars"}:
        raise ConfigError(f"unknown [var] sections: {sorted(set(var) - {'global_vars', 'stage_vars', 'block_vars'})}")

    global_vars = {}
    for name, raw in var.get("global_vars", {}).items():
        if name not in GLOBAL_VARS:
            raise ConfigError(f"unsupported global modification {name!r} (supported: {', '.join(GLOBAL_VARS)})")
        values = _choices(f"global_vars.{name}", raw)
        if any(not isinstance(v, int) or v < 1 for v in values):
            raise ConfigError(f"global_vars.{name}: resolutions must be positive integers")
        global_vars[name] = values

    stage_vars = {}
    for name, raw in var.get("stage_vars", {}).items():
        if name not in STAGE_VARS:
            raise ConfigError(f"unsupported stage modification {name!r} (supported: {', '.join(STAGE_VARS)})")
        values = _choices(f"stage_vars.{name}", raw)
        if any(not isinstance(v, int) or v > 0 for v in values):
            raise ConfigError(f"stage_vars.{name}: depth can only be reduced (integers <= 0), got {list(values)}")
        stage_vars[name] = values

    block_vars = {}
    for template, hooks in var.get("block_vars", {}).items():
        if not isinstance(hooks, dict):
            raise ConfigError(f"block_vars.{template}: expected Template.attr = [choices]")
        for hook, raw in hooks.items():
            values = _choices(f"block_vars.{template}.{hook}", raw)
            if any(v <= 0 for v in values):
                raise ConfigError(f"block_vars.{template}.{hook}: ratios must be positive")
            block_vars[f"{template}.{hook}"] = values

    return SpaceConfig(str(doc.get("title", "")), blocks, global_vars, stage_vars, block_vars)


def read_config(path) -> SpaceConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


# ---------------------------------------------------------------------------
# spaces and specs


@dataclass(frozen=True)
class Dim:
    dim_id: str
    scope: str  # "global" | "stage" | "block"
    candidates: tuple
    default: Any
    stage: int | None = None
    block: int | None = None
    depth: int | None = None  # max depth, stage dims only

    def __post_init__(self):
        if not self.candidates:
            raise SpecError(f"{self.dim_id}: empty candidate list")
        if len(set(self.candidates)) != len(self.candidates):
            raise SpecError(f"{self.dim_id}: duplicate candidates")
        if self.default not in self.candidates:
            raise SpecError(f"{self.dim_id}: default {self.default!r} not among candidates {list(self.candidates)}")


class SubNetSpec(Mapping):
    """Immutable assignment dim_id -> value; absent dims take their default."""

    __slots__ = ("_items", "_hash")

    def __init__(self, assignment=()):
        self._items = dict(assignment)
        self._hash = None

    def __getitem__(self, key):
        return self._items[key]

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __hash__(self):
        if self._hash is None:
            self._hash = hash(frozenset(self._items.items()))
        return self._hash

    def __repr__(self):
        return f"SubNetSpec({self._items!r})"

    def with_(self, **changes) -> "SubNetSpec":
        items = dict(self._items)
        items.update(changes)
        return SubNetSpec(items)

    def set(self, dim_id, value) -> "SubNetSpec":
        items = dict(self._items)
        items[dim_id] = value
        return SubNetSpec(items)


def _fmt_value(v) -> str:
    if isinstance(v, float) and v.is_integer():
        return repr(v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


class ModificationSpace:
    """Ordered modification dimensions bound to one compiled model."""

    def __init__(self, dims=()):
        self.dims: tuple[Dim, ...] = tuple(dims)
        self._index = {}
        for d in self.dims:
            if d.dim_id in self._index:
                raise SpecError(f"duplicate dimension {d.dim_id}")
            self._index[d.dim_id] = d
        self._depth_dim = {d.stage: d for d in self.dims if d.scope == "stage"}

    def __len__(self):
        return len(self.dims)

    def __iter__(self) -> Iterator[Dim]:
        return iter(self.dims)

    def __contains__(self, dim_id):
        return dim_id in self._index

    def __eq__(self, other):
        return isinstance(other, ModificationSpace) and self.dims == other.dims

    def __repr__(self):
        return f"ModificationSpace({len(self.dims)} dims)"

    def dim(self, dim_id: str) -> Dim:
        try:
            return self._index[dim_id]
        except KeyError:
            raise SpecError(f"unknown dimension {dim_id!r}") from None

    @property
    def dim_ids(self) -> tuple[str, ...]:
        return tuple(d.dim_id for d in self.dims)

    def default_spec(self) -> SubNetSpec:
        return SubNetSpec()

    def value(self, spec: Mapping, dim_id: str):
        return spec.get(dim_id, self._index[dim_id].default)

    def validate(self, spec: Mapping) -> None:
        for k, v in spec.items():
            d = self.dim(k)
            if v not in d.candidates:
                raise SpecError(f"{k}: value {v!r} not among candidates {list(d.candidates)}")

    def is_dim_active(self, spec: Mapping, dim: Dim) -> bool:
        """False for block dims whose block is dropped by the stage depth."""
        if dim.scope != "block":
            return True
        depth_dim = self._depth_dim.get(dim.stage)
        if depth_dim is None:
            return True
        depth = depth_dim.depth + self.value(spec, depth_dim.dim_id)
        return dim.block < depth

    def normalize(self, spec: Mapping) -> SubNetSpec:
        """Canonical spec: only non-default values of dims that still exist."""
        self.validate(spec)
        out = {}
        for d in self.dims:
            if d.dim_id in spec and spec[d.dim_id] != d.default and self.is_dim_active(spec, d):
                out[d.dim_id] = spec[d.dim_id]
        return SubNetSpec(out)

    def vector(self, spec: Mapping) -> tuple:
        """Full value vector in dimension order (defaults filled)."""
        return tuple(spec.get(d.dim_id, d.default) for d in self.dims)

    def from_vector(self, values) -> SubNetSpec:
        return self.normalize({d.dim_id: v for d, v in zip(self.dims, values)})

    def format_spec(self, spec: Mapping) -> str:
        spec = self.normalize(spec)
        if not spec:
            return "default"
        return ";".join(f"{d.dim_id}={_fmt_value(spec[d.dim_id])}" for d in self.dims if d.dim_id in spec)

    def parse_spec(self, text: str) -> SubNetSpec:
        text = text.strip()
        if text in ("", "default"):
            return SubNetSpec()
        items = {}
        for part in text.split(";"):
            key, sep, raw = part.partition("=")
            if not sep:
                raise SpecError(f"malformed spec item {part!r} (expected dim=value)")
            d = self.dim(key.strip())
            value = _parse_value(raw.strip())
            match = [c for c in d.candidates if c == value]
            if not match:
                raise SpecError(f"{d.dim_id}: value {value!r} not among candidates {list(d.candidates)}")
            items[d.dim_id] = match[0]
        return self.normalize(items)

    def stage_groups(self):
        """{stage index: (depth dim or None, {block index: [dims]})}."""
        groups: dict[int, tuple[Dim | None, dict[int, list[Dim]]]] = {}
        for d in self.dims:
            if d.scope == "global":
                continue
            depth_dim, blocks = groups.get(d.stage, (None, {}))
            if d.scope == "stage":
                depth_dim = d
            else:
                blocks.setdefault(d.block, []).append(d)
            groups[d.stage] = (depth_dim, blocks)
        return groups

    def iter_specs(self) -> Iterator[SubNetSpec]:
        """Every distinct (normalized) SubNet, depth-collapsed, in a fixed order."""
        global_dims = [d for d in self.dims if d.scope == "global"]
        per_stage = []
        for stage, (depth_dim, blocks) in sorted(self.stage_groups().items()):
            options = []
            if depth_dim is None:
                dims = [d for b in sorted(blocks) for d in blocks[b]]
                options = [dict(zip([d.dim_id for d in dims], vals)) for vals in _product(dims)]
            else:
                for r in depth_dim.candidates:
                    depth = depth_dim.depth + r
                    dims = [d for b in sorted(blocks) if b < depth for d in blocks[b]]
                    for vals in _product(dims):
                        opt = dict(zip([d.dim_id for d in dims], vals))
                        opt[depth_dim.dim_id] = r
                        options.append(opt)
            per_stage.append(options)
        for gvals in _product(global_dims):
            base = dict(zip([d.dim_id for d in global_dims], gvals))
            for combo in _cartesian(per_stage):
                spec = dict(base)
                for part in combo:
                    spec.update(part)
                yield self.normalize(spec)


def _product(dims):
    if not dims:
        yield ()
        return
    import itertools

    yield from itertools.product(*(d.candidates for d in dims))


def _cartesian(lists):
    import itertools

    return itertools.product(*lists) if lists else iter([()])


def count_variants(space: ModificationSpace, model: TailorModule | None = None) -> int:
    """Number of distinct architectures; choices of depth-dropped blocks collapse."""
    total = 1
    for d in space.dims:
        if d.scope == "global":
            total *= len(d.candidates)
    for _, (depth_dim, blocks) in sorted(space.stage_groups().items()):
        per_block = {b: math.prod(len(d.candidates) for d in dims) for b, dims in blocks.items()}
        if depth_dim is None:
            total *= math.prod(per_block.values())
            continue
        stage_total = 0
        for r in depth_dim.candidates:
            depth = depth_dim.depth + r
            stage_total += math.prod(n for b, n in per_block.items() if b < depth)
        total *= stage_total
    return total


def sample_subnet(space: ModificationSpace, seed) -> SubNetSpec:
    """Uniform independent choice per dimension, normalized.

    ``seed`` may be an int or a ``random.Random`` (which is advanced).
    """
    rng = seed if isinstance(seed, random.Random) else random.Random(seed)
    return space.normalize({d.dim_id: rng.choice(d.candidates) for d in space.dims})


def _transformed(model: TailorModule, spec: Mapping, space: ModificationSpace | None) -> TailorModule:
    if space is not None:
        space.validate(spec)
        order = [d.dim_id for d in space.dims if d.dim_id in spec]
    else:
        order = sorted(spec)
    m = model
    for dim_id in order:
        m = transform(m, Modification(dim_id, spec[dim_id]))
    return m


def apply_modifications(model: TailorModule, spec: Mapping, space: ModificationSpace | None = None) -> TailorModule:
    """Transform + update: the updated module tree for ``spec``."""
    return update(_transformed(model, spec, space))


def apply_subnet(model: TailorModule, spec: Mapping, space: ModificationSpace | None = None) -> ComputationGraph:
    """Chain the transforms of ``spec``, check legality, and build the SubNet graph."""
    return build_pending(_transformed(model, spec, space))
