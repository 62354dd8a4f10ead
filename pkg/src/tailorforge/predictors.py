"""Learning-free predictors: operator LUT latency/energy, memory, accuracy.

Latency and energy are sums of per-unique-operator LUT entries.  Accuracy
is the SuperNet baseline minus the summed single-modification drops.
"""

from __future__ import annotations

import hashlib
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Protocol

from .enumerator import (
    OperatorFeatureKey,
    OpFeature,
    active_keys,
    format_fusion_rules,
    fusion_groups,
    ruleset_hash,
    state_for,
)
from .errors import ArtifactError, MissingKeyError, OracleError, PartialLUTError
from .graph import DTYPE_SIZES
from .ir import TailorModule
from .modspace import ModificationSpace, SubNetSpec

LUT_FORMAT = "tailorforge-lut/1"
SENSITIVITY_FORMAT = "tailorforge-sensitivity/1"
ORACLE_FORMAT = "tailorforge-accuracy/1"


# ---------------------------------------------------------------------------
# cost backends


@dataclass(frozen=True)
class Measurement:
    latency_ms: float
    energy_mj: float | None = None


class CostBackend(Protocol):
    backend_id: str
    parallel_safe: bool

    def measure(self, key: OperatorFeatureKey) -> Measurement: ...


def mult_adds(f: OpFeature) -> int:
    """Multiply-accumulate count of one operator configuration."""
    attrs = dict(f.attrs)
    out = f.out_shapes[0]
    if f.op == "conv2d":
        return out.numel * attrs["kernel"] ** 2 * f.in_shapes[0].dims[1]
    if f.op in ("depthwise_conv2d", "pool_avg", "pool_max"):
        return out.numel * attrs["kernel"] ** 2
    if f.op == "matmul":
        return out.numel * f.in_shapes[0].dims[-1]
    if f.op in ("reshape", "identity", "transpose", "split", "concat"):
        return 0
    if f.op == "global_pool":
        return f.in_shapes[0].numel
    return sum(s.numel for s in f.out_shapes)


def io_bytes(key: OperatorFeatureKey) -> int:
    """External input bytes plus final output bytes of a (fused) key.

    Inside a fused chain one input of each follower is the previous
    member's output; that tensor never leaves the kernel.
    """
    total = sum(s.nbytes for s in key.op_seq[0].in_shapes)
    for prev, f in zip(key.op_seq, key.op_seq[1:]):
        ins = list(f.in_shapes)
        ins.remove(prev.out_shapes[0])
        total += sum(s.nbytes for s in ins)
    return total + sum(s.nbytes for s in key.op_seq[-1].out_shapes)


def _device_rng(device_id: str) -> random.Random:
    return random.Random(int.from_bytes(hashlib.sha256(device_id.encode()).digest()[:8], "big"))


OP_TYPES = (
    "conv2d", "depthwise_conv2d", "matmul", "add", "mul", "relu", "gelu", "softmax", "batchnorm", "layernorm",
    "pool_avg", "pool_max", "global_pool", "reshape", "concat", "split", "transpose", "identity",
)


class AnalyticalBackend:
    """Deterministic per-device cost model.

    ``latency = alpha * MACs + beta * io_bytes + gamma[op]`` where gamma is
    the launch overhead of the (first) op of the costing unit; energy is
    ``power * latency + e_io * io_bytes``.  Constants are drawn from a RNG
    seeded by the device id.
    """

    parallel_safe = True

    def __init__(self, device_id: str = "desk-cpu"):
        rng = _device_rng(device_id)
        self.device_id = device_id
        self.backend_id = "analytical/1"
        self.alpha = 2.0e-8 * rng.uniform(0.5, 1.5)  # ms per MAC
        self.beta = 2.0e-7 * rng.uniform(0.5, 1.5)  # ms per byte
        self.gamma = {op: 0.01 * rng.uniform(0.25, 1.0) for op in OP_TYPES}
        self.gamma_custom = 0.01
        self.power_w = rng.uniform(2.0, 8.0)  # mJ per ms
        self.e_io = 1.0e-7 * rng.uniform(0.5, 1.5)  # mJ per byte

    def overhead(self, op: str) -> float:
        return self.gamma.get(op, self.gamma_custom)

    def measure(self, key: OperatorFeatureKey) -> Measurement:
        macs = sum(mult_adds(f) for f in key.op_seq)
        io = io_bytes(key)
        latency = self.alpha * macs + self.beta * io + self.overhead(key.op_seq[0].op)
        energy = self.power_w * latency + self.e_io * io
        return Measurement(latency, energy)


class MeasurementFileBackend:
    """Serves values from a LUT-format file filled by an external profiler."""

    parallel_safe = True

    def __init__(self, path):
        self.path = str(path)
        self.backend_id = f"file:{self.path}"
        with open(path, encoding="utf-8") as fh:
            self._lut = LatencyLUT.from_text(fh.read())
        self.device_id = self._lut.provenance.get("device_id", "")

    def measure(self, key: OperatorFeatureKey) -> Measurement:
        entry = self._lut.entries.get(key.text)
        if entry is None:
            raise KeyError(key.text)
        return entry


# ---------------------------------------------------------------------------
# LUT


def _fmt_float(x: float) -> str:
    return repr(float(x))


@dataclass
class LatencyLUT:
    entries: dict[str, Measurement] = field(default_factory=dict)
    provenance: dict[str, str] = field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return (key.text if isinstance(key, OperatorFeatureKey) else key) in self.entries

    def latency(self, key: OperatorFeatureKey) -> float:
        try:
            return self.entries[key.text].latency_ms
        except KeyError:
            raise MissingKeyError(key.text) from None

    def energy(self, key: OperatorFeatureKey) -> float:
        try:
            value = self.entries[key.text].energy_mj
        except KeyError:
            raise MissingKeyError(key.text) from None
        if value is None:
            raise MissingKeyError(f"{key.text} (no energy value)")
        return value

    def missing(self, keys: Iterable[OperatorFeatureKey]) -> list[str]:
        return sorted({k.text for k in keys} - set(self.entries))

    def to_text(self) -> str:
        lines = [f"# {LUT_FORMAT}"]
        for k in ("device_id", "backend_id", "created_at", "fusion", "fusion_rules"):
            lines.append(f"# {k}: {self.provenance.get(k, '')}")
        lines.append(f"# keys: {len(self.entries)}")
        lines.append("key\tlatency_ms\tenergy_mj")
        for text in sorted(self.entries):
            m = self.entries[text]
            energy = "" if m.energy_mj is None else _fmt_float(m.energy_mj)
            lines.append(f"{text}\t{_fmt_float(m.latency_ms)}\t{energy}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "LatencyLUT":
        lines = text.splitlines()
        if not lines or lines[0].strip() != f"# {LUT_FORMAT}":
            raise ArtifactError(f"not a {LUT_FORMAT} file (header: {lines[0] if lines else '<empty>'!r})")
        prov, entries = {}, {}
        declared = None
        for line in lines[1:]:
            if line.startswith("#"):
                k, _, v = line[1:].partition(":")
                if k.strip() == "keys":
                    declared = int(v)
                else:
                    prov[k.strip()] = v.strip()
                continue
            if not line.strip() or line.startswith("key\t"):
                continue
            parts = line.split("\t")
            if len(parts) not in (2, 3):
                raise ArtifactError(f"malformed LUT row: {line!r}")
            try:
                latency = float(parts[1])
                energy = float(parts[2]) if len(parts) == 3 and parts[2] else None
            except ValueError:
                raise ArtifactError(f"malformed LUT value in row: {line!r}") from None
            for v in (latency, energy):
                if v is not None and not (math.isfinite(v) and v >= 0):
                    raise ArtifactError(f"LUT values must be finite and >= 0: {line!r}")
            entries[parts[0]] = Measurement(latency, energy)
        if declared is not None and declared != len(entries):
            raise ArtifactError(f"LUT declares {declared} keys but lists {len(entries)}")
        return cls(entries, prov)


def build_latency_lut(manifest: Iterable[OperatorFeatureKey], backend: CostBackend, fusion_rules=None,
                      created_at: str = "", jobs: int = 1) -> LatencyLUT:
    """Measure every manifest key exactly once."""
    keys = sorted(set(manifest))
    results: dict[str, Measurement] = {}
    missing = []

    def one(key):
        try:
            return key, backend.measure(key)
        except Exception:  # noqa: BLE001 - any backend failure marks the key missing
            return key, None

    if jobs > 1 and getattr(backend, "parallel_safe", False):
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            measured = list(pool.map(one, keys))
    else:
        measured = [one(k) for k in keys]
    for key, m in measured:
        if m is None:
            missing.append(key.text)
        else:
            results[key.text] = m
    if missing:
        raise PartialLUTError(missing)
    provenance = {
        "device_id": getattr(backend, "device_id", ""),
        "backend_id": backend.backend_id,
        "created_at": created_at,
        "fusion": ruleset_hash(fusion_rules),
        "fusion_rules": format_fusion_rules(fusion_rules),
    }
    return LatencyLUT(results, provenance)


# ---------------------------------------------------------------------------
# latency / energy / memory


class Predictor:
    """Caches static fusion groups so repeated predictions stay cheap."""

    def __init__(self, model: TailorModule, lut: LatencyLUT | None = None, fusion_rules=None,
                 space: ModificationSpace | None = None):
        self.model = model
        self.lut = lut
        self.space = space
        self.fusion_rules = fusion_rules
        self.groups = fusion_groups(model, fusion_rules)

    def keys(self, spec: Mapping) -> list[OperatorFeatureKey]:
        return active_keys(state_for(self.model, spec, self.space), self.model, self.groups)

    def latency(self, spec: Mapping) -> float:
        return math.fsum(self.lut.latency(k) for k in self.keys(spec))

    def energy(self, spec: Mapping) -> float:
        return math.fsum(self.lut.energy(k) for k in self.keys(spec))


def predict_latency(spec: Mapping, model: TailorModule, lut: LatencyLUT, fusion_rules=None,
                    space: ModificationSpace | None = None) -> float:
    """Sum of LUT latencies over the active (fused) operator keys of ``spec``."""
    return Predictor(model, lut, fusion_rules, space).latency(spec)


def predict_energy(spec: Mapping, model: TailorModule, lut: LatencyLUT, fusion_rules=None,
                   space: ModificationSpace | None = None) -> float:
    return Predictor(model, lut, fusion_rules, space).energy(spec)


@dataclass(frozen=True)
class MemoryEstimate:
    param_bytes: int
    peak_activation_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.param_bytes + self.peak_activation_bytes


VIEW_OPS = frozenset({"identity", "reshape"})


def _feature_dim(shape) -> int:
    return shape.dims[1] if shape.rank == 4 else shape.dims[-1]


def param_count(op: str, attrs: Mapping, in_shapes) -> int:
    x = in_shapes[0]
    if op == "conv2d":
        c_out = attrs["out_channels"]
        return attrs["kernel"] ** 2 * x.dims[1] * c_out + (c_out if attrs.get("bias", 1) else 0)
    if op == "depthwise_conv2d":
        c = x.dims[1]
        return attrs["kernel"] ** 2 * c + (c if attrs.get("bias", 1) else 0)
    if op == "matmul" and len(in_shapes) == 1:
        return x.dims[-1] * attrs["out_features"]
    if op in ("add", "mul") and len(in_shapes) == 1:
        return _feature_dim(x)
    if op == "batchnorm":
        return 2 * _feature_dim(x)
    if op == "layernorm":
        return 2 * x.dims[-1]
    return 0


def predict_memory(spec: Mapping, model: TailorModule, space: ModificationSpace | None = None) -> MemoryEstimate:
    """Parameter bytes plus peak live activation bytes over the topological schedule.

    Identity and reshape outputs are views of their input buffer.
    """
    st = model.structure
    state = state_for(model, spec, space)
    active = [nid for nid in st.order if nid not in state.inactive]

    params = 0
    for nid in active:
        ins = state.in_shapes[nid]
        params += param_count(st.nodes[nid].op, state.attrs[nid], ins) * DTYPE_SIZES[ins[0].dtype]

    buffer_of: dict[str, str] = {}
    size: dict[str, int] = {}
    alloc: dict[str, int] = {}
    last: dict[str, int] = {}
    for e in st.graph.inputs:
        buffer_of[e] = e
        size[e] = state.edge_shapes[e].nbytes
        alloc[e] = -1
        last[e] = -1
    for step, nid in enumerate(active):
        node = st.nodes[nid]
        ins = [buffer_of[state.resolve(e)] for e in node.inputs]
        for b in ins:
            last[b] = step
        for e in node.outputs:
            if node.op in VIEW_OPS:
                buffer_of[e] = ins[0]
            else:
                buffer_of[e] = e
                size[e] = state.edge_shapes[e].nbytes
                alloc[e] = step
                last[e] = step
    end = len(active)
    for e in st.graph.outputs:
        last[buffer_of[state.resolve(e)]] = end

    peak = sum(size[b] for b in size if alloc[b] < 0)
    for step in range(end):
        live = sum(size[b] for b in size if alloc[b] <= step <= last[b])
        peak = max(peak, live)
    return MemoryEstimate(params, peak)


# ---------------------------------------------------------------------------
# accuracy


class AccuracyOracle(Protocol):
    def __call__(self, spec: SubNetSpec) -> float: ...


def _unit(seed: int, *parts) -> float:
    """Deterministic uniform value in [0, 1) from a hash."""
    digest = hashlib.sha256(repr((seed,) + parts).encode()).digest()
    return int.from_bytes(digest[:8], "big") / 2**64


class SyntheticAccuracyOracle:
    """``acc = base - sum w(dim, value) - eps * interaction(spec)``.

    Weights are multiples of 1/64, growing with the candidate's distance
    from the default in the candidate list, so the additive part is exact in
    floating point.  The interaction is the mean of seeded pairwise terms in
    [-1, 1] over the spec's non-default modifications.
    """

    def __init__(self, space: ModificationSpace, seed: int = 0, eps: float = 0.0, base: float = 80.0):
        self.space = space
        self.seed = seed
        self.eps = eps
        self.base = base
        self.calls = 0
        self.weights: dict[tuple[str, object], float] = {}
        for d in space.dims:
            home = d.candidates.index(d.default)
            for i, v in enumerate(d.candidates):
                if v != d.default:
                    k = 1 + int(_unit(seed, "w", d.dim_id, v) * 64)
                    self.weights[(d.dim_id, v)] = k * abs(i - home) / 64

    @property
    def min_weight(self) -> float:
        return min(self.weights.values(), default=0.0)

    def additive(self, spec: Mapping) -> float:
        spec = self.space.normalize(spec)
        return self.base - math.fsum(self.weights[(k, v)] for k, v in spec.items())

    def interaction(self, spec: Mapping) -> float:
        mods = sorted(self.space.normalize(spec).items(), key=repr)
        pairs = [(a, b) for i, a in enumerate(mods) for b in mods[i + 1:]]
        if not pairs:
            return 0.0
        return math.fsum(2 * _unit(self.seed, "pair", a, b) - 1 for a, b in pairs) / len(pairs)

    def __call__(self, spec: Mapping) -> float:
        self.calls += 1
        acc = self.additive(spec)
        if self.eps:
            acc -= self.eps * self.interaction(spec)
        return acc


class FileAccuracyOracle:
    """Accuracy values measured elsewhere, one ``spec<TAB>acc`` row per SubNet."""

    def __init__(self, path, space: ModificationSpace):
        self.space = space
        self.calls = 0
        self.values: dict[str, float] = {}
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0].strip() != f"# {ORACLE_FORMAT}":
            raise ArtifactError(f"{path}: not a {ORACLE_FORMAT} file")
        for line in lines[1:]:
            if not line.strip() or line.startswith("#"):
                continue
            text, _, acc = line.rpartition("\t")
            self.values[space.format_spec(space.parse_spec(text))] = float(acc)

    def __call__(self, spec: Mapping) -> float:
        self.calls += 1
        text = self.space.format_spec(spec)
        if text not in self.values:
            raise OracleError(f"no accuracy recorded for SubNet {text!r}")
        return self.values[text]


@dataclass
class SensitivityTable:
    base_acc: float
    deltas: dict[tuple[str, object], float] = field(default_factory=dict)

    def delta(self, dim_id: str, value) -> float:
        try:
            return self.deltas[(dim_id, value)]
        except KeyError:
            raise OracleError(f"sensitivity table does not cover {dim_id}={value!r}") from None

    def to_text(self, space: ModificationSpace) -> str:
        lines = [f"# {SENSITIVITY_FORMAT}", "dim_id\tvalue\tdelta", f"baseline\t\t{_fmt_float(self.base_acc)}"]
        for d in space.dims:
            for v in d.candidates:
                lines.append(f"{d.dim_id}\t{v!r}\t{_fmt_float(self.delta(d.dim_id, v))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, space: ModificationSpace) -> "SensitivityTable":
        lines = text.splitlines()
        if not lines or lines[0].strip() != f"# {SENSITIVITY_FORMAT}":
            raise ArtifactError(f"not a {SENSITIVITY_FORMAT} file")
        base, deltas = None, {}
        for line in lines[1:]:
            if not line.strip() or line.startswith("#") or line.startswith("dim_id\t"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ArtifactError(f"malformed sensitivity row: {line!r}")
            if parts[0] == "baseline":
                base = float(parts[2])
                continue
            dim = space.dim(parts[0])
            raw = float(parts[1])
            value = next((c for c in dim.candidates if c == raw), None)
            if value is None:
                raise ArtifactError(f"{parts[0]}: value {parts[1]} is not a candidate")
            deltas[(dim.dim_id, value)] = float(parts[2])
        if base is None:
            raise ArtifactError("sensitivity file has no baseline row")
        return cls(base, deltas)


def build_sensitivity_table(space: ModificationSpace, oracle: AccuracyOracle) -> SensitivityTable:
    """One baseline call plus one call per non-default (dim, value) pair."""
    base = oracle(SubNetSpec())
    deltas = {}
    for d in space.dims:
        for v in d.candidates:
            if v == d.default:
                deltas[(d.dim_id, v)] = 0.0
            else:
                deltas[(d.dim_id, v)] = base - oracle(SubNetSpec({d.dim_id: v}))
    return SensitivityTable(base, deltas)


def predict_accuracy(spec: Mapping, table: SensitivityTable) -> float:
    """Baseline minus the summed drops of every assignment in ``spec``."""
    return table.base_acc - math.fsum(table.delta(k, v) for k, v in spec.items())


def top_k_ranking_accuracy(predicted: list[list[float]], truth: list[list[float]], k: int = 5) -> float:
    """Fraction of groups whose truly best candidate is in the predicted top ``k``."""
    hits = 0
    for pred, true in zip(predicted, truth):
        best = max(range(len(true)), key=lambda i: (true[i], -i))
        top = sorted(range(len(pred)), key=lambda i: (-pred[i], i))[:k]
        hits += best in top
    return hits / len(predicted) if predicted else 0.0
