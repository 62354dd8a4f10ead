"""Command-line front end.

    tailorforge compile graph.tfg config.toml -o net.d
    tailorforge count net.d
    tailorforge enumerate net.d [-o manifest.txt] [--fusion default|none|RULES]
    tailorforge build-lut net.d --backend analytical|file:PATH --device ID
    tailorforge sensitivity net.d --oracle synthetic:SEED[,eps=E]|file:PATH
    tailorforge predict net.d --spec SPEC
    tailorforge search net.d --budget MS
    tailorforge sweep net.d --budgets LO:HI:N|A,B,C
    tailorforge export net.d --spec SPEC -o out.tfg

Exit codes: 0 success, 2 invalid input or artifact, 3 infeasible budget.
Results go to stdout or ``-o`` files; progress and errors go to stderr.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from .compiler import compile as compile_graph
from .compiler import compile_report
from .enumerator import (
    enumerate_with_stats,
    format_fusion_rules,
    format_manifest,
    parse_fusion_rules,
    parse_manifest,
    ruleset_hash,
)
from .errors import ArtifactError, InfeasibleBudgetError, TailorError
from .graph import export_graph, read_graph, write_graph
from .modspace import Dim, ModificationSpace, apply_subnet, count_variants, parse_config
from .optimizer import (
    RESULT_FORMAT,
    SearchConfig,
    SearchProblem,
    format_frontier,
    genetic_search_vector,
    pareto_sweep,
)
from .predictors import (
    AnalyticalBackend,
    FileAccuracyOracle,
    LatencyLUT,
    MeasurementFileBackend,
    Predictor,
    SensitivityTable,
    SyntheticAccuracyOracle,
    build_latency_lut,
    build_sensitivity_table,
    predict_accuracy,
    predict_memory,
)

log = logging.getLogger("tailorforge")

SUPERNET_FORMAT = "tailorforge-supernet/1"
SPACE_FORMAT = "tailorforge-space/1"
REPORT_FORMAT = "tailorforge-report/1"
JOBS_ENV = "TAILORFORGE_JOBS"

EXIT_OK, EXIT_INVALID, EXIT_INFEASIBLE = 0, 2, 3


# ---------------------------------------------------------------------------
# artifacts


def format_space(space: ModificationSpace) -> str:
    lines = [f"# {SPACE_FORMAT}", "dim_id\tscope\tcandidates\tdefault"]
    for d in space.dims:
        lines.append(f"{d.dim_id}\t{d.scope}\t{','.join(repr(c) for c in d.candidates)}\t{d.default!r}")
    return "\n".join(lines) + "\n"


def _read_header(path: Path, fmt: str) -> list[str]:
    if not path.exists():
        raise ArtifactError(f"missing artifact {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != f"# {fmt}":
        found = lines[0] if lines else "<empty>"
        raise ArtifactError(f"{path}: expected format header '# {fmt}', found {found!r}")
    return lines


class SuperNetDir:
    """A compiled SuperNet on disk: graph and config copies plus derived files."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, name: str) -> Path:
        return self.root / name

    @property
    def manifest_path(self):
        return self.path("manifest.txt")

    @property
    def lut_path(self):
        return self.path("lut.tsv")

    @property
    def sensitivity_path(self):
        return self.path("sensitivity.tsv")

    def write(self, graph, config_text: str, model, space) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        write_graph(graph, self.path("graph.tfg"))
        self.path("config.toml").write_text(config_text, encoding="utf-8")
        self.path("space.tsv").write_text(format_space(space), encoding="utf-8")
        self.path("report.txt").write_text(f"# {REPORT_FORMAT}\n" + compile_report(model, space), encoding="utf-8")
        self.path("supernet.txt").write_text(
            f"# {SUPERNET_FORMAT}\ngraph: graph.tfg\nconfig: config.toml\nspace: space.tsv\nreport: report.txt\n",
            encoding="utf-8",
        )

    def load(self):
        _read_header(self.path("supernet.txt"), SUPERNET_FORMAT)
        graph = read_graph(self.path("graph.tfg"))
        cfg = parse_config(self.path("config.toml").read_text(encoding="utf-8"))
        model, space = compile_graph(graph, cfg)
        stored = _read_header(self.path("space.tsv"), SPACE_FORMAT)
        if format_space(space).splitlines() != stored:
            raise ArtifactError(f"{self.path('space.tsv')} does not match the recompiled SuperNet")
        return graph, model, space

    def load_lut(self, path=None) -> LatencyLUT:
        p = Path(path) if path else self.lut_path
        _read_header(p, "tailorforge-lut/1")
        return LatencyLUT.from_text(p.read_text(encoding="utf-8"))

    def load_table(self, space, path=None) -> SensitivityTable:
        p = Path(path) if path else self.sensitivity_path
        _read_header(p, "tailorforge-sensitivity/1")
        return SensitivityTable.from_text(p.read_text(encoding="utf-8"), space)


def _lut_rules(lut: LatencyLUT):
    rules = parse_fusion_rules(lut.provenance.get("fusion_rules", ""))
    if ruleset_hash(rules) != lut.provenance.get("fusion", ruleset_hash(rules)):
        raise ArtifactError("LUT fusion rules do not match their recorded hash")
    return rules


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text)


def parse_budgets(text: str) -> list[float]:
    """``lo:hi:n`` (n evenly spaced values, inclusive) or a comma list."""
    try:
        if ":" in text:
            lo, hi, n = text.split(":")
            lo, hi, n = float(lo), float(hi), int(n)
            if n < 1:
                raise ValueError("count must be >= 1")
            if n == 1:
                return [lo]
            return [lo + (hi - lo) * i / (n - 1) for i in range(n)]
        return sorted(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad budgets {text!r}: {exc}") from None


def parse_oracle(text: str, space):
    kind, _, arg = text.partition(":")
    if kind == "file":
        return FileAccuracyOracle(arg, space)
    if kind != "synthetic":
        raise ArtifactError(f"unknown oracle {text!r} (use synthetic:SEED[,eps=E][,base=B] or file:PATH)")
    opts = {"seed": 0, "eps": 0.0, "base": 80.0}
    for i, part in enumerate(p for p in arg.split(",") if p):
        key, sep, value = part.partition("=")
        if not sep:
            key, value = "seed", key
        if key not in opts:
            raise ArtifactError(f"unknown synthetic oracle option {key!r}")
        try:
            opts[key] = int(value) if key == "seed" else float(value)
        except ValueError:
            raise ArtifactError(f"bad value for {key}: {value!r}") from None
    return SyntheticAccuracyOracle(space, seed=opts["seed"], eps=opts["eps"], base=opts["base"])


def parse_backend(text: str, device: str):
    if text == "analytical":
        return AnalyticalBackend(device)
    if text.startswith("file:"):
        return MeasurementFileBackend(text[len("file:"):])
    raise ArtifactError(f"unknown backend {text!r} (use analytical or file:PATH)")


# ---------------------------------------------------------------------------
# commands


def cmd_compile(args) -> int:
    graph = read_graph(args.graph)
    config_text = Path(args.config).read_text(encoding="utf-8")
    model, space = compile_graph(graph, parse_config(config_text))
    report = compile_report(model, space)
    if args.output:
        SuperNetDir(args.output).write(graph, config_text, model, space)
    sys.stdout.write(report)
    return EXIT_OK


def cmd_count(args) -> int:
    _, model, space = SuperNetDir(args.supernet).load()
    print(count_variants(space, model))
    return EXIT_OK


def cmd_enumerate(args) -> int:
    net = SuperNetDir(args.supernet)
    graph, model, space = net.load()
    rules = parse_fusion_rules(args.fusion)
    keys, stats = enumerate_with_stats(model, space, rules, jobs=args.jobs)
    log.info("%d unique keys, %d key computations over %d positions", len(keys), stats.computations, stats.positions)
    text = format_manifest(keys, rules, graph.metadata.get("name", ""))
    (Path(args.output) if args.output else net.manifest_path).write_text(text, encoding="utf-8")
    print(len(keys))
    return EXIT_OK


def cmd_build_lut(args) -> int:
    net = SuperNetDir(args.supernet)
    mpath = Path(args.manifest) if args.manifest else net.manifest_path
    _read_header(mpath, "tailorforge-manifest/1")
    keys, meta = parse_manifest(mpath.read_text(encoding="utf-8"))
    rules = parse_fusion_rules(meta.get("fusion_rules", ""))
    if ruleset_hash(rules) != meta.get("fusion", ruleset_hash(rules)):
        raise ArtifactError(f"{mpath}: fusion rules do not match their recorded hash")
    backend = parse_backend(args.backend, args.device)
    created = args.created_at or datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    lut = build_latency_lut(keys, backend, rules, created_at=created, jobs=args.jobs)
    (Path(args.output) if args.output else net.lut_path).write_text(lut.to_text(), encoding="utf-8")
    print(len(lut))
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    net = SuperNetDir(args.supernet)
    _, _, space = net.load()
    oracle = parse_oracle(args.oracle, space)
    table = build_sensitivity_table(space, oracle)
    (Path(args.output) if args.output else net.sensitivity_path).write_text(table.to_text(space), encoding="utf-8")
    print(getattr(oracle, "calls", 0))
    return EXIT_OK


def cmd_predict(args) -> int:
    net = SuperNetDir(args.supernet)
    _, model, space = net.load()
    spec = space.parse_spec(args.spec)
    lines = [f"spec: {space.format_spec(spec)}"]
    if net.lut_path.exists() or args.lut:
        lut = net.load_lut(args.lut)
        pred = Predictor(model, lut, _lut_rules(lut), space)
        lines.append(f"latency_ms: {pred.latency(spec)!r}")
        if all(m.energy_mj is not None for m in lut.entries.values()):
            lines.append(f"energy_mj: {pred.energy(spec)!r}")
    mem = predict_memory(spec, model, space)
    lines += [
        f"param_bytes: {mem.param_bytes}",
        f"peak_activation_bytes: {mem.peak_activation_bytes}",
        f"total_bytes: {mem.total_bytes}",
    ]
    if net.sensitivity_path.exists() or args.table:
        lines.append(f"accuracy: {predict_accuracy(spec, net.load_table(space, args.table))!r}")
    print("\n".join(lines))
    return EXIT_OK


def _search_config(args) -> SearchConfig:
    return SearchConfig(
        population=args.population,
        generations=args.generations,
        mutation_prob=args.mutation_prob,
        beam_width=args.beam_width,
        seed=args.seed,
    )


def _problem(args):
    net = SuperNetDir(args.supernet)
    _, model, space = net.load()
    lut = net.load_lut(args.lut)
    table = net.load_table(space, args.table)
    return SearchProblem(model, space, lut, table, _lut_rules(lut), jobs=args.jobs), space


def cmd_search(args) -> int:
    problem, space = _problem(args)
    vec = genetic_search_vector(problem, args.budget, _search_config(args))
    lat, acc = problem.evaluate(vec)
    text = (
        f"# {RESULT_FORMAT}\n"
        f"budget_ms: {args.budget!r}\n"
        f"spec: {problem.text(vec)}\n"
        f"pred_latency_ms: {lat!r}\n"
        f"pred_accuracy: {acc!r}\n"
    )
    _emit(text, args.output)
    return EXIT_OK


def cmd_sweep(args) -> int:
    problem, space = _problem(args)
    skipped: list = []
    points = pareto_sweep(problem, args.budgets, _search_config(args), skipped)
    _emit(format_frontier(points, space, skipped), args.output)
    return EXIT_OK if points else EXIT_INFEASIBLE


def cmd_export(args) -> int:
    _, model, space = SuperNetDir(args.supernet).load()
    spec = space.parse_spec(args.spec)
    graph = apply_subnet(model, spec, space)
    graph.metadata["subnet"] = space.format_spec(spec)
    data = export_graph(graph)
    if args.output:
        Path(args.output).write_bytes(data)
    else:
        sys.stdout.write(data.decode("utf-8"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tailorforge", description="SuperNet compiler, predictors and search.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="progress logging to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, supernet=True):
        p = sub.add_parser(name, help=help_text)
        if supernet:
            p.add_argument("supernet", help="compiled SuperNet directory")
        p.add_argument("--jobs", type=int, default=_default_jobs(), help=f"worker count (default ${JOBS_ENV} or 1)")
        p.set_defaults(func=fn)
        return p

    p = add("compile", cmd_compile, "compile a graph and config into a SuperNet directory", supernet=False)
    p.add_argument("graph")
    p.add_argument("config")
    p.add_argument("-o", "--output", help="SuperNet directory to write")

    add("count", cmd_count, "print the number of distinct SubNets")

    p = add("enumerate", cmd_enumerate, "write the unique-operator manifest")
    p.add_argument("-o", "--output")
    p.add_argument("--fusion", default="default", help="default, none, or name=a->b;c->d")

    p = add("build-lut", cmd_build_lut, "measure every manifest key")
    p.add_argument("--backend", default="analytical", help="analytical or file:PATH")
    p.add_argument("--device", default="desk-cpu")
    p.add_argument("--manifest")
    p.add_argument("--created-at", help="provenance timestamp (default: now, UTC)")
    p.add_argument("-o", "--output")

    p = add("sensitivity", cmd_sensitivity, "build the modification-sensitivity table")
    p.add_argument("--oracle", default="synthetic:0", help="synthetic:SEED[,eps=E][,base=B] or file:PATH")
    p.add_argument("-o", "--output")

    p = add("predict", cmd_predict, "predict latency, energy, memory and accuracy of one SubNet")
    p.add_argument("--spec", default="default")
    p.add_argument("--lut")
    p.add_argument("--table")

    for name, fn, help_text in (
        ("search", cmd_search, "best SubNet under one latency budget"),
        ("sweep", cmd_sweep, "Pareto frontier over several budgets"),
    ):
        p = add(name, fn, help_text)
        if name == "search":
            p.add_argument("--budget", type=float, required=True)
        else:
            p.add_argument("--budgets", type=parse_budgets, required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--population", type=int, default=SearchConfig.population)
        p.add_argument("--generations", type=int, default=SearchConfig.generations)
        p.add_argument("--mutation-prob", type=float, default=SearchConfig.mutation_prob)
        p.add_argument("--beam-width", type=int, default=SearchConfig.beam_width)
        p.add_argument("--lut")
        p.add_argument("--table")
        p.add_argument("-o", "--output")

    p = add("export", cmd_export, "write the graph of one SubNet")
    p.add_argument("--spec", default="default")
    p.add_argument("-o", "--output")
    return parser


def _configure_logging(verbose: int) -> None:
    # own handler on the package logger: basicConfig is a no-op when the host already configured root
    for h in list(log.handlers):
        if getattr(h, "_tailorforge", False):
            log.removeHandler(h)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    handler._tailorforge = True
    log.addHandler(handler)
    log.setLevel(logging.WARNING - 10 * min(verbose, 2))
    log.propagate = False


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _configure_logging(args.verbose)
    try:
        return args.func(args)
    except InfeasibleBudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (TailorError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
