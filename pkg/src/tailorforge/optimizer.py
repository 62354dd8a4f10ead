"""Latency-constrained SubNet search: beam-initialized GA and Pareto sweeps.

Individuals are full value vectors in the space's dimension order, with
dims of depth-dropped blocks reset to their default so equal architectures
have equal vectors.
"""

from __future__ import annotations

import itertools
import logging
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

from .enumerator import dependency_groups, fusion_groups, group_key, state_for
from .errors import InfeasibleBudgetError
from .ir import TailorModule
from .modspace import ModificationSpace, SubNetSpec
from .predictors import LatencyLUT, SensitivityTable

log = logging.getLogger(__name__)

FRONTIER_FORMAT = "tailorforge-frontier/1"
RESULT_FORMAT = "tailorforge-search/1"


@dataclass(frozen=True)
class SearchConfig:
    population: int = 100
    generations: int = 500
    mutation_prob: float = 0.1
    parent_fraction: float = 0.25
    mutate_fraction: float = 0.5
    crossover_fraction: float = 0.25
    beam_width: int = 8
    seed: int = 0
    max_attempts: int = 50  # resampling attempts per wanted individual

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.generations < 0 or self.beam_width < 0:
            raise ValueError("generations and beam_width must be >= 0")
        for name in ("parent_fraction", "mutate_fraction", "crossover_fraction"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must be in (0, 1], got {v}")
        if self.parent_fraction + self.mutate_fraction + self.crossover_fraction > 1 + 1e-12:
            raise ValueError("parent, mutate and crossover fractions must sum to <= 1")
        if not 0 <= self.mutation_prob <= 1:
            raise ValueError("mutation_prob must be in [0, 1]")


@dataclass(frozen=True)
class ParetoPoint:
    budget_ms: float
    spec: SubNetSpec
    pred_latency_ms: float
    pred_accuracy: float


class SearchProblem:
    """Fast, memoized predictors over one compiled space.

    Latency uses per-position tables indexed by each position's dependency
    values, so a prediction is a handful of dict lookups; the sum is formed
    with ``math.fsum`` and therefore equals :func:`predict_latency` exactly.
    """

    def __init__(self, model: TailorModule, space: ModificationSpace, lut: LatencyLUT,
                 table: SensitivityTable, fusion_rules=None, jobs: int = 1):
        self.model = model
        self.space = space
        self.lut = lut
        self.table = table
        self.fusion_rules = fusion_rules
        self.jobs = jobs
        self.dims = space.dims
        self.defaults = tuple(d.default for d in self.dims)
        self.index = {d.dim_id: i for i, d in enumerate(self.dims)}
        self.evaluations = 0
        self._memo: dict[tuple, tuple[float, float]] = {}
        self._text: dict[tuple, str] = {}

        # depth dims and the block dims they can drop
        self._depth = []  # (depth dim index, max depth, [(block index, dim index)])
        for k, d in enumerate(self.dims):
            if d.scope == "stage":
                members = [(b.block, i) for i, b in enumerate(self.dims) if b.scope == "block" and b.stage == d.stage]
                self._depth.append((k, d.depth, members))

        st = model.structure
        deps = dependency_groups(model, space)
        self._positions = []  # (dep dim indices, activity guard, {values: latency})
        for group in fusion_groups(model, fusion_rules):
            dims = sorted({self.index[x] for n in group for x in deps[st.leaf_path[n]]})
            guard = self._guard(group[0])
            lat = {}
            for values in itertools.product(*(self.dims[i].candidates for i in dims)):
                assignment = {self.dims[i].dim_id: v for i, v in zip(dims, values)}
                key = group_key(state_for(model, assignment, space), model, group)
                lat[values] = lut.latency(key)
            self._positions.append((tuple(dims), guard, lat))
        self._delta = [
            {v: table.delta(d.dim_id, v) for v in d.candidates} for d in self.dims
        ]

    def _guard(self, node_id):
        """(depth dim index, block index) deciding whether a node is active, or None."""
        owner = self.model.structure.owner[node_id]
        if owner is None:
            return None
        stage_path, _, block = owner.rpartition("/")
        for k, d in enumerate(self.dims):
            if d.scope == "stage" and d.dim_id.rpartition("/")[0] == stage_path:
                return k, d.depth, int(block[len("block["):-1])
        return None

    # -- vectors -----------------------------------------------------------

    def normalize(self, vec: Sequence) -> tuple:
        vec = list(vec)
        for k, depth, members in self._depth:
            active = depth + vec[k]
            for b, i in members:
                if b >= active:
                    vec[i] = self.defaults[i]
        return tuple(vec)

    def vector(self, spec) -> tuple:
        return self.normalize(self.space.vector(spec))

    def spec(self, vec: Sequence) -> SubNetSpec:
        return SubNetSpec({d.dim_id: v for d, v, dv in zip(self.dims, vec, self.defaults) if v != dv})

    def text(self, vec: tuple) -> str:
        t = self._text.get(vec)
        if t is None:
            t = self._text[vec] = self.space.format_spec(self.spec(vec))
        return t

    def random_vector(self, rng: random.Random) -> tuple:
        return self.normalize(rng.choice(d.candidates) for d in self.dims)

    # -- predictors --------------------------------------------------------

    def latency(self, vec: tuple) -> float:
        parts = []
        for dims, guard, lat in self._positions:
            if guard is not None:
                k, depth, block = guard
                if block >= depth + vec[k]:
                    continue
            parts.append(lat[tuple(vec[i] for i in dims)])
        return math.fsum(parts)

    def accuracy(self, vec: tuple) -> float:
        return self.table.base_acc - math.fsum(
            self._delta[i][v] for i, v in enumerate(vec) if v != self.defaults[i]
        )

    def evaluate(self, vec: tuple) -> tuple[float, float]:
        """(latency, accuracy) of a normalized vector, memoized."""
        hit = self._memo.get(vec)
        if hit is None:
            self.evaluations += 1
            hit = self._memo[vec] = (self.latency(vec), self.accuracy(vec))
        return hit

    def evaluate_many(self, vecs: list[tuple]) -> list[tuple[float, float]]:
        if self.jobs > 1 and len(vecs) > 1:
            todo = [v for v in dict.fromkeys(vecs) if v not in self._memo]
            with ThreadPoolExecutor(max_workers=self.jobs) as pool:
                results = list(pool.map(lambda v: (self.latency(v), self.accuracy(v)), todo))
            for v, r in zip(todo, results):  # merged in submission order
                self._memo[v] = r
                self.evaluations += 1
        return [self.evaluate(v) for v in vecs]

    def rank_key(self, vec: tuple):
        lat, acc = self.evaluate(vec)
        return (-acc, lat, self.text(vec))


# ---------------------------------------------------------------------------
# beam initialization


def _cheapest(problem: SearchProblem) -> tuple:
    """Per dim, the candidate with the lowest latency when applied alone."""
    out = []
    base = list(problem.defaults)
    for i, d in enumerate(problem.dims):
        best = None
        for v in d.candidates:
            vec = list(base)
            vec[i] = v
            lat = problem.latency(problem.normalize(vec))
            if best is None or lat < best[0]:
                best = (lat, v)
        out.append(best[1])
    return tuple(out)


def beam_init_vectors(problem: SearchProblem, budget: float, width: int) -> list[tuple]:
    if width <= 0:
        return []
    cheap = _cheapest(problem)
    n = len(problem.dims)
    beam: list[tuple] = [()]
    for i in range(n):
        scored = {}
        for partial in beam:
            for v in problem.dims[i].candidates:
                head = partial + (v,)
                bound = problem.latency(problem.normalize(head + cheap[i + 1:]))
                if bound > budget:
                    continue
                as_default = problem.normalize(head + problem.defaults[i + 1:])
                acc = problem.accuracy(as_default)
                # heads differing only in depth-dropped dims are the same partial
                key = (-acc, bound, problem.text(as_default), as_default[: i + 1])
                if as_default not in scored or key < scored[as_default]:
                    scored[as_default] = key
        ranked = sorted(scored.values())
        beam = [k[3] for k in ranked[:width]]
        if not beam:
            return []
    out = []
    for vec in beam:
        vec = problem.normalize(vec)
        if vec not in out and problem.evaluate(vec)[0] <= budget:
            out.append(vec)
    return out


def beam_init(problem: SearchProblem, budget: float, width: int) -> list[SubNetSpec]:
    """At most ``width`` complete feasible specs, best predicted accuracy first."""
    return [problem.spec(v) for v in beam_init_vectors(problem, budget, width)]


# ---------------------------------------------------------------------------
# genetic search


def _mutate(problem, rng, parent, prob):
    vec = list(parent)
    for i, d in enumerate(problem.dims):
        if rng.random() < prob:
            vec[i] = rng.choice(d.candidates)
    return problem.normalize(vec)


def _crossover(problem, rng, a, b):
    n = len(a)
    if n < 2:
        return a
    point = rng.randrange(1, n)
    return problem.normalize(a[:point] + b[point:])


def _fill(problem, budget, make, count, attempts, seen_min):
    out = []
    tries = 0
    while len(out) < count and tries < attempts:
        tries += 1
        vec = make()
        lat, _ = problem.evaluate(vec)
        seen_min[0] = min(seen_min[0], lat)
        if lat <= budget:
            out.append(vec)
    return out


def genetic_search_vector(problem: SearchProblem, budget: float, cfg: SearchConfig = SearchConfig()) -> tuple:
    rng = random.Random(cfg.seed)
    seen_min = [math.inf]
    population = beam_init_vectors(problem, budget, min(cfg.beam_width, cfg.population))
    for v in population:
        seen_min[0] = min(seen_min[0], problem.evaluate(v)[0])
    need = cfg.population - len(population)
    population += _fill(problem, budget, lambda: problem.random_vector(rng), need, need * cfg.max_attempts, seen_min)
    if not population:
        raise InfeasibleBudgetError(budget, seen_min[0])

    best = min(population, key=problem.rank_key)
    n_parents = max(1, math.ceil(cfg.parent_fraction * cfg.population))
    n_mutate = round(cfg.mutate_fraction * cfg.population)
    n_cross = round(cfg.crossover_fraction * cfg.population)
    for gen in range(cfg.generations):
        parents = sorted(dict.fromkeys(population), key=problem.rank_key)[:n_parents]
        mutants = _fill(problem, budget, lambda: _mutate(problem, rng, rng.choice(parents), cfg.mutation_prob),
                        n_mutate, n_mutate * cfg.max_attempts, seen_min)
        children = _fill(problem, budget, lambda: _crossover(problem, rng, rng.choice(parents), rng.choice(parents)),
                         n_cross, n_cross * cfg.max_attempts, seen_min)
        population = parents + mutants + children
        problem.evaluate_many(population)
        champion = min(population, key=problem.rank_key)
        if problem.rank_key(champion) < problem.rank_key(best):
            best = champion
    lat, acc = problem.evaluate(best)
    assert lat <= budget, "search returned an infeasible individual"
    log.info("budget %.4g ms: best acc %.4f at %.4f ms (%d evaluations)", budget, acc, lat, problem.evaluations)
    return best


def genetic_search(problem: SearchProblem, budget: float, cfg: SearchConfig = SearchConfig()) -> SubNetSpec:
    """Most accurate feasible SubNet found; raises InfeasibleBudgetError if none."""
    return problem.spec(genetic_search_vector(problem, budget, cfg))


# ---------------------------------------------------------------------------
# Pareto sweep


def pareto_filter(points: Iterable[ParetoPoint]) -> list[ParetoPoint]:
    """Non-dominated points in ascending latency; equal points collapse."""
    ordered = sorted(points, key=lambda p: (p.pred_latency_ms, -p.pred_accuracy, p.budget_ms))
    frontier: list[ParetoPoint] = []
    for p in ordered:
        if frontier and p.pred_accuracy <= frontier[-1].pred_accuracy:
            continue
        if frontier and p.pred_latency_ms == frontier[-1].pred_latency_ms:
            continue
        frontier.append(p)
    return frontier


def pareto_sweep(problem: SearchProblem, budgets: Sequence[float], cfg: SearchConfig = SearchConfig(),
                 skipped: list | None = None) -> list[ParetoPoint]:
    """One search per budget, filtered to the Pareto frontier."""
    points = []
    for budget in budgets:
        try:
            vec = genetic_search_vector(problem, budget, cfg)
        except InfeasibleBudgetError as exc:
            log.warning("%s", exc)
            if skipped is not None:
                skipped.append((budget, exc.min_latency_ms))
            continue
        lat, acc = problem.evaluate(vec)
        points.append(ParetoPoint(budget, problem.spec(vec), lat, acc))
    return pareto_filter(points)


def format_frontier(points: Sequence[ParetoPoint], space: ModificationSpace, skipped=()) -> str:
    lines = [f"# {FRONTIER_FORMAT}"]
    for budget, min_lat in skipped:
        lines.append(f"# infeasible budget_ms={budget!r} min_latency_ms={min_lat!r}")
    lines.append("budget_ms,pred_latency_ms,pred_accuracy,spec")
    for p in points:
        lines.append(f"{p.budget_ms!r},{p.pred_latency_ms!r},{p.pred_accuracy!r},{space.format_spec(p.spec)}")
    return "\n".join(lines) + "\n"


def parse_frontier(text: str, space: ModificationSpace) -> list[ParetoPoint]:
    from .errors import ArtifactError

    lines = text.splitlines()
    if not lines or lines[0].strip() != f"# {FRONTIER_FORMAT}":
        raise ArtifactError(f"not a {FRONTIER_FORMAT} file")
    points = []
    for line in lines[1:]:
        if not line.strip() or line.startswith("#") or line.startswith("budget_ms,"):
            continue
        try:
            budget, lat, acc, spec = line.split(",", 3)
            points.append(ParetoPoint(float(budget), space.parse_spec(spec), float(lat), float(acc)))
        except ValueError as exc:
            raise ArtifactError(f"malformed frontier row {line!r}: {exc}") from None
    return points
