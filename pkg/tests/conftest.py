import functools
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from tailorforge.compiler import compile  # noqa: E402
from tailorforge.enumerator import DEFAULT_FUSION_RULES, enumerate_unique_operators  # noqa: E402
from tailorforge.fixtures import load_fixture  # noqa: E402
from tailorforge.optimizer import SearchProblem  # noqa: E402
from tailorforge.predictors import (  # noqa: E402
    AnalyticalBackend,
    SyntheticAccuracyOracle,
    build_latency_lut,
    build_sensitivity_table,
)

settings.register_profile(
    "repo", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.function_scoped_fixture]
)
settings.load_profile("repo")

FIXTURE_NAMES = ("tinynet", "tinynet-1s", "tinynet-4s", "tinyvit")

# filled by test_acceptance, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


@functools.lru_cache(maxsize=None)
def compiled(name):
    """(graph, model, space) of a shipped fixture, compiled once per session."""
    g, cfg = load_fixture(name)
    model, space = compile(g, cfg)
    return g, model, space


@functools.lru_cache(maxsize=None)
def predictors(name, seed=0, eps=0.0, fused=True):
    """(lut, sensitivity table) on the analytical desk-cpu backend and a synthetic oracle."""
    _, model, space = compiled(name)
    rules = DEFAULT_FUSION_RULES if fused else None
    keys = enumerate_unique_operators(model, space, rules)
    lut = build_latency_lut(keys, AnalyticalBackend("desk-cpu"), rules)
    table = build_sensitivity_table(space, SyntheticAccuracyOracle(space, seed=seed, eps=eps))
    return lut, table


def search_problem(name, seed=0, fused=True, jobs=1):
    """Fresh SearchProblem (evaluation counters start at zero)."""
    _, model, space = compiled(name)
    lut, table = predictors(name, seed, 0.0, fused)
    return SearchProblem(model, space, lut, table, DEFAULT_FUSION_RULES if fused else None, jobs)


@pytest.fixture(params=FIXTURE_NAMES)
def fixture_net(request):
    return (request.param,) + compiled(request.param)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
