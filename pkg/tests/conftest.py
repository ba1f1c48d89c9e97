from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import pytest

from retroevo import toy_dir
from retroevo.proposer import RouteDatabase, load_route_db
from retroevo.stock import Stock, load_stock
from retroevo.template import ReactionDatabase, TemplateLibrary, load_reaction_db, load_templates

DATA = Path(__file__).resolve().parent / "data"
GOLDEN = Path(__file__).resolve().parent / "golden"


@dataclass
class World:
    path: Path
    stock: Stock
    templates: TemplateLibrary
    db: ReactionDatabase
    routes: RouteDatabase

    @property
    def targets(self) -> list[str]:
        return (self.path / "targets.txt").read_text().split()

    @property
    def script(self) -> Path:
        return self.path / "script.json"


def load_world(name: str) -> World:
    d = toy_dir(name)
    return World(d, load_stock(d / "stock.smi"), load_templates(d / "templates.jsonl"),
                 load_reaction_db(d / "reactions.jsonl"), load_route_db(d / "routes.jsonl"))


@pytest.fixture(scope="session")
def planner_world() -> World:
    return load_world("planner")


@pytest.fixture(scope="session")
def twostep_world() -> World:
    return load_world("twostep")


@pytest.fixture(scope="session")
def designer_world() -> World:
    return load_world("designer")


@pytest.fixture(scope="session")
def corpus() -> list[str]:
    return [l.strip() for l in (DATA / "corpus.smi").read_text().splitlines() if l.strip()]


@pytest.fixture(scope="session")
def template_corpus() -> TemplateLibrary:
    return load_templates(DATA / "templates.jsonl")


# --------------------------------------------------------------------------
# acceptance summary: one line per criterion-marked test


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion covered by the test")
    config._criteria = {}


def pytest_collection_modifyitems(config, items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            n, text = mark.args
            config._criteria[item.nodeid] = [n, text, None]


def pytest_runtest_logreport(report):
    entry = getattr(pytest, "_criteria_ref", {}).get(report.nodeid)
    if entry is None:
        return
    if report.when == "call" or report.failed:
        if entry[2] != "FAIL":
            entry[2] = "PASS" if report.passed else "FAIL"


def pytest_sessionstart(session):
    pytest._criteria_ref = session.config._criteria


def pytest_terminal_summary(terminalreporter, config):
    criteria = sorted(config._criteria.values())
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n, text, outcome in criteria:
        terminalreporter.write_line(f"criterion {n}: {outcome or 'NOT RUN'} - {text}")
