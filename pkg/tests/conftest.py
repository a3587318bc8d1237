import numpy as np
import pytest
from hypothesis import settings

from subsel.graph import Graph

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_graph(n: int, p: float, seed: int, dim: int = 4) -> Graph:
    rng = np.random.default_rng(seed)
    iu = np.triu_indices(n, 1)
    keep = rng.random(len(iu[0])) < p
    edges = np.stack([iu[0][keep], iu[1][keep]], axis=1)
    return Graph.from_edges(n, edges, rng.standard_normal((n, dim)))


def two_block_graph(n: int = 40, seed: int = 0, p_in: float = 0.35, p_out: float = 0.02, dim: int = 8,
                    noise: float = 0.5) -> Graph:
    """Two dense communities joined by a few edges; features hint at membership."""
    rng = np.random.default_rng(seed)
    block = np.arange(n) >= n // 2
    pairs = []
    for u in range(n):
        for v in range(u + 1, n):
            if rng.random() < (p_in if block[u] == block[v] else p_out):
                pairs.append((u, v))
    x = rng.standard_normal((n, dim)) * noise
    x[:, 0] += np.where(block, 1.0, -1.0)
    return Graph.from_edges(n, np.asarray(pairs), x)


@pytest.fixture
def path4():
    return Graph.from_edges(4, [(0, 1), (1, 2), (2, 3)], np.eye(4))


# ---------------------------------------------------------------- acceptance reporting

_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")
    config.stash[_CRITERIA] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and report.passed):
        return
    number, title = mark.args
    entry = item.config.stash[_CRITERIA].setdefault(number, {"title": title, "passed": True, "notes": []})
    entry["passed"] &= report.passed
    if report.when == "call":
        entry["notes"] += [text for key, text in item.user_properties if key == "note"]


def pytest_terminal_summary(terminalreporter, config):
    criteria = config.stash[_CRITERIA]
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(criteria):
        entry = criteria[number]
        status = "PASS" if entry["passed"] else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {entry['title']}")
        for note in entry["notes"]:
            terminalreporter.write_line(f"    {note}")


@pytest.fixture
def note(request):
    """Attach a detail line to the acceptance summary of the running test."""
    return lambda text: request.node.user_properties.append(("note", text))
