import numpy as np
import pytest
import torch

from hicg.data import DAY_MS, MINUTE_MS, Behavior, Session
from hicg.model import HICG

# The 10-session preprocessing fixture.  (key, day, [(item, behavior), ...])
FIXTURE_SESSIONS = [
    ("s1", 1, [("A", "view"), ("B", "view"), ("C", "cart")]),
    ("s2", 1, [("A", "view"), ("B", "cart")]),
    ("s3", 2, [("B", "view"), ("C", "view"), ("D", "view")]),
    ("s4", 2, [("E", "view"), ("A", "view")]),
    ("s5", 3, [("C", "view"), ("A", "view"), ("B", "view"), ("C", "buy")]),
    ("s6", 3, [("F", "view")]),
    ("s7", 4, [("D", "view"), ("C", "view")]),
    ("s8", 9, [("A", "view"), ("C", "view"), ("B", "cart")]),
    ("s9", 9, [("B", "view"), ("D", "view")]),
    ("s10", 8, [("G", "view"), ("A", "view")]),
]


def fixture_csv() -> bytes:
    lines = ["session_id,timestamp,item_id,behavior"]
    for k, (key, day, events) in enumerate(FIXTURE_SESSIONS):
        start = day * DAY_MS + k * MINUTE_MS
        for t, (item, beh) in enumerate(events):
            lines.append(f"{key},{start + t * MINUTE_MS},{item},{beh}")
    return ("\n".join(lines) + "\n").encode()


@pytest.fixture
def fixture_bytes():
    return fixture_csv()


def make_session(spec, sid="s", t0=0):
    """Session from [(item, type), ...] with one-second spacing."""
    return Session(sid, tuple(Behavior(i, y, t0 + 1000 * t) for t, (i, y) in enumerate(spec)))


@pytest.fixture
def toy_model():
    """|I| = 12, d = 8, two behavior types, float64, dropout disabled."""
    torch.manual_seed(0)
    m = HICG(12, 2, dim=8, steps=1, dropout=0.0).double()
    m.reset_parameters(torch.Generator().manual_seed(0))
    return m


def random_prefix(rng, n_items, n_types, max_len=8):
    length = int(rng.integers(1, max_len + 1))
    return tuple(Behavior(int(rng.integers(n_items)), int(rng.integers(n_types)), t) for t in range(length))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): an acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        detail = dict(item.user_properties).get("detail", "")
        ACCEPTANCE_LINES.append(f"{status}  {marker.args[0]}  {detail}".rstrip())


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
