import pytest

from saesteer.toylm import ToyLmConfig, build_corpus, init_lm


@pytest.fixture(scope="session")
def lm_config():
    return ToyLmConfig(seed=1)


@pytest.fixture(scope="session")
def lm(lm_config):
    return init_lm(lm_config)


@pytest.fixture(scope="session")
def small_corpus(lm_config, lm):
    return build_corpus(lm_config, 4096, seed=3, lm=lm)


# ------------------------------------------------------------ acceptance reporting
# Tests marked ``criterion(n, title)`` are rolled up into one PASS/FAIL line per
# criterion at the end of the run; a criterion passes only if all its tests pass.

_criteria: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    entry = _criteria.setdefault(n, [title, True, False])
    if rep.when == "call":
        entry[2] = True
    if rep.failed or rep.skipped:
        entry[1] = False


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, ok, ran = _criteria[n]
        status = "PASS" if ok and ran else "FAIL"
        terminalreporter.write_line(f"{status}  {n:2d}  {title}")
