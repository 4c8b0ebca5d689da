"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""
import pytest

CRITERIA = {
    1: "gradient correctness",
    2: "regularizer formulas",
    3: "forgetting semantics",
    4: "embeddings help, a regularizer matches or helps",
    5: "perturbation robustness ordering",
    6: "transfer error falls with budget",
    7: "permutation equivariance",
    8: "determinism",
    9: "metric oracles",
    10: "perturbation kernels",
}


def pytest_configure(config):
    config._acceptance = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    item.config._acceptance[marker.args[0]] = (report.passed, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n not in results:
            terminalreporter.write_line(f"criterion {n:2d} NOT RUN  {name}")
            continue
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}     {name}: {detail}")
