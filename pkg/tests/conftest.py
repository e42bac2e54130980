import numpy as np
import pytest

from llmvot import pipeline
from llmvot.design import builtin_packages
from llmvot.estimator import RankingData, RankingObservation
from llmvot.respondents import sample_plackett_luce

TRUE_BETA = np.array([-0.30, -0.05, -0.50])


def synthetic_rankings(package, beta, n, seed):
    """n rankings alternating between the package's two choice sets."""
    rng = np.random.default_rng(seed)
    xs = {i: np.asarray(package.choice_set(i).attribute_matrix()) for i in (1, 2)}
    out = []
    for k in range(n):
        x = xs[1 + k % 2]
        out.append(RankingObservation(x, sample_plackett_luce(x @ beta, rng)))
    return out


@pytest.fixture(scope="session")
def base_package():
    return builtin_packages()[1]


@pytest.fixture(scope="session")
def recovery_data(base_package):
    """5,000 rankings of the 29.1 USD/h package at the planted beta."""
    return RankingData(synthetic_rankings(base_package, TRUE_BETA, 5000, seed=20240601))


@pytest.fixture(scope="session")
def setting_run(tmp_path_factory):
    """The built-in synthetic-setting run (128 cells, 120 rankings each), executed and fitted once."""
    root = tmp_path_factory.mktemp("runs")
    manifest = pipeline.plan_run("synthetic-setting", run_id="setting")
    pipeline.save_manifest(manifest, root)
    store = pipeline.ResponseStore(pipeline.run_dir(root, manifest.run_id))
    summary = pipeline.execute(manifest, pipeline.respondent_for(manifest), store)
    fits = pipeline.estimate_all(store, manifest)
    return manifest, store, summary, fits


ACCEPTANCE_LINES: list[str] = []


def record_verdict(number, title, passed, detail):
    """Print and remember one acceptance line; the caller asserts ``passed``."""
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
