import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", max_examples=30, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_slide():
    from img2st.data import normalize_counts, select_gene_panel, synth_slide

    table, src = synth_slide(3, 12, genes=6)
    panel = select_gene_panel(table, 6)
    expr = normalize_counts(table.dense_counts(panel.indices))
    return table, src, panel, expr


ACCEPTANCE_RESULTS = {}


def record_acceptance(key, title, ok, detail):
    line = f"{key} {'PASS' if ok else 'FAIL'} {title}: {detail}"
    ACCEPTANCE_RESULTS[key] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k[2:])):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[key])
