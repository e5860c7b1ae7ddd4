import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stexpr.bundle import Slide

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_slide(slide_id, n=6, d=4, genes=("A", "B", "C"), seed=0, with_expression=True):
    rng = np.random.default_rng(seed)
    counts = rng.integers(1, 20, size=(n, len(genes))).astype(np.float64)
    return Slide(
        slide_id=slide_id,
        spot_ids=[f"s{i}" for i in range(n)],
        coords=rng.uniform(0, 10, size=(n, 2)),
        counts=counts,
        embeddings=rng.standard_normal((n, d)).astype(np.float32).astype(np.float64),
        gene_names=list(genes),
        expression=np.log1p(counts) if with_expression else None,
        expression_genes=list(genes) if with_expression else None,
    )


@pytest.fixture
def slide_factory():
    return make_slide
