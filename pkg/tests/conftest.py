import numpy as np
import pytest

from snippetfda.basis import BasisKind, BasisSpec
from snippetfda.covfit import design_from_blocks

_ACCEPTANCE: dict = {}


def random_design(rng, p, n, m, spec=None):
    """Small design with random times and raw products from random responses."""
    spec = spec or BasisSpec(BasisKind.FOURIER_EXT, 0.1)
    blocks = []
    for _ in range(n):
        times = np.sort(rng.uniform(0, 1, m))
        y = rng.normal(size=m)
        blocks.append((times, np.outer(y, y), rng.uniform(0.5, 2.0)))
    return design_from_blocks(spec, p, blocks)


def random_cholesky(rng, p):
    L = np.tril(rng.normal(size=(p, p)), -1)
    L[np.diag_indices(p)] = rng.uniform(0.3, 1.5, p)
    return L


@pytest.fixture
def acceptance():
    """Record one pass/fail line per acceptance criterion and assert it."""

    def record(number, ok, detail):
        _ACCEPTANCE[number] = (bool(ok), detail)
        assert ok, f"criterion {number} failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
