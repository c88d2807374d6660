import numpy as np
import pytest

from zsltag.catalog import Catalog


def random_catalog(rng, n_instances, n_labels, max_card=4, prefix="i"):
    """Random catalog where every label is used at least once."""
    records = []
    for k in range(n_instances):
        size = int(rng.integers(1, min(max_card, n_labels) + 1))
        labels = rng.choice(n_labels, size=size, replace=False)
        records.append((f"{prefix}{k:04d}", [f"g{j:03d}" for j in labels], None))
    for j in range(n_labels):
        records.append((f"{prefix}x{j:03d}", [f"g{j:03d}"], None))
    return Catalog.from_records(records)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_catalog():
    # X = {g1, g2}, Y = {g3, g4}
    return Catalog.from_records([
        ("i1", ["g1"], None),
        ("i2", ["g2", "g3"], None),
        ("i3", ["g4"], None),
        ("i4", ["g1", "g2"], None),
    ])


ACCEPTANCE = []


def verdict(n, ok, detail):
    """Record one acceptance line, then fail the calling test if ``ok`` is false."""
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE.append(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
