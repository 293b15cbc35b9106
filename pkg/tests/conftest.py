import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def sparse_block(rng, block_id, start, stop, density=0.5, integer=True):
    """Random block of the given range with about ``density`` of its coordinates set."""
    from spardl.core import SparseBlock
    size = stop - start
    mask = rng.random(size) < density
    idx = np.arange(start, stop)[mask]
    if integer:
        vals = rng.integers(-9, 10, idx.size).astype(float)
    else:
        vals = rng.standard_normal(idx.size)
    return SparseBlock(block_id, start, stop, idx, vals)


_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when not in ("setup", "call"):
        return
    number, title = mark.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "notes": []})
    if call.excinfo is not None:
        entry["ok"] = False
    if call.when == "call":
        entry["notes"].extend(v for k, v in item.user_properties if k == "measured")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "PASS" if entry["ok"] else "FAIL"
        notes = "; ".join(entry["notes"])
        terminalreporter.write_line(f"criterion {number:2d} {status}  {entry['title']}" + (f"  [{notes}]" if notes else ""))
