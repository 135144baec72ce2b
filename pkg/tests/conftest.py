import os
import uuid

import pytest

from agentee.csm import ChannelSet, Region, make_doorbells, partition_region

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    n, title = marker.args
    detail = "; ".join(v for k, v in item.user_properties if k == "detail")
    _CRITERIA[n] = (title, "PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, verdict, detail = _CRITERIA[n]
        line = f"CRITERION {n} {verdict}: {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))


@pytest.fixture
def region_factory(tmp_path):
    """Create partitioned regions with doorbells; all are unlinked afterwards."""
    made: list[Region] = []
    sets: list[ChannelSet] = []

    def make(size=64 * 1024, channels=4, partition=True, bells=True):
        name = f"agentee-test-{uuid.uuid4().hex[:12]}"
        region = Region.create(name, size)
        made.append(region)
        if partition:
            partition_region(region, channels)
            if bells:
                make_doorbells(str(tmp_path), name, channels)
        return region

    def attach(region, side, bells=False):
        cs = ChannelSet(Region.attach(region.name), side, str(tmp_path) if bells else None)
        sets.append(cs)
        return cs

    make.bell_dir = str(tmp_path)
    make.attach = attach
    yield make
    for cs in sets:
        cs.release()
    for region in made:
        region.close()
        region.unlink()


def shm_exists(name: str) -> bool:
    return os.path.exists(f"/dev/shm/{name}")
