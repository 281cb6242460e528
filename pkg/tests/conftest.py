import numpy as np
import pytest

from wastebench.config import default_config
from wastebench.manifest import DatasetManifest, ImageRecord, Label, Source
from wastebench.pipeline import NormalizationStats
from wastebench.synthetic import toy_images


@pytest.fixture(scope="session")
def stats():
    norm = default_config()["pipeline"]["normalization"]
    return NormalizationStats(norm["mean"], norm["std"])


@pytest.fixture(scope="session")
def toy_items():
    return [(f"{image_id}.png", label, img) for image_id, label, img in toy_images(64, seed=0)]


def make_manifest(n_pos, n_neg, prefix="img"):
    records = [ImageRecord(f"{prefix}_p{i:04d}", f"images/{prefix}_p{i:04d}.png", Source.SYNTHETIC, Label.POSITIVE)
               for i in range(n_pos)]
    records += [ImageRecord(f"{prefix}_n{i:04d}", f"images/{prefix}_n{i:04d}.png", Source.SYNTHETIC, Label.NEGATIVE)
                for i in range(n_neg)]
    return DatasetManifest(records)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance criteria reporting -------------------------------------------

_CRITERIA = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and (rep.skipped or rep.failed)):
        status = "SKIP" if rep.skipped else "PASS" if rep.passed else "FAIL"
        prev = _CRITERIA.get(number, (None, title))[0]
        if prev in (None, "PASS"):
            _CRITERIA[number] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {title}")
