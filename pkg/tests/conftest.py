import io
import os

import numpy as np
import pytest

from finetag.data import DatasetSplit, LabelMatrix
from finetag.features import FeatureMap, FeatureStore, write_store
from finetag.oracles import make_planted


def store_from_arrays(arrays, ids=None):
    ids = list(ids) if ids is not None else list(range(1, len(arrays) + 1))
    buf = io.BytesIO()
    write_store([FeatureMap(i, np.asarray(a, dtype=np.float32)) for i, a in zip(ids, arrays)], buf)
    return FeatureStore(buf.getvalue())


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def planted():
    """200 training + 50 validation images from the planted model (seed 0)."""
    ds = make_planted(num_images=250, seed=0)
    ids = ds.image_ids
    store = store_from_arrays(ds.features, ids)
    labels = LabelMatrix(ds.labels, ids)
    split = DatasetSplit(ids[:200], ids[200:], [], seed=0)
    return ds, store, labels, split


@pytest.fixture
def cub_dir():
    path = os.environ.get("FINETAG_CUB_DIR")
    if not path or not os.path.isdir(path):
        pytest.skip("SKIPPED: set FINETAG_CUB_DIR to a CUB-200-2011 download to run the data-pipeline criterion")
    return path


# Acceptance reporting: one PASS/FAIL/SKIP line per criterion marker.

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_runtest_logreport(report):
    marker = getattr(report, "_criterion", None)
    if marker is None:
        return
    key = marker
    state = _criteria.setdefault(key, "PASS")
    if report.failed:
        _criteria[key] = "FAIL"
    elif report.skipped and state == "PASS" and report.when in ("setup", "call"):
        _criteria[key] = "SKIPPED"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        report._criterion = mark.args


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), state in sorted(_criteria.items()):
        terminalreporter.write_line(f"[{state:7s}] AC{number:<2d} {title}")


def write_fake_cub(root, num_images=30, seed=0):
    """A miniature CUB-style download: 9 attributes in 3 groups, laid out like the real archive."""
    rng = np.random.default_rng(seed)
    base = root / "CUB_200_2011"
    (base / "attributes").mkdir(parents=True)
    names = [f"has_{g}::{v}" for g in ("bill_shape", "wing_color", "size") for v in ("a", "b", "c")]
    (root / "attributes.txt").write_text("".join(f"{j} {n}\n" for j, n in enumerate(names, start=1)))
    (base / "images.txt").write_text("".join(f"{i} 001.Bird/img_{i}.jpg\n" for i in range(1, num_images + 1)))
    (base / "train_test_split.txt").write_text(
        "".join(f"{i} {int(i % 2 == 0)}\n" for i in range(1, num_images + 1)))
    lines = [f"{i} {j} {rng.integers(2)} {rng.integers(1, 5)} {rng.uniform(0, 20):.3f}"
             for i in range(1, num_images + 1) for j in range(1, len(names) + 1)]
    (base / "attributes" / "image_attribute_labels.txt").write_text("\n".join(lines) + "\n")
    return base
