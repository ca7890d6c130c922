import pytest
import torch

from neounet.synthetic import SyntheticSpec, generate


@pytest.fixture(autouse=True)
def _deterministic():
    torch.manual_seed(0)
    yield


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Eight 64x64 synthetic images with all four labels present."""
    root = tmp_path_factory.mktemp("synth_small")
    spec = SyntheticSpec(image_size=64, num_images=8, blobs_per_image=(1, 2),
                         class_mix=(0.4, 0.4, 0.2), seed=3)
    return generate(spec, root)


@pytest.fixture(scope="session")
def clean_dataset(tmp_path_factory):
    """Like ``small_dataset`` but with no unknown polyps."""
    root = tmp_path_factory.mktemp("synth_clean")
    spec = SyntheticSpec(image_size=64, num_images=6, class_mix=(0.5, 0.5, 0.0), seed=5)
    return generate(spec, root)


_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    ok = report.passed if report.when == "call" else not report.failed
    if report.when == "setup" and ok:
        return
    prev = _CRITERIA.get(number, (True, title, []))
    detail = getattr(item, "criterion_detail", [])
    _CRITERIA[number] = (prev[0] and ok, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, title, detail = _CRITERIA[number]
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += "  [" + "; ".join(detail) + "]"
        terminalreporter.write_line(line)


@pytest.fixture
def detail(request):
    """Append measured values to the criterion's summary line."""
    notes = []
    request.node.criterion_detail = notes
    return notes.append
