import pytest

from hsattn.audio import FeatureConfig, write_lmel
from hsattn.corpus import CorpusManifest, compute_features, feature_path
from hsattn.synthetic import make_corpus

SHORT = FeatureConfig(num_frames=None)  # one-second clips give 30 frames


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Synthetic corpus with 4/2/2 clips per class in train/dev/test, plus its LMEL cache."""
    root = tmp_path_factory.mktemp("corpus")
    manifest = CorpusManifest.load(make_corpus(root, {"train": 4, "dev": 2, "test": 2}, duration=1.0))
    cache = root / "cache"
    cache.mkdir()
    for r in manifest.records:
        write_lmel(feature_path(cache, r), compute_features(r, SHORT))
    return manifest, cache


# -- acceptance summary: one pass/fail line per criterion ---------------------------------

_criteria: dict[int, tuple[str, bool, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call":
        return
    number, title = mark.args
    _criteria[number] = (title, call.excinfo is None, call.duration)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok, seconds = _criteria[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}  ({seconds:.1f} s)")
