import numpy as np
import pytest

from defectforge.genclient import serve_mock
from defectforge.imgcore import ImageBuffer, derive_seed
from defectforge.pipeline.toybench import KINDS, render_product

FIXTURE_SEED = 2024


def fixture_images(n=60, seed=FIXTURE_SEED):
    """The standard fixture set: ``n`` toy products cycling through every kind."""
    return [render_product(KINDS[i % len(KINDS)], derive_seed(seed, "fixture", i)) for i in range(n)]


@pytest.fixture(scope="session")
def fixture_set():
    return fixture_images()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_image(rng, h=24, w=20, c=1):
    return ImageBuffer(rng.integers(0, 256, size=(h, w, c), dtype=np.uint8))


@pytest.fixture(scope="session")
def mock_server():
    """``mock_server(mode, seed=0, fail_first=2)`` -> running server, shared per session."""
    servers = {}

    def get(mode, seed=0, fail_first=2):
        key = (mode, seed, fail_first)
        if key not in servers:
            servers[key] = serve_mock(mode, seed, fail_first=fail_first)
        return servers[key]

    yield get
    for s in servers.values():
        s.stop()


@pytest.fixture(scope="session")
def toy_experiment(tmp_path_factory):
    """The default seed-7 experiment, run once per session: ``(out_dir, results, seconds)``."""
    import time
    from defectforge.pipeline.config import load_config
    from defectforge.pipeline.experiment import run_experiment
    out = tmp_path_factory.mktemp("experiment") / "run1"
    t0 = time.perf_counter()
    results, _ = run_experiment(load_config(), out)
    return out, {r.strategy: r for r in results}, time.perf_counter() - t0


def tree_digest(root):
    """``{relative path: sha256}`` for every file under ``root``."""
    import hashlib
    from pathlib import Path
    root = Path(root)
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
