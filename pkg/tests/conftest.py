import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings
from PIL import Image

settings.register_profile("cdrl", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.function_scoped_fixture])
settings.load_profile("cdrl")

torch.set_num_threads(1)


def write_png(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(arr, dtype=np.uint8)).save(path)


def make_tree(root, n, split=None, with_b=True, with_label=True, size=8):
    """Write ``n`` tiny PNG pairs under root[/split]/{A,B,label}."""
    base = root / split if split else root
    rng = np.random.default_rng(n)
    for i in range(n):
        name = f"img_{i:04d}.png"
        write_png(base / "A" / name, rng.integers(0, 256, (size, size, 3)))
        if with_b:
            write_png(base / "B" / name, rng.integers(0, 256, (size, size, 3)))
        if with_label:
            write_png(base / "label" / name, rng.integers(0, 2, (size, size)) * 255)
    return base


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdicts, printed once at the end of the session
VERDICTS = {}


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
