import contextlib

import numpy as np
import pytest

from textdiae.config import build_config
from textdiae.imageops import Image, render_synthetic_word

WORDS = ("cat", "dog", "fish", "bird", "tree", "moon", "star", "rain")

# criterion number -> (passed, title, detail); filled by tests/test_acceptance.py
CRITERIA: dict[int, tuple[bool, str, str]] = {}


@contextlib.contextmanager
def criterion(number: int, title: str):
    """Record the outcome of one acceptance criterion and re-raise failures."""
    detail = {}
    try:
        yield detail
    except BaseException as exc:
        CRITERIA[number] = (False, title, f"{type(exc).__name__}: {exc}".splitlines()[0][:160])
        raise
    CRITERIA[number] = (True, title, detail.get("msg", ""))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, title, detail = CRITERIA[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy():
    return build_config("toy")


@pytest.fixture(scope="session")
def word_images(toy):
    m = toy.model
    return [render_synthetic_word(w, m.image_h, m.image_w, m.channels)[0] for w in WORDS]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h, w, c=1) -> Image:
    return Image(rng.integers(0, 256, size=(h, w, c), dtype=np.uint8))


def random_binary(rng, h, w, p=0.3) -> Image:
    return Image(np.where(rng.random((h, w)) < p, 0, 255).astype(np.uint8))
