import hashlib
import os
import time
from pathlib import Path

import numpy as np
import pytest

import sdslab
from sdslab.config import RunConfig, dump_config
from sdslab.diffusion import make_schedule
from sdslab.fileio import load_checkpoint, save_checkpoint
from sdslab.pipeline import train_teachers

SRC = Path(sdslab.__file__).parent
CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(scope="session")
def sched():
    return make_schedule(1000, "cosine")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def _teacher_key(cfg: RunConfig) -> str:
    h = hashlib.sha256(dump_config(cfg).encode())
    for name in ("teacher.py", "shapes.py", "student.py", "optim.py", "pipeline.py", "diffusion.py"):
        h.update((SRC / name).read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def trained_teachers(request):
    """(view, class) teachers under the default teacher config.

    Training takes a couple of minutes, so checkpoints are cached in the
    pytest cache directory keyed by config and source hashes. Set
    SDSLAB_RETRAIN=1 to ignore the cache.
    """
    cfg = RunConfig()
    cache = Path(request.config.cache.mkdir("sdslab-teachers"))
    key = _teacher_key(cfg)
    vp, cp = cache / f"view-{key}.dtck", cache / f"class-{key}.dtck"
    if vp.exists() and cp.exists() and not os.environ.get("SDSLAB_RETRAIN"):
        return load_checkpoint(vp), load_checkpoint(cp)
    view, fine = train_teachers(cfg)
    save_checkpoint(view, vp)
    save_checkpoint(fine, cp)
    return view, fine


@pytest.fixture(scope="session")
def teacher_files(trained_teachers, tmp_path_factory):
    d = tmp_path_factory.mktemp("teachers")
    save_checkpoint(trained_teachers[0], d / "view.dtck")
    save_checkpoint(trained_teachers[1], d / "class.dtck")
    return d / "view.dtck", d / "class.dtck"


ACCEPTANCE: dict[int, str] = {}


class Criterion:
    """Times one acceptance criterion and records a PASS/FAIL line.

    The block fails when an assertion inside it fails or when it runs past
    its time budget.
    """

    def __init__(self, number: int, title: str, budget_s: float):
        self.number, self.title, self.budget = number, title, budget_s
        self.detail = ""

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        ok = exc_type is None and elapsed <= self.budget
        why = "" if exc_type is None else f" [{exc_type.__name__}: {str(exc).splitlines()[0] if str(exc) else ''}]"
        line = (
            f"criterion {self.number:2d} {'PASS' if ok else 'FAIL'}  {self.title}"
            f" ({self.detail}{'; ' if self.detail else ''}{elapsed:.1f}s, budget {self.budget:g}s){why}"
        )
        ACCEPTANCE[self.number] = line
        print(line)
        if exc_type is None and not ok:
            raise AssertionError(f"criterion {self.number} took {elapsed:.1f}s, budget {self.budget:g}s")
        return False


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 12):
        terminalreporter.write_line(ACCEPTANCE.get(n, f"criterion {n:2d} NOT RUN"))
