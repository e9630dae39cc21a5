import os
import time

import numpy as np
import pytest

from breathcheck import data_path
from breathcheck.cfg import load_config

YOLOV3_CFG = data_path("yolov3.cfg")
TINY_CFG = data_path("yolov3-tiny.cfg")

# byte lengths of the weights files published alongside the Darknet configs
PUBLISHED_YOLOV3_BYTES = 248_007_048
PUBLISHED_TINY_BYTES = 35_434_956

MINIMAL_NET = "[net]\nwidth=416\nheight=416\nchannels=3"


def published_weights(name: str):
    """Path to a published weights file if the environment provides one."""
    env = {"yolov3": "BREATHCHECK_YOLOV3_WEIGHTS", "yolov3-tiny": "BREATHCHECK_TINY_WEIGHTS"}[name]
    path = os.environ.get(env)
    return path if path and os.path.exists(path) else None


@pytest.fixture(scope="session")
def tiny_cfg():
    return load_config(TINY_CFG)


@pytest.fixture(scope="session")
def full_cfg():
    return load_config(YOLOV3_CFG)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def network_enabled() -> bool:
    return os.environ.get("BREATHCHECK_NETWORK") == "1"


# ------------------------------------------------------------ acceptance log

_ACCEPTANCE = pytest.StashKey[list]()


class CriterionRecord:
    def __init__(self, log: list, key: str, title: str):
        self.log, self.key, self.title = log, key, title
        self.detail = ""

    def __enter__(self):
        self.started = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.started
        if exc_type is None:
            verdict = "PASS"
        elif issubclass(exc_type, pytest.skip.Exception):
            verdict, self.detail = "SKIP", str(exc)
        else:
            verdict = "FAIL"
            self.detail = self.detail or f"{exc_type.__name__}: {exc}".splitlines()[0]
        line = f"{verdict} criterion {self.key}: {self.title} [{elapsed:.1f}s]"
        if self.detail:
            line += f" -- {self.detail}"
        self.log.append(line)
        print(line)
        return False


@pytest.fixture
def criterion(request):
    log = request.config.stash.setdefault(_ACCEPTANCE, [])
    return lambda key, title: CriterionRecord(log, key, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
