import logging

import pytest

from sfu.config import ExperimentConfig
from sfu.scenario import build_world, pretrain

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


class WorldCache:
    """Pretrained default-task federations, built once per (seed, backdoor)."""

    def __init__(self):
        self._cache = {}

    def config(self, seed: int, backdoor: bool = False, **changes) -> ExperimentConfig:
        cfg = ExperimentConfig.from_dict({"backdoor": {"enabled": backdoor}}).with_seed(seed)
        return cfg.replace(**changes) if changes else cfg

    def get(self, seed: int, backdoor: bool = False):
        key = (seed, backdoor)
        if key not in self._cache:
            world = build_world(self.config(seed, backdoor))
            state, records = pretrain(world, world.evaluator())
            self._cache[key] = (world, state, records)
        return self._cache[key]


@pytest.fixture(scope="session")
def worlds():
    logging.getLogger("sfu").setLevel(logging.ERROR)
    return WorldCache()


@pytest.fixture(scope="session")
def record_criterion():
    def record(name: str, passed: bool, detail: str):
        ACCEPTANCE[name] = (passed, detail)
        print(f"{name}: {'PASS' if passed else 'FAIL'} | {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda n: int(n.split()[1].rstrip(":"))):
        passed, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name}: {'PASS' if passed else 'FAIL'} | {detail}")
