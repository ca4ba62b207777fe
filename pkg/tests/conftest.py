import copy

import pytest

from vectwin.config import (LIGHT_TO_HEAVY, UNIFORM6, PhaseConfig, RunConfig, default_degraded_servers,
                            default_server_tiers)


def short_phases(seg=60.0, m0=8, m1=12, lam=0.5):
    degraded = default_degraded_servers(default_server_tiers())
    light = tuple(reversed(LIGHT_TO_HEAVY))
    return [
        PhaseConfig("warmup", 0.0, seg, m0, lam, UNIFORM6),
        PhaseConfig("phase1", seg, 2 * seg, m1, lam, LIGHT_TO_HEAVY),
        PhaseConfig("phase2", 2 * seg, 3 * seg, m1, 1.2 * lam, LIGHT_TO_HEAVY, degraded_servers=degraded),
        PhaseConfig("phase3", 3 * seg, 4 * seg, m1, 1.2 * lam, light),
    ]


def make_short_cfg(seg=60.0, **kw):
    cfg = RunConfig()
    cfg.scenario.phases = short_phases(seg, **kw)
    cfg.hyperparams.batch_size = 8
    cfg.dt.T_DT = 20.0
    return cfg


@pytest.fixture
def short_cfg():
    return make_short_cfg()


@pytest.fixture
def fresh():
    return copy.deepcopy


# acceptance verdict lines, printed once at the end of the session
VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
