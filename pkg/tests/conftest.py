import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fcsimpute.data import Dataset, IntervalGrid, SubjectRecord, VariableSpec
from fcsimpute.rng import StreamKey
from fcsimpute.simgen import preset, simulate_trial

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SCHEMA = (
    VariableSpec("y1", "tte"),
    VariableSpec("y2", "ttre"),
    VariableSpec("y3", "continuous"),
    VariableSpec("y4", "binary"),
)
GRID = IntervalGrid((0.0, 3.0, 6.0, 9.0, 12.0))


def subject(sid, a=0, x=0.0, tc=12.0, tte=(12.0, 0), rec=(), y3=None, y4=None):
    """Record on the 0/3/6/9/12 grid; visits after ``tc`` are left missing."""
    seen = [t <= tc + 1e-12 for t in GRID.times]
    y3 = y3 if y3 is not None else [0.1 * k for k in range(5)]
    y4 = y4 if y4 is not None else [k % 2 for k in range(5)]
    return SubjectRecord(
        id=sid, treatment=a, baseline=(x,), censor_time=tc, tte=tte, recurrent_times=tuple(rec),
        longitudinal={"y3": tuple(float(v) if s else None for v, s in zip(y3, seen)),
                      "y4": tuple(float(v) if s else None for v, s in zip(y4, seen))},
    )


def toy_dataset():
    recs = [
        subject("A", a=0, x=0.5, tc=12.0, tte=(7.5, 1), rec=(1.0, 4.0, 10.0)),
        subject("B", a=1, x=-1.0, tc=6.0, tte=(6.0, 0), rec=(2.0,)),
        subject("C", a=0, x=0.0, tc=3.0, tte=(3.0, 0)),
        subject("D", a=1, x=1.5, tc=12.0, tte=(12.0, 0), rec=(3.0, 3.5)),
    ]
    return Dataset.from_subjects(SCHEMA, GRID, recs)


@pytest.fixture
def toy():
    return toy_dataset()


@pytest.fixture(scope="session")
def small_trial():
    cfg = preset("paper_main", n=200)
    return simulate_trial(cfg, StreamKey(11))


@pytest.fixture(scope="session")
def rng_factory():
    def make(*labels):
        key = StreamKey(2024)
        for k, lab in enumerate(labels):
            key = key.child(str(lab), k)
        return key.stream()
    return make


def empirical_se(x):
    x = np.asarray(x, dtype=float)
    return x.std(ddof=1) / np.sqrt(x.size)


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS, lines

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines():
        terminalreporter.write_line(line)
