import numpy as np
import pytest

from crshift.events import EventRecord, log_from_records
from crshift.features import EncoderConfig
from crshift.models import PreparedLog
from crshift.synthgen import AdvertiserProfile, SimConfig, generate_log

SMALL_ENCODER = EncoderConfig(dimension_bits=16)


def small_sim(seed=5, n_days=40, shift=((30, 36, 2.0),)):
    return SimConfig(
        day_range=(0, n_days - 1),
        profiles=(
            AdvertiserProfile("a", 400, 0.05, shift_schedule=shift),
            AdvertiserProfile("b", 250, 0.08),
        ),
        seed=seed,
    )


@pytest.fixture(scope="session")
def small_log():
    return generate_log(small_sim())


@pytest.fixture(scope="session")
def small_prep(small_log):
    return PreparedLog(small_log)


def make_event(day=0, tod=0.0, adv="a", label=-1, price=10.0, **attrs):
    return EventRecord(day, tod, adv, attrs.pop("device_type", "mobile"), attrs.pop("user_segment", "new"),
                       price, label, 5.0 if label == 1 else 0.0, attrs)


@pytest.fixture
def tiny_log():
    rng = np.random.default_rng(0)
    recs = []
    for day in range(6):
        for k in range(20):
            recs.append(make_event(day, float(k * 100), adv="ab"[k % 2], label=1 if rng.random() < 0.3 else -1,
                                   price=float(5 + k), product_id=f"p{k % 4}"))
    return log_from_records(recs)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
