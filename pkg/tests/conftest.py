import json
from pathlib import Path

import numpy as np
import pytest

from cfpredict.dataset import (
    DatasetBundle,
    FeatureMode,
    TimestampFeatures,
    build_bundle,
    generate_synthetic_timelines,
)
from cfpredict.ingest import CodeforcesClient, RateLimiter, request_key

FIXTURES = Path(__file__).parent / "fixtures"


def fixture_bytes(name: str) -> bytes:
    return (FIXTURES / name).read_bytes()


class FakeClock:
    """Monotonic clock that only advances when someone sleeps."""

    def __init__(self):
        self.now = 0.0

    def __call__(self) -> float:
        return self.now

    def sleep(self, dt: float) -> None:
        self.now += dt


class DictTransport:
    """Serves canned payloads by request key and records every call."""

    def __init__(self, responses: dict[str, bytes], clock=None):
        self.responses = responses
        self.clock = clock
        self.calls: list[tuple[str, float | None]] = []

    def __call__(self, method, params) -> bytes:
        key = request_key(method, params)
        self.calls.append((key, self.clock() if self.clock else None))
        if key not in self.responses:
            raise AssertionError(f"unexpected request {key}")
        return self.responses[key]


def ok(result) -> bytes:
    return json.dumps({"status": "OK", "result": result}).encode()


def make_client(tmp_path, responses, *, interval=0.0, page_size=1000, clock=None):
    clock = clock or FakeClock()
    transport = DictTransport(responses, clock)
    client = CodeforcesClient(
        tmp_path / "cache",
        transport=transport,
        limiter=RateLimiter(interval, clock=clock, sleep=clock.sleep),
        page_size=page_size,
    )
    return client, transport


@pytest.fixture
def fake_clock():
    return FakeClock()


def random_timeline(rng: np.random.Generator, length: int) -> list[TimestampFeatures]:
    return [
        TimestampFeatures(
            contest_id=100 + i,
            contest_time=1_000_000 + 1000 * i,
            rating=float(rng.integers(800, 3000)),
            rank=float(rng.integers(1, 20000)),
            solve_rating=float(rng.uniform(0, 4000)),
            ac_count=float(rng.integers(0, 30)),
            wa_count=float(rng.integers(0, 10)),
        )
        for i in range(length)
    ]


def small_bundle(mode=FeatureMode.WITH_PRACTICE, n_users=4, length=20, seed=3, split_seed=0, **kw) -> DatasetBundle:
    tls = generate_synthetic_timelines(n_users, length, seed, practice_effect=5.0, **kw)
    return build_bundle({f"u{i}": t for i, t in enumerate(tls)}, mode, split_seed=split_seed)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def acceptance():
    def record(number: int, name: str, passed: bool, detail: str) -> None:
        line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {name} ({detail})"
        _ACCEPTANCE[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[n])
