"""Tests for cache.py functionality."""

from datetime import timedelta
from pathlib import Path

import numpy as np
import pytest

from romcontrol.cache import DiskCache, NullCache, ReferenceCache, cache_key, open_cache
from romcontrol.utils.test_utils import FakeLogger


@pytest.fixture
def log() -> FakeLogger:
    return FakeLogger()


def test_abstract_base_class() -> None:
    with pytest.raises(TypeError):
        ReferenceCache()  # type: ignore[abstract]


def test_cache_key_is_stable() -> None:
    theta = np.array([1.0, 2.0])
    key = cache_key("heat", theta, 0.5, {"n_mc": 10, "grid": 4})
    assert key == cache_key("heat", theta.copy(), 0.5, {"grid": 4, "n_mc": 10})
    assert key.startswith("heat:")


def test_cache_key_distinguishes_inputs() -> None:
    theta = np.array([1.0, 2.0])
    key = cache_key("heat", theta, 0.5)
    assert key != cache_key("heat", theta, 0.6)
    assert key != cache_key("upwind", theta, 0.5)
    assert key != cache_key("heat", theta.reshape(2, 1), 0.5)


def test_null_cache_always_computes() -> None:
    calls = []
    cache = NullCache()
    for _ in range(2):
        cache.get_or_compute("k", lambda: calls.append(1) or len(calls))
    assert len(calls) == 2


def test_disk_cache_hit(tmp_path: Path, log: FakeLogger) -> None:
    calls = []

    def compute() -> np.ndarray:
        calls.append(1)
        return np.arange(3.0)

    cache = DiskCache(log, str(tmp_path / "cache"))
    first = cache.get_or_compute("key", compute)
    second = cache.get_or_compute("key", compute)
    cache.close()
    np.testing.assert_array_equal(first, second)
    assert len(calls) == 1
    assert any("Cache hit" in message for message in log.at("debug"))


def test_disk_cache_persists_across_instances(tmp_path: Path, log: FakeLogger) -> None:
    DiskCache(log, str(tmp_path)).get_or_compute("key", lambda: 42)
    reopened = DiskCache(log, str(tmp_path))
    assert reopened.get_or_compute("key", lambda: 0) == 42
    reopened.close()


def test_disk_cache_expiry(tmp_path: Path, log: FakeLogger) -> None:
    cache = DiskCache(log, str(tmp_path), expiry=timedelta(seconds=-1))
    cache.get_or_compute("key", lambda: 1)
    assert cache.get_or_compute("key", lambda: 2) == 2
    assert any("expired" in message for message in log.at("debug"))
    cache.close()


def test_open_cache(tmp_path: Path, log: FakeLogger) -> None:
    assert isinstance(open_cache("", log), NullCache)
    assert isinstance(open_cache(None, log), NullCache)
    cache = open_cache(str(tmp_path / "refs"), log)
    assert isinstance(cache, DiskCache)
    assert (tmp_path / "refs").is_dir()
    cache.close()
