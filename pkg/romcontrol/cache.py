"""On-disk memoization of expensive, deterministic reference computations."""

import hashlib
import json
import logging
import os
from abc import ABC, abstractmethod
from collections.abc import Callable
from datetime import datetime, timedelta
from typing import Any, Optional, TypeVar

import numpy as np
from diskcache import Cache

CACHE_DIR = "/tmp/romcontrol"
CACHE_EXPIRY = timedelta(days=7)

T = TypeVar("T")


def cache_key(namespace: str, *parts: Any) -> str:
    """Stable key from a namespace and JSON-able parts; arrays are hashed by shape and bytes."""
    digest = hashlib.sha256(namespace.encode())
    for part in parts:
        if isinstance(part, np.ndarray):
            array = np.ascontiguousarray(part, dtype=np.float64)
            digest.update(repr(array.shape).encode())
            digest.update(array.tobytes())
        else:
            digest.update(json.dumps(part, sort_keys=True, default=str).encode())
    return f"{namespace}:{digest.hexdigest()}"


class ReferenceCache(ABC):
    """Memoizes reference computations by key."""

    @abstractmethod
    def get_or_compute(self, key: str, compute: Callable[[], T]) -> T:
        """Return the cached value for ``key``, computing and storing it on a miss.

        Args:
            key: Cache key, usually from :func:`cache_key`.
            compute: Producer of the value.

        Returns:
            The cached or freshly computed value.
        """
        pass

    def close(self) -> None:
        pass


class NullCache(ReferenceCache):
    """Computes every time."""

    def get_or_compute(self, key: str, compute: Callable[[], T]) -> T:
        return compute()


class DiskCache(ReferenceCache):
    """Reference cache backed by ``diskcache`` with timestamped entries."""

    def __init__(
        self, log: logging.Logger, cache_dir: str = CACHE_DIR, expiry: timedelta = CACHE_EXPIRY
    ) -> None:
        """Initialize the cache.

        Args:
            log: Receives hit and expiry messages at debug level.
            cache_dir: Directory holding the reference store; created if missing.
            expiry: Age after which entries are ignored.
        """
        os.makedirs(cache_dir, exist_ok=True)
        self.log = log
        self.cache = Cache(cache_dir)
        self.cache_dir = cache_dir
        self.expiry = expiry

    def close(self) -> None:
        """Close the cache connection."""
        self.log.debug("Closing cache connection")
        self.cache.close()

    def _get(self, key: str) -> Optional[Any]:
        cached = self.cache.get(key)
        if not cached:
            return None
        timestamp, value = cached
        if datetime.fromtimestamp(timestamp) + self.expiry < datetime.now():
            self.log.debug("Cache entry {0} expired", key)
            return None
        return value

    def get_or_compute(self, key: str, compute: Callable[[], T]) -> T:
        cached = self._get(key)
        if cached is not None:
            self.log.debug("Cache hit for {0}", key)
            return cached  # type: ignore[no-any-return]
        value = compute()
        self.cache.set(key, (datetime.now().timestamp(), value))
        return value


def open_cache(cache_dir: Optional[str], log: logging.Logger) -> ReferenceCache:
    """A disk cache in ``cache_dir``, or a pass-through cache when it is empty or None."""
    if not cache_dir:
        return NullCache()
    return DiskCache(log, cache_dir)
