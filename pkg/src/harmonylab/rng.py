"""Counter-based random streams.

Every draw is a pure function of ``(seed, counter)``: word ``w`` of a stream is
``splitmix64_mix(seed + (w + 1) * GOLDEN)``.  Counter tick ``c`` owns words
``2c`` and ``2c + 1``; uniforms use the first word, normals use both through
the cosine branch of Box-Muller.  All arithmetic is on ``uint64`` so streams
are identical on every platform.

Child streams are derived with :func:`derive_seed`, which mixes the parent
seed with a stable hash of the stream id (an int or a string).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import InvalidShape

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / (1 << 53)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _words(seed: int, start: int, n: int) -> np.ndarray:
    idx = np.arange(start, start + n, dtype=np.uint64) + np.uint64(1)
    with np.errstate(over="ignore"):
        return _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + idx * GOLDEN)


def _stream_hash(stream_id: int | str) -> int:
    if isinstance(stream_id, str):
        return int.from_bytes(hashlib.blake2b(stream_id.encode(), digest_size=8).digest(), "little")
    return int(stream_id) & 0xFFFFFFFFFFFFFFFF


def derive_seed(seed: int, stream_id: int | str) -> int:
    """Seed of the child stream ``stream_id`` of ``seed``."""
    a = _words(seed, 0, 1)[0]
    with np.errstate(over="ignore"):
        return int(_mix(np.array([a ^ np.uint64(_stream_hash(stream_id))], dtype=np.uint64))[0])


def _check_shape(shape) -> tuple[int, ...]:
    shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise InvalidShape(f"shape must be non-empty with positive dims, got {shape}")
    return shape


@dataclass
class Rng:
    seed: int
    counter: int = 0

    def _take(self, shape) -> tuple[tuple[int, ...], np.ndarray]:
        shape = _check_shape(shape)
        n = int(np.prod(shape))
        w = _words(self.seed, 2 * self.counter, 2 * n)
        self.counter += n
        return shape, w

    def uniform(self, shape) -> np.ndarray:
        """Uniform draws in ``[0, 1)``."""
        shape, w = self._take(shape)
        return ((w[0::2] >> np.uint64(11)).astype(np.float64) * _INV53).reshape(shape)

    def normal(self, shape) -> np.ndarray:
        shape, w = self._take(shape)
        u1 = ((w[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _INV53
        u2 = (w[1::2] >> np.uint64(11)).astype(np.float64) * _INV53
        return (np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)).reshape(shape)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct integers from ``range(n)``, in draw order."""
        keys = self.uniform(n)
        return np.argsort(keys, kind="stable")[:k]

    def fork(self, stream_id: int | str) -> "Rng":
        return Rng(derive_seed(self.seed, stream_id))
