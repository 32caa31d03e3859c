"""Counter-based random streams and keyed hashing.

Every random draw in the simulator is a pure function of
(seed, stream_id, counter), so reruns are bit-identical regardless of
worker count or scheduling. Streams for different (seed, stream_id)
pairs are derived without coordination, which is what lets per-worker,
per-purpose randomness stay deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB
_U64 = np.uint64

# stream purposes; stream_id = (worker << 16) | purpose
DATA, GRAD_COMPRESS, ERR_COMPRESS, INIT, PROBE = range(5)


def mix64(z: int) -> int:
    """Avalanche one 64-bit word (splitmix64 finalizer)."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX_A) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX_B) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> _U64(30)
    z *= _U64(_MIX_A)
    z ^= z >> _U64(27)
    z *= _U64(_MIX_B)
    z ^= z >> _U64(31)
    return z


def derive_key(*words: int) -> int:
    """Fold integer words into one well-mixed 64-bit key (order matters)."""
    h = 0x243F6A8885A308D3
    for w in words:
        h = mix64(h ^ ((int(w) + _GOLDEN) & _MASK64))
    return h


@dataclass
class RngStream:
    """Splittable counter-based uniform source.

    Draw n is mix(key + n*golden) with key = derive_key(seed, stream_id),
    so two streams with equal (seed, stream_id) replay identically and
    distinct stream_ids are statistically independent.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0
    _key: int = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._key = derive_key(self.seed, self.stream_id)

    def raw(self, n: int) -> np.ndarray:
        """n mixed 64-bit words; advances the counter by n."""
        idx = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        return _mix64_array(_U64(self._key) + idx * _U64(_GOLDEN))

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles in [0, 1)."""
        return (self.raw(n) >> _U64(11)) * 2.0**-53

    def next_uniform(self) -> float:
        return float(self.uniforms(1)[0])

    def normals(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller (consumes 2n counters)."""
        u1 = ((self.raw(n) >> _U64(11)) + _U64(1)) * 2.0**-53  # (0, 1]
        u2 = (self.raw(n) >> _U64(11)) * 2.0**-53
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def randint(self, bound: int) -> int:
        """One integer uniform on [0, bound). Modulo bias < bound/2**64."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return int(self.raw(1)[0] % _U64(bound))

    def next_key(self) -> int:
        """One raw 64-bit word, for deriving child seeds."""
        return int(self.raw(1)[0])

    def sample_without_replacement(self, d: int, k: int) -> np.ndarray:
        """First k entries of a Fisher-Yates shuffle of range(d)."""
        if not 0 <= k <= d:
            raise ValueError(f"need 0 <= k <= d, got k={k}, d={d}")
        swap: dict[int, int] = {}
        out = np.empty(k, dtype=np.int64)
        for i in range(k):
            j = i + self.randint(d - i)
            out[i] = swap.get(j, j)
            swap[j] = swap.get(i, i)
        return out

    def clone(self) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.counter)


def make_stream(seed: int, worker: int, purpose: int) -> RngStream:
    """Stream for one (worker, purpose) pair under a master seed."""
    return RngStream(seed, stream_id=(worker << 16) | purpose)


@dataclass(frozen=True)
class HashFamily:
    """rows x width family of keyed hashes with matching sign hashes.

    index(row, coord) is a column in [0, width); sign(row, coord) is
    +-1. Both are pure in (seed, row, coord); no tables are stored.
    """

    seed: int
    rows: int
    width: int

    def _hash(self, row: int, tag: int, coords: np.ndarray) -> np.ndarray:
        if not 0 <= row < self.rows:
            raise ValueError(f"row {row} out of range [0, {self.rows})")
        key = derive_key(self.seed, row, tag)
        c = np.asarray(coords, dtype=np.uint64)
        return _mix64_array((c * _U64(_GOLDEN)) ^ _U64(key))

    def index(self, row: int, coords) -> np.ndarray:
        return (self._hash(row, 0, coords) % _U64(self.width)).astype(np.int64)

    def sign(self, row: int, coords) -> np.ndarray:
        bit = (self._hash(row, 1, coords) >> _U64(32)) & _U64(1)
        return 1.0 - 2.0 * bit.astype(np.float64)
