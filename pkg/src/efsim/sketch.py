"""Count sketch: a linear, mergeable compressed vector representation.

The table has `rows x width` scalar cells. Coordinate p lands in row i at
column index(i, p) with sign(i, p); decoding takes the median of the
signed cells across rows. Because inserts are additive, sketches with a
shared hash family add and average cell-wise, which is what makes the
compressed error state reducible across workers.

The block trick (``block_size > 1``) groups consecutive coordinates so
one hash evaluation covers a whole block: columns are split into
``width / block_size`` slots and coordinate p maps to slot
index(i, p // block_size) at offset p % block_size. block_size=1 is the
plain per-coordinate sketch.
"""

from __future__ import annotations

import struct

import numpy as np

from .rng import HashFamily

PRECISIONS = ("full", "half")
_DTYPES = {"full": np.float64, "half": np.float16}
_WIRE_DTYPES = {"full": "<f4", "half": "<f2"}
_ELEMENT_BYTES = {"full": 4, "half": 2}
_HEADER = struct.Struct("<5Q")


class CountSketch:
    """rows x width table plus the hash family that addresses it."""

    def __init__(
        self,
        dim: int,
        rows: int,
        width: int,
        *,
        seed: int = 0,
        precision: str = "full",
        block_size: int = 1,
        family=None,
    ):
        if rows < 1 or width < 1:
            raise ValueError("rows and width must be >= 1")
        if precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {PRECISIONS}")
        if block_size < 1 or width % block_size != 0:
            raise ValueError("block_size must divide width")
        self.dim = dim
        self.rows = rows
        self.width = width
        self.precision = precision
        self.block_size = block_size
        self.family = family if family is not None else HashFamily(
            seed, rows, width // block_size
        )
        self.table = np.zeros((rows, width), dtype=_DTYPES[precision])

    @property
    def seed(self) -> int:
        return self.family.seed

    def _columns(self, row: int, coords: np.ndarray) -> np.ndarray:
        """Scalar column index for each coordinate."""
        if self.block_size == 1:
            return self.family.index(row, coords)
        slots = self.family.index(row, coords // self.block_size)
        return slots * self.block_size + coords % self.block_size

    def _signs(self, row: int, coords: np.ndarray) -> np.ndarray:
        return self.family.sign(row, coords // self.block_size)

    def _check_coord(self, coord: int) -> None:
        if not 0 <= coord < self.dim:
            raise ValueError(f"coordinate {coord} out of range [0, {self.dim})")

    def insert(self, coord: int, value: float) -> None:
        """Add value to coordinate coord's cell in every row."""
        self._check_coord(coord)
        c = np.asarray([coord])
        for i in range(self.rows):
            col = self._columns(i, c)[0]
            self.table[i, col] += self._signs(i, c)[0] * value

    def insert_dense(self, vec: np.ndarray) -> None:
        """Add a whole vector; equivalent to inserting each coordinate."""
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise ValueError(f"expected vector of length {self.dim}")
        coords = np.arange(self.dim)
        for i in range(self.rows):
            cols = self._columns(i, coords)
            add = np.bincount(cols, weights=self._signs(i, coords) * vec,
                              minlength=self.width)
            if self.precision == "half":
                self.table[i] = (self.table[i].astype(np.float64) + add).astype(
                    np.float16
                )
            else:
                self.table[i] += add

    def decode(self, coord: int) -> float:
        """Median across rows of the signed cell for one coordinate."""
        self._check_coord(coord)
        c = np.asarray([coord])
        vals = [
            float(self._signs(i, c)[0]) * float(self.table[i, self._columns(i, c)[0]])
            for i in range(self.rows)
        ]
        return float(np.median(vals))

    def decode_all(self) -> np.ndarray:
        coords = np.arange(self.dim)
        est = np.empty((self.rows, self.dim))
        for i in range(self.rows):
            est[i] = self._signs(i, coords) * self.table[i, self._columns(i, coords)].astype(
                np.float64
            )
        if self.rows == 1:
            return est[0]
        return np.median(est, axis=0)

    def scale_add(self, other: "CountSketch", alpha: float) -> None:
        """table <- alpha*table + other.table (shared family required)."""
        self._check_compatible(other)
        if self.precision == "half":
            mixed = alpha * self.table.astype(np.float64) + other.table.astype(np.float64)
            self.table = mixed.astype(np.float16)
        else:
            self.table = alpha * self.table + other.table

    def _check_compatible(self, other: "CountSketch") -> None:
        if (
            self.family != other.family
            or self.dim != other.dim
            or self.precision != other.precision
            or self.block_size != other.block_size
        ):
            raise ValueError("sketches do not share family/dim/precision")

    def nbytes(self) -> int:
        """Table bytes under the 4-byte-full / 2-byte-half accounting."""
        return self.rows * self.width * _ELEMENT_BYTES[self.precision]

    def copy(self) -> "CountSketch":
        out = self.empty_like()
        out.table = self.table.copy()
        return out

    def empty_like(self) -> "CountSketch":
        return CountSketch(
            self.dim,
            self.rows,
            self.width,
            precision=self.precision,
            block_size=self.block_size,
            family=self.family,
        )

    def to_bytes(self) -> bytes:
        """Wire format: 5 little-endian u64 words (rows, width, dim,
        precision tag, family seed) then the row-major table.

        Full-precision tables are written as f32 to match the 4-byte
        cell accounting, so serialization can round.
        """
        tag = PRECISIONS.index(self.precision)
        header = _HEADER.pack(self.rows, self.width, self.dim, tag, self.seed)
        return header + np.ascontiguousarray(
            self.table, dtype=_WIRE_DTYPES[self.precision]
        ).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, block_size: int = 1) -> "CountSketch":
        rows, width, dim, tag, seed = _HEADER.unpack_from(data)
        sk = cls(
            dim,
            rows,
            width,
            seed=seed,
            precision=PRECISIONS[tag],
            block_size=block_size,
        )
        table = np.frombuffer(
            data, dtype=_WIRE_DTYPES[PRECISIONS[tag]], offset=_HEADER.size
        ).reshape(rows, width)
        sk.table = table.astype(_DTYPES[PRECISIONS[tag]])
        return sk

    @classmethod
    def compress(cls, vec: np.ndarray, rows: int, width: int, **kwargs) -> "CountSketch":
        sk = cls(len(vec), rows, width, **kwargs)
        sk.insert_dense(vec)
        return sk


def merge_mean(sketches: list[CountSketch]) -> CountSketch:
    """Cell-wise arithmetic mean, summed in list order."""
    if not sketches:
        raise ValueError("merge_mean needs at least one sketch")
    first = sketches[0]
    for other in sketches[1:]:
        first._check_compatible(other)
    acc = np.zeros_like(first.table, dtype=np.float64)
    for sk in sketches:
        acc += sk.table.astype(np.float64)
    out = first.empty_like()
    out.table = (acc / len(sketches)).astype(first.table.dtype)
    return out
