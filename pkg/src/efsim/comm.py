"""Simulated collectives over in-process workers with a byte ledger.

Reduction order is fixed (ascending worker index), so results are
independent of scheduling and reruns are bit-identical. The ledger
tracks exact payload bits; no wall-clock model is attempted. Cost
model per round: AllReduce charges each worker's payload once
(N * payload bytes total), AllGather charges the ring cost
N * (N-1) * payload bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .compressors import CompressedMsg, decode


@dataclass
class RoundRecord:
    primitive: str
    payload_bits: int
    participants: int
    dim: int
    dense_bits: int  # what the same round would cost uncompressed


@dataclass
class CommLedger:
    bits_sent_total: int = 0
    per_round: list[RoundRecord] = field(default_factory=list)

    @property
    def bytes_sent_total(self) -> float:
        return self.bits_sent_total / 8

    @property
    def rounds(self) -> int:
        return len(self.per_round)

    def charge(self, primitive: str, payload_bits: int, participants: int,
               dim: int, dense_bits: int) -> None:
        self.per_round.append(
            RoundRecord(primitive, payload_bits, participants, dim, dense_bits)
        )
        self.bits_sent_total += payload_bits


def _decode_payloads(payloads) -> tuple[list[np.ndarray], list[int], int]:
    """Dense views, per-worker payload bits, and the common dim."""
    dense, bits = [], []
    kinds = set()
    dims = set()
    for p in payloads:
        if isinstance(p, CompressedMsg):
            kinds.add(p.kind)
            dims.add(p.dim)
            dense.append(decode(p))
            bits.append(p.payload_bits)
        else:
            arr = np.asarray(p, dtype=np.float64)
            kinds.add("dense")
            dims.add(len(arr))
            dense.append(arr)
            bits.append(32 * len(arr))
    if len(kinds) > 1:
        raise ValueError(f"mixed payload kinds in one collective: {sorted(kinds)}")
    if len(dims) > 1:
        raise ValueError(f"mixed payload dims in one collective: {sorted(dims)}")
    return dense, bits, dims.pop()


def allreduce_mean(payloads, ledger: CommLedger | None = None) -> np.ndarray:
    """Arithmetic mean of the decoded payloads, reduced in worker order."""
    if not payloads:
        raise ValueError("allreduce_mean needs at least one payload")
    dense, bits, dim = _decode_payloads(payloads)
    n = len(dense)
    acc = dense[0].copy()
    for contribution in dense[1:]:
        acc += contribution
    if ledger is not None:
        ledger.charge("allreduce", sum(bits), n, dim, n * 32 * dim)
    return acc / n


def allgather(payloads: list[CompressedMsg], ledger: CommLedger | None = None
              ) -> list[CompressedMsg]:
    """Every worker receives all N messages; ring cost N*(N-1)*payload."""
    n = len(payloads)
    if ledger is not None and n > 0:
        bits = sum(
            p.payload_bits if isinstance(p, CompressedMsg) else 32 * len(p)
            for p in payloads
        )
        dim = payloads[0].dim if isinstance(payloads[0], CompressedMsg) else len(payloads[0])
        ledger.charge("allgather", (n - 1) * bits, n, dim,
                      n * (n - 1) * 32 * dim)
    return list(payloads)


def ledger_report(ledger: CommLedger) -> dict:
    """Totals plus the reduction ratio against the dense equivalent of
    the same round pattern."""
    dense_bits = sum(r.dense_bits for r in ledger.per_round)
    ratio = ledger.bits_sent_total / dense_bits if dense_bits else 0.0
    return {
        "bytes_sent_total": ledger.bytes_sent_total,
        "rounds": ledger.rounds,
        "dense_baseline_bytes": dense_bits / 8,
        "reduction_ratio": ratio,
    }
