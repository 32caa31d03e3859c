"""Elias gamma coding for variable-length integer accounting."""

from __future__ import annotations


def elias_gamma_bits(n: int) -> int:
    """Code length in bits for a positive integer: 2*floor(log2 n) + 1."""
    if n < 1:
        raise ValueError("elias gamma is defined for n >= 1")
    return 2 * (n.bit_length() - 1) + 1


def elias_gamma_encode(n: int) -> str:
    """Bit string: floor(log2 n) zeros, then n in binary."""
    if n < 1:
        raise ValueError("elias gamma is defined for n >= 1")
    b = bin(n)[2:]
    return "0" * (len(b) - 1) + b


def elias_gamma_decode(bits: str, pos: int = 0) -> tuple[int, int]:
    """Decode one value starting at pos; returns (value, next position)."""
    zeros = 0
    while pos + zeros < len(bits) and bits[pos + zeros] == "0":
        zeros += 1
    end = pos + 2 * zeros + 1
    if end > len(bits):
        raise ValueError("truncated elias gamma code")
    return int(bits[pos + zeros : end], 2), end
