"""Gradient and error compressors behind one stochastic-map contract.

Each compressor maps a dense vector to a `CompressedMsg` whose payload
decodes deterministically back to a length-d vector. Kinds:

  identity            lossless passthrough
  scaled_sign         sign bitmap scaled by l1-norm/d
  random_k            k coordinates without replacement, optionally
                      scaled by d/k (unbiased importance sampling)
  random_block_k      contiguous block of k coordinates at a uniform
                      offset, cyclic, optionally scaled by d/k
  top_k               k largest-magnitude coordinates, ties to the
                      lowest index
  power_lowrank       one warm-started power iteration on the matrix
                      view of the vector: P = orth(G @ Qprev),
                      Qnew = G^T @ P, reconstruction P @ Qnew^T
  random_projection   (G @ U, seed of U) for Gaussian U with entry
                      variance 1/r; reconstruction (G @ U) U^T
  stochastic_quantize s-level stochastic rounding of |v|/scale with
                      max-norm (default) or l2-norm scale
  count_sketch        hashed table via sketch.CountSketch

`estimate_delta` / `estimate_theta` empirically bound the contraction
and relative-variance constants of a compressor on sample inputs.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .coding import elias_gamma_bits
from .rng import RngStream
from .sketch import CountSketch

KINDS = (
    "identity",
    "scaled_sign",
    "random_k",
    "random_block_k",
    "top_k",
    "power_lowrank",
    "random_projection",
    "stochastic_quantize",
    "count_sketch",
)

# nominal per-message header charge for reports; the ledger charges
# payload bits only
MSG_HEADER_BITS = 128

_MSG_HEADER = struct.Struct("<B3xQQ")
_RP_STREAM_ID = 0x5250  # "RP": substream used to expand projection seeds


class SpecError(ValueError):
    """Compressor parameters violate the kind's contract."""


class DecodeError(ValueError):
    """Payload bytes cannot be decoded."""


@dataclass(frozen=True)
class CompressorSpec:
    """Parameters of one compressor kind.

    `scaled` turns random_k/random_block_k into the unbiased d/k-scaled
    variants. `shared_seed` marks gradient compressors whose random
    support must be drawn identically on every worker.
    """

    kind: str
    k: int = 0
    rank: int = 1
    levels: int = 1
    scaled: bool = False
    norm: str = "max"
    rows: int = 1
    width: int = 0
    block_size: int = 1
    sketch_seed: int | None = None
    matrix_shape: tuple[int, int] | None = None
    shared_seed: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecError(f"unknown compressor kind {self.kind!r}")
        if self.norm not in ("max", "l2"):
            raise SpecError("norm must be 'max' or 'l2'")

    @property
    def unbiased(self) -> bool:
        if self.kind in ("identity", "random_projection", "stochastic_quantize",
                         "count_sketch"):
            return True
        if self.kind in ("random_k", "random_block_k"):
            return self.scaled
        return False

    def validate(self, dim: int) -> None:
        if self.kind in ("random_k", "random_block_k", "top_k"):
            low = 0 if self.kind == "top_k" else 1  # top_k(0) disables feedback
            if not low <= self.k <= dim:
                raise SpecError(f"k={self.k} out of range [{low}, {dim}]")
        elif self.kind in ("power_lowrank", "random_projection"):
            n, m = matrix_view(dim, self.matrix_shape)
            if not 1 <= self.rank <= min(n, m):
                raise SpecError(f"rank={self.rank} out of range [1, {min(n, m)}]")
        elif self.kind == "stochastic_quantize":
            if self.levels < 1:
                raise SpecError(f"levels={self.levels} must be >= 1")
        elif self.kind == "count_sketch":
            if self.width < 1:
                raise SpecError("count_sketch needs width >= 1")


@dataclass
class CompressedMsg:
    """Wire-format payload of one compressed vector."""

    kind: str
    dim: int
    payload: dict = field(default_factory=dict)
    payload_bits: int = 0

    @property
    def is_zero(self) -> bool:
        return not self.payload


def matrix_view(dim: int, shape: tuple[int, int] | None = None) -> tuple[int, int]:
    """(n, m) with m the smallest divisor of dim >= sqrt(dim)."""
    if shape is not None:
        n, m = shape
        if n * m != dim:
            raise SpecError(f"matrix shape {shape} does not factor dim {dim}")
        return n, m
    m = math.isqrt(dim)
    if m * m < dim:
        m += 1
    while dim % m:
        m += 1
    return dim // m, m


def _orthonormalize(p: np.ndarray) -> np.ndarray:
    """Modified Gram-Schmidt; near-null columns are zeroed."""
    p = p.copy()
    for j in range(p.shape[1]):
        for i in range(j):
            p[:, j] -= (p[:, i] @ p[:, j]) * p[:, i]
        norm = np.linalg.norm(p[:, j])
        if norm > 1e-300:
            p[:, j] /= norm
        else:
            p[:, j] = 0.0
    return p


def compress(
    spec: CompressorSpec,
    vec: np.ndarray,
    rng: RngStream | None = None,
    state: np.ndarray | None = None,
) -> CompressedMsg:
    """Apply the compressor; returns the wire message.

    `rng` supplies all randomness (stochastic kinds require it);
    `state` is the warm-start factor for power_lowrank. Zero input
    yields a zero-payload message for every kind and consumes no
    randomness.
    """
    vec = np.asarray(vec, dtype=np.float64)
    d = len(vec)
    spec.validate(d)
    if not vec.any():
        return CompressedMsg(spec.kind, d)
    return _COMPRESS[spec.kind](spec, vec, rng, state)


def _compress_identity(spec, vec, rng, state):
    return CompressedMsg("identity", len(vec), {"values": vec.copy()}, 32 * len(vec))


def _compress_scaled_sign(spec, vec, rng, state):
    d = len(vec)
    scale = float(np.abs(vec).sum() / d)
    return CompressedMsg(
        "scaled_sign", d, {"scale": scale, "signs": vec >= 0}, d + 32
    )


def _compress_random_k(spec, vec, rng, state):
    d = len(vec)
    idx = rng.sample_without_replacement(d, spec.k)
    scale = d / spec.k if spec.scaled else 1.0
    return CompressedMsg(
        "random_k",
        d,
        {"indices": idx, "values": vec[idx].copy(), "scale": scale},
        64 * spec.k,
    )


def _compress_random_block_k(spec, vec, rng, state):
    d = len(vec)
    offset = rng.randint(d)
    idx = (offset + np.arange(spec.k)) % d
    scale = d / spec.k if spec.scaled else 1.0
    return CompressedMsg(
        "random_block_k",
        d,
        {"offset": offset, "values": vec[idx].copy(), "scale": scale},
        32 * spec.k + 64,
    )


def _compress_top_k(spec, vec, rng, state):
    d = len(vec)
    order = np.argsort(-np.abs(vec), kind="stable")[: spec.k]
    idx = np.sort(order)
    return CompressedMsg(
        "top_k", d, {"indices": idx, "values": vec[idx].copy()}, 64 * spec.k
    )


def _compress_power_lowrank(spec, vec, rng, state):
    d = len(vec)
    n, m = matrix_view(d, spec.matrix_shape)
    r = spec.rank
    g = vec.reshape(n, m)
    if state is None:
        q = rng.normals(m * r).reshape(m, r) / math.sqrt(m)
    else:
        q = state
    p = _orthonormalize(g @ q)
    q_new = g.T @ p
    return CompressedMsg(
        "power_lowrank",
        d,
        {"p": p, "q": q_new, "shape": (n, m)},
        32 * r * (n + m),
    )


def _compress_random_projection(spec, vec, rng, state):
    d = len(vec)
    n, m = matrix_view(d, spec.matrix_shape)
    r = spec.rank
    u_key = rng.next_key()
    u = _projection_matrix(u_key, m, r)
    pu = vec.reshape(n, m) @ u
    return CompressedMsg(
        "random_projection",
        d,
        {"pu": pu, "u_key": u_key, "shape": (n, m)},
        32 * r * n + 64,
    )


def _projection_matrix(u_key: int, m: int, r: int) -> np.ndarray:
    return RngStream(u_key, _RP_STREAM_ID).normals(m * r).reshape(m, r) / math.sqrt(r)


def _compress_stochastic_quantize(spec, vec, rng, state):
    d = len(vec)
    s = spec.levels
    scale = float(np.abs(vec).max() if spec.norm == "max" else np.linalg.norm(vec))
    ratio = np.abs(vec) * s / scale
    low = np.floor(ratio)
    prob = ratio - low
    lev = (low + (rng.uniforms(d) < prob)).astype(np.int64)
    lev = np.minimum(lev, s)
    bits = 32 + d * (1 + _level_bits(s))
    return CompressedMsg(
        "stochastic_quantize",
        d,
        {"scale": scale, "signs": np.where(vec >= 0, 1.0, -1.0), "levels": lev, "s": s},
        bits,
    )


def _level_bits(s: int) -> int:
    # ceil(log2(s+1)) bits hold levels 0..s
    return s.bit_length()


def _compress_count_sketch(spec, vec, rng, state):
    seed = spec.sketch_seed if spec.sketch_seed is not None else rng.next_key()
    sk = CountSketch.compress(
        vec, spec.rows, spec.width, seed=seed, block_size=spec.block_size
    )
    return CompressedMsg(
        "count_sketch", len(vec), {"sketch": sk}, 8 * len(sk.to_bytes())
    )


_COMPRESS = {
    "identity": _compress_identity,
    "scaled_sign": _compress_scaled_sign,
    "random_k": _compress_random_k,
    "random_block_k": _compress_random_block_k,
    "top_k": _compress_top_k,
    "power_lowrank": _compress_power_lowrank,
    "random_projection": _compress_random_projection,
    "stochastic_quantize": _compress_stochastic_quantize,
    "count_sketch": _compress_count_sketch,
}


def warm_state(msg: CompressedMsg) -> np.ndarray | None:
    """Warm-start factor to reuse on the next power_lowrank compress."""
    if msg.kind != "power_lowrank" or msg.is_zero:
        return None
    return msg.payload["q"]


def decode(msg: CompressedMsg) -> np.ndarray:
    """Deterministic dense reconstruction of a message."""
    if msg.is_zero:
        return np.zeros(msg.dim)
    p = msg.payload
    if msg.kind == "identity":
        return p["values"].copy()
    if msg.kind == "scaled_sign":
        return np.where(p["signs"], p["scale"], -p["scale"])
    if msg.kind in ("random_k", "top_k"):
        out = np.zeros(msg.dim)
        out[p["indices"]] = p["values"]
        if msg.kind == "random_k":
            out *= p["scale"]
        return out
    if msg.kind == "random_block_k":
        out = np.zeros(msg.dim)
        idx = (p["offset"] + np.arange(len(p["values"]))) % msg.dim
        out[idx] = p["values"]
        return out * p["scale"]
    if msg.kind == "power_lowrank":
        return (p["p"] @ p["q"].T).reshape(msg.dim)
    if msg.kind == "random_projection":
        n, m = p["shape"]
        u = _projection_matrix(p["u_key"], m, p["pu"].shape[1])
        return (p["pu"] @ u.T).reshape(msg.dim)
    if msg.kind == "stochastic_quantize":
        return p["scale"] * p["signs"] * p["levels"] / p["s"]
    if msg.kind == "count_sketch":
        return p["sketch"].decode_all()
    raise DecodeError(f"cannot decode kind {msg.kind!r}")


def estimate_delta(
    spec: CompressorSpec,
    xs,
    rng: RngStream,
    trials: int = 100,
) -> float:
    """Empirical contraction constant: max over inputs of the mean of
    ||Q(x) - x||^2 / ||x||^2 over trials."""
    worst = 0.0
    for x in xs:
        x = np.asarray(x, dtype=np.float64)
        nx2 = float(x @ x)
        if nx2 == 0.0:
            continue
        acc = 0.0
        for _ in range(trials):
            err = decode(compress(spec, x, rng)) - x
            acc += float(err @ err)
        worst = max(worst, acc / trials / nx2)
    return worst


def estimate_theta(
    spec: CompressorSpec,
    xs,
    rng: RngStream,
    trials: int = 100,
) -> float:
    """Empirical relative variance of an unbiased compressor."""
    if not spec.unbiased:
        raise SpecError(f"{spec.kind} (scaled={spec.scaled}) is not unbiased")
    return estimate_delta(spec, xs, rng, trials)


def quantize_variance_exact(vec: np.ndarray, s: int, norm: str = "l2") -> float:
    """Closed-form E||C(e) - e||^2 of the stochastic quantizer."""
    vec = np.asarray(vec, dtype=np.float64)
    scale = float(np.abs(vec).max() if norm == "max" else np.linalg.norm(vec))
    if scale == 0.0:
        return 0.0
    ratio = np.abs(vec) * s / scale
    prob = ratio - np.floor(ratio)
    return float((scale / s) ** 2 * (prob * (1 - prob)).sum())


def quantize_encode_bits(msg: CompressedMsg) -> int:
    """Entropy-coded size of a quantized message: 32-bit norm, gamma-coded
    nonzero count and run lengths, sign + gamma-coded level per nonzero."""
    if msg.kind != "stochastic_quantize":
        raise SpecError("encode-bits accounting is for stochastic_quantize")
    if msg.is_zero:
        return 32 + elias_gamma_bits(1)
    levels = msg.payload["levels"]
    nz = np.flatnonzero(levels)
    bits = 32 + elias_gamma_bits(len(nz) + 1)
    prev = -1
    for pos in nz:
        bits += elias_gamma_bits(int(pos) - prev)
        bits += 1 + elias_gamma_bits(int(levels[pos]))
        prev = int(pos)
    return bits


def sample_test_vectors(dist: str, dim: int, count: int, rng: RngStream) -> list[np.ndarray]:
    """Test inputs: 'gaussian', 'sparse' (10% support), or 'power_law'
    (magnitudes 1/(i+1), random signs and order)."""
    out = []
    for _ in range(count):
        if dist == "gaussian":
            out.append(rng.normals(dim))
        elif dist == "sparse":
            k = max(1, dim // 10)
            v = np.zeros(dim)
            v[rng.sample_without_replacement(dim, k)] = rng.normals(k)
            out.append(v)
        elif dist == "power_law":
            mags = 1.0 / (1.0 + np.arange(dim))
            signs = np.where(rng.uniforms(dim) < 0.5, -1.0, 1.0)
            perm = rng.sample_without_replacement(dim, dim)
            out.append((mags * signs)[perm])
        else:
            raise ValueError(f"unknown distribution {dist!r}")
    return out


# --- wire format ---------------------------------------------------------

def msg_to_bytes(msg: CompressedMsg) -> bytes:
    """[kind u8][pad 3][d u64][payload_bits u64][payload]; payload length
    is exactly ceil(payload_bits / 8)."""
    header = _MSG_HEADER.pack(KINDS.index(msg.kind), msg.dim, msg.payload_bits)
    body = _payload_bytes(msg)
    if len(body) != (msg.payload_bits + 7) // 8:
        raise AssertionError("payload accounting out of sync with serializer")
    return header + body


def _payload_bytes(msg: CompressedMsg) -> bytes:
    if msg.is_zero:
        return b""
    p = msg.payload
    if msg.kind == "identity":
        return _f32(p["values"])
    if msg.kind == "scaled_sign":
        return struct.pack("<f", p["scale"]) + np.packbits(p["signs"]).tobytes()
    if msg.kind in ("random_k", "top_k"):
        # random_k's scale factor is spec-derived on parse, not serialized
        return _u32(p["indices"]) + _f32(p["values"])
    if msg.kind == "random_block_k":
        return struct.pack("<Q", p["offset"]) + _f32(p["values"])
    if msg.kind == "power_lowrank":
        return _f32(p["p"]) + _f32(p["q"])
    if msg.kind == "random_projection":
        return _f32(p["pu"]) + struct.pack("<Q", p["u_key"])
    if msg.kind == "stochastic_quantize":
        nbits = _level_bits(p["s"])
        d = msg.dim
        bits = np.zeros(d * (1 + nbits), dtype=np.uint8)
        bits[:d] = p["signs"] < 0
        lev = p["levels"].astype(np.uint64)
        for b in range(nbits):
            bits[d + b * d : d + (b + 1) * d] = (lev >> np.uint64(nbits - 1 - b)) & np.uint64(1)
        return struct.pack("<f", p["scale"]) + np.packbits(bits).tobytes()
    if msg.kind == "count_sketch":
        return p["sketch"].to_bytes()
    raise DecodeError(f"cannot serialize kind {msg.kind!r}")


def msg_from_bytes(data: bytes, spec: CompressorSpec | None = None) -> CompressedMsg:
    """Parse a wire message. stochastic_quantize needs its spec (for the
    level count); count_sketch accepts one for a nonunit block size."""
    kind_id, dim, payload_bits = _MSG_HEADER.unpack_from(data)
    try:
        kind = KINDS[kind_id]
    except IndexError:
        raise DecodeError(f"unknown kind id {kind_id}") from None
    body = data[_MSG_HEADER.size :]
    if len(body) != (payload_bits + 7) // 8:
        raise DecodeError("payload length does not match payload_bits")
    if payload_bits == 0:
        return CompressedMsg(kind, dim)
    payload = _parse_payload(kind, dim, payload_bits, body, spec)
    return CompressedMsg(kind, dim, payload, payload_bits)


def _parse_payload(kind, dim, payload_bits, body, spec):
    if kind == "identity":
        return {"values": _rf32(body, dim)}
    if kind == "scaled_sign":
        (scale,) = struct.unpack_from("<f", body)
        signs = np.unpackbits(np.frombuffer(body, np.uint8, offset=4))[:dim]
        return {"scale": scale, "signs": signs.astype(bool)}
    if kind in ("random_k", "top_k"):
        k = payload_bits // 64
        idx = np.frombuffer(body, "<u4", count=k).astype(np.int64)
        vals = _rf32(body[4 * k :], k)
        out = {"indices": idx, "values": vals}
        if kind == "random_k":
            out["scale"] = dim / k if spec is not None and spec.scaled else 1.0
        return out
    if kind == "random_block_k":
        (offset,) = struct.unpack_from("<Q", body)
        k = (payload_bits - 64) // 32
        scale = dim / k if spec is not None and spec.scaled else 1.0
        return {"offset": offset, "values": _rf32(body[8:], k), "scale": scale}
    if kind == "power_lowrank":
        n, m = matrix_view(dim, spec.matrix_shape if spec else None)
        r = payload_bits // (32 * (n + m))
        p = _rf32(body, n * r).reshape(n, r)
        q = _rf32(body[4 * n * r :], m * r).reshape(m, r)
        return {"p": p, "q": q, "shape": (n, m)}
    if kind == "random_projection":
        n, m = matrix_view(dim, spec.matrix_shape if spec else None)
        r = (payload_bits - 64) // (32 * n)
        pu = _rf32(body, n * r).reshape(n, r)
        (u_key,) = struct.unpack_from("<Q", body, offset=4 * n * r)
        return {"pu": pu, "u_key": u_key, "shape": (n, m)}
    if kind == "stochastic_quantize":
        if spec is None:
            raise DecodeError("stochastic_quantize decode needs its spec")
        s = spec.levels
        nbits = _level_bits(s)
        (scale,) = struct.unpack_from("<f", body)
        bits = np.unpackbits(np.frombuffer(body, np.uint8, offset=4))
        signs = np.where(bits[:dim], -1.0, 1.0)
        lev = np.zeros(dim, dtype=np.int64)
        for b in range(nbits):
            lev = (lev << 1) | bits[dim + b * dim : dim + (b + 1) * dim]
        return {"scale": scale, "signs": signs, "levels": lev, "s": s}
    if kind == "count_sketch":
        bs = spec.block_size if spec is not None else 1
        return {"sketch": CountSketch.from_bytes(body, block_size=bs)}
    raise DecodeError(f"cannot parse kind {kind!r}")


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def _u32(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<u4").tobytes()


def _rf32(buf: bytes, count: int) -> np.ndarray:
    return np.frombuffer(buf, "<f4", count=count).astype(np.float64)
