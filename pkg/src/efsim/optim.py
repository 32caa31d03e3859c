"""Synchronized multi-worker training steps with error feedback.

Algorithms (config.algorithm):

  sgd         plain data-parallel SGD (identity gradient compressor)
  csgd        compressed-gradient SGD, no error feedback
  efsgd       error feedback: p = eta*g + (1-beta)*e, transmit Q(p),
              keep e <- beta*e + (p - Q(p)) locally (dense error)
  cefsgd      efsgd with the error state itself stored compressed by an
              unbiased error compressor (count sketch, quantizer, ...)
  cefsgd2_v1  two-level error compression: the residual of the error
              compressor is compressed again and re-injected next step
  cefsgd2_v2  as v1 but the first stage reuses a biased compressor
              (the gradient compressor by default)

beta in [0,1) is the fraction of the error state retained rather than
re-injected each step; beta=0 recovers the vanilla updates. All workers
advance in lockstep: models are asserted identical at the top of every
step and receive the same aggregated update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng as _rng
from .comm import CommLedger, allgather, allreduce_mean
from .compressors import (
    CompressedMsg,
    CompressorSpec,
    compress,
    decode,
    quantize_encode_bits,
    warm_state,
)
from .rng import RngStream
from .sketch import CountSketch, merge_mean

ALGORITHMS = ("sgd", "csgd", "efsgd", "cefsgd", "cefsgd2_v1", "cefsgd2_v2")


class DivergenceError(FloatingPointError):
    """Model state stopped being finite."""

_IDENTITY = CompressorSpec("identity")
_SKETCH_FAMILY_TAG = 0xE5


@dataclass(frozen=True)
class OptimizerConfig:
    algorithm: str = "sgd"
    lr: float = 0.1
    lr_decay_steps: tuple[int, ...] = ()
    lr_decay_factor: float = 0.1
    momentum: float = 0.0
    nesterov: bool = False
    clip_norm: float = 0.0  # 0 disables
    beta: float = 0.0
    error_reset_every: int = 0  # 0 disables
    grad_spec: CompressorSpec = _IDENTITY
    err_spec: CompressorSpec | None = None
    err2_spec: CompressorSpec | None = None
    error_precision: str = "full"

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta={self.beta} outside [0, 1)")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum={self.momentum} outside [0, 1)")
        if self.algorithm == "sgd" and self.grad_spec.kind != "identity":
            raise ValueError("sgd takes no gradient compressor; use csgd")
        if self.algorithm in ("cefsgd", "cefsgd2_v1", "cefsgd2_v2") and self.err_spec is None:
            raise ValueError(f"{self.algorithm} needs an error compressor")
        if self.algorithm.startswith("cefsgd2") and self.beta != 0.0:
            raise ValueError("two-level error compression does not take beta")


class DenseError:
    """Uncompressed error vector (the efsgd baseline holder)."""

    def __init__(self, dim: int):
        self.dim = dim
        self.vec = np.zeros(dim)

    def decode(self) -> np.ndarray:
        return self.vec

    def update(self, beta, p_minus_delta, grad_minus_delta, stream=None) -> None:
        self.vec = beta * self.vec + p_minus_delta

    def encode_fresh(self, value: np.ndarray, stream=None) -> None:
        self.vec = value.copy()

    def aux_bytes(self) -> float:
        return 4.0 * self.dim  # model-sized fp32 buffer

    mergeable = True


class SketchError:
    """Error state held as a count sketch.

    The per-step update uses the identity beta*e + p - delta ==
    e + eta*g - delta (p re-injects (1-beta)*e), so the retained error
    is kept in table form and only the new residual is sketched. The
    state is never decoded and re-encoded: re-sketching a decoded
    table multiplies hash-collision clusters by their size each step
    and diverges geometrically for any width below the vector length.
    """

    def __init__(self, dim: int, spec: CompressorSpec, family_seed: int,
                 precision: str = "full"):
        seed = spec.sketch_seed if spec.sketch_seed is not None else family_seed
        self.sketch = CountSketch(
            dim, spec.rows, spec.width, seed=seed,
            precision=precision, block_size=spec.block_size,
        )

    def decode(self) -> np.ndarray:
        return self.sketch.decode_all()

    def update(self, beta, p_minus_delta, grad_minus_delta, stream=None) -> None:
        # beta*e + (p - delta) == e + (eta*g - delta): only the new
        # residual is sketched, the retained error stays in table form
        fresh = self.sketch.empty_like()
        fresh.insert_dense(grad_minus_delta)
        self.sketch.scale_add(fresh, 1.0)

    def encode_fresh(self, value: np.ndarray, stream=None) -> None:
        self.sketch.table[:] = 0
        self.sketch.insert_dense(value)

    def aux_bytes(self) -> float:
        return float(self.sketch.nbytes())

    mergeable = True


class BlobError:
    """Error state held as one compressed message (quantizer, top-k, ...);
    decoded on read, recompressed on write. decode() returns the exact
    stored value, so the partial-feedback identity is exact here."""

    def __init__(self, dim: int, spec: CompressorSpec):
        self.dim = dim
        self.spec = spec
        self.msg = CompressedMsg(spec.kind, dim)

    def decode(self) -> np.ndarray:
        return decode(self.msg)

    def update(self, beta, p_minus_delta, grad_minus_delta, stream=None) -> None:
        self.msg = compress(self.spec, beta * self.decode() + p_minus_delta, stream)

    def encode_fresh(self, value: np.ndarray, stream=None) -> None:
        self.msg = compress(self.spec, value, stream)

    def aux_bytes(self) -> float:
        if self.spec.kind == "stochastic_quantize":
            return quantize_encode_bits(self.msg) / 8
        return self.msg.payload_bits / 8

    mergeable = False


def make_error_holder(dim: int, spec: CompressorSpec | None, family_seed: int,
                      precision: str = "full"):
    if spec is None or spec.kind == "identity":
        return DenseError(dim)
    if spec.kind == "count_sketch":
        return SketchError(dim, spec, family_seed, precision)
    return BlobError(dim, spec)


@dataclass
class WorkerState:
    x: np.ndarray
    grad_stream: RngStream
    err_stream: RngStream
    error: object | None = None
    error2: object | None = None
    velocity: np.ndarray | None = None
    power_state: np.ndarray | None = None


def _is_allreducable(spec: CompressorSpec) -> bool:
    if spec.kind in ("identity", "power_lowrank", "count_sketch"):
        return True
    if spec.kind in ("random_k", "random_block_k", "random_projection"):
        return spec.shared_seed is not None
    return False


class Trainer:
    """Bulk-synchronous group of N workers sharing one model replica each."""

    def __init__(
        self,
        config: OptimizerConfig,
        dim: int,
        n_workers: int,
        seed: int,
        ledger: CommLedger | None = None,
        x0: np.ndarray | None = None,
    ):
        config.validate()
        self.cfg = config
        self.dim = dim
        self.n_workers = n_workers
        self.seed = seed
        self.ledger = ledger if ledger is not None else CommLedger()
        self.t = 0
        x0 = np.zeros(dim) if x0 is None else np.asarray(x0, dtype=np.float64)

        grad_seed = (
            config.grad_spec.shared_seed
            if config.grad_spec.shared_seed is not None
            else seed
        )
        family_seed = _rng.derive_key(seed, _SKETCH_FAMILY_TAG)
        self.states = []
        for w in range(n_workers):
            # shared_seed compressors draw identical randomness everywhere:
            # same stream identity, per-worker counters advance in lockstep
            grad_worker = 0 if config.grad_spec.shared_seed is not None else w
            st = WorkerState(
                x=x0.copy(),
                grad_stream=_rng.make_stream(grad_seed, grad_worker, _rng.GRAD_COMPRESS),
                err_stream=_rng.make_stream(seed, w, _rng.ERR_COMPRESS),
            )
            if config.algorithm in ("efsgd", "cefsgd"):
                spec = None if config.algorithm == "efsgd" else config.err_spec
                st.error = make_error_holder(dim, spec, family_seed,
                                             config.error_precision)
            elif config.algorithm == "cefsgd2_v1":
                st.error = make_error_holder(dim, config.err_spec, family_seed,
                                             config.error_precision)
                st.error2 = make_error_holder(dim, config.err_spec, family_seed,
                                              config.error_precision)
            elif config.algorithm == "cefsgd2_v2":
                first = config.err2_spec if config.err2_spec is not None else config.grad_spec
                st.error = make_error_holder(dim, first, family_seed,
                                             config.error_precision)
                st.error2 = make_error_holder(dim, config.err_spec, family_seed,
                                              config.error_precision)
            if config.momentum > 0.0:
                st.velocity = np.zeros(dim)
            self.states.append(st)

    @property
    def x(self) -> np.ndarray:
        return self.states[0].x

    def lr_at(self, t: int) -> float:
        decays = sum(1 for s in self.cfg.lr_decay_steps if s <= t)
        return self.cfg.lr * self.cfg.lr_decay_factor**decays

    def error_mean(self) -> np.ndarray:
        """Across-worker mean of decoded error states (zeros for sgd/csgd)."""
        total = np.zeros(self.dim)
        for st in self.states:
            if st.error is not None:
                total += st.error.decode()
            if st.error2 is not None:
                total += st.error2.decode()
        return total / self.n_workers

    def step(self, grads) -> None:
        cfg = self.cfg
        if len(grads) != self.n_workers:
            raise ValueError("one gradient per worker required")
        ref = self.states[0].x
        if not np.isfinite(ref).all():
            raise DivergenceError(f"non-finite model state at step {self.t}")
        for st in self.states[1:]:
            if not np.array_equal(st.x, ref):
                raise RuntimeError("worker replicas diverged")
        eta = self.lr_at(self.t)

        scaled_grads, ps, msgs = [], [], []
        for st, grad in zip(self.states, grads):
            g = np.asarray(grad, dtype=np.float64)
            if cfg.clip_norm > 0.0:
                norm = np.linalg.norm(g)
                if norm > cfg.clip_norm:
                    g = g * (cfg.clip_norm / norm)
            if cfg.momentum > 0.0:
                st.velocity = cfg.momentum * st.velocity + g
                g = g + cfg.momentum * st.velocity if cfg.nesterov else st.velocity
            etag = eta * g
            p = etag
            if cfg.algorithm in ("efsgd", "cefsgd"):
                p = p + (1.0 - cfg.beta) * st.error.decode()
            elif cfg.algorithm.startswith("cefsgd2"):
                p = (p + st.error.decode()) + st.error2.decode()
            msg = compress(cfg.grad_spec, p, st.grad_stream, state=st.power_state)
            new_state = warm_state(msg)
            if new_state is not None:
                st.power_state = new_state
            scaled_grads.append(etag)
            ps.append(p)
            msgs.append(msg)

        delta = self._aggregate(msgs)
        x_new = ref - delta
        for st, etag, p, msg in zip(self.states, scaled_grads, ps, msgs):
            if cfg.algorithm in ("efsgd", "cefsgd"):
                local = decode(msg)
                st.error.update(cfg.beta, p - local, etag - local, st.err_stream)
            elif cfg.algorithm.startswith("cefsgd2"):
                r = p - decode(msg)
                st.error.encode_fresh(r, st.err_stream)
                st.error2.encode_fresh(r - st.error.decode(), st.err_stream)
            st.x = x_new.copy()

        self.t += 1
        if cfg.error_reset_every > 0 and self.t % cfg.error_reset_every == 0:
            self.error_reset()

    def _aggregate(self, msgs: list[CompressedMsg]) -> np.ndarray:
        if _is_allreducable(self.cfg.grad_spec):
            return allreduce_mean(msgs, self.ledger)
        gathered = allgather(msgs, self.ledger)
        acc = decode(gathered[0])
        for m in gathered[1:]:
            acc += decode(m)
        return acc / self.n_workers

    def error_reset(self) -> None:
        """Replace every worker's error state with the across-worker mean."""
        for attr in ("error", "error2"):
            holders = [getattr(st, attr) for st in self.states]
            if holders[0] is None:
                continue
            if not holders[0].mergeable:
                raise ValueError(
                    f"{type(holders[0]).__name__} error state is not mergeable"
                )
            if isinstance(holders[0], DenseError):
                mean = allreduce_mean([h.vec for h in holders], self.ledger)
                for h in holders:
                    h.vec = mean.copy()
            else:
                merged = merge_mean([h.sketch for h in holders])
                bits = sum(8 * h.sketch.nbytes() for h in holders)
                self.ledger.charge("allreduce", bits, self.n_workers, self.dim,
                                   self.n_workers * 32 * self.dim)
                for h in holders:
                    h.sketch = merged.copy()

    def aux_memory_report(self) -> dict:
        """Per-worker auxiliary bytes (error holders) and the ratio
        against the dense error-feedback baseline of 4d bytes."""
        per_worker = []
        for st in self.states:
            total = 0.0
            for holder in (st.error, st.error2):
                if holder is not None:
                    total += holder.aux_bytes()
            per_worker.append(total)
        baseline = 4.0 * self.dim
        worst = max(per_worker)
        return {
            "per_worker_bytes": per_worker,
            "baseline_bytes": baseline,
            "ratio": worst / baseline,
        }
