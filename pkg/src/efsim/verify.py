"""Self-contained verification suites behind the `verify` CLI command.

Each suite re-checks the statistical and algebraic contracts of one
subsystem at smoke scale (seconds, not minutes); the pytest acceptance
module runs the full-size versions. Checks return CheckResult rows so
the CLI can emit a machine-readable report.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .comm import CommLedger, allgather, allreduce_mean, ledger_report
from .compressors import (
    CompressorSpec,
    compress,
    decode,
    estimate_delta,
    estimate_theta,
    sample_test_vectors,
)
from .optim import OptimizerConfig, Trainer
from .problems import make_least_squares
from .rng import DATA, RngStream, make_stream
from .sketch import CountSketch


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str = ""


def check_unbiased(spec: CompressorSpec, dim: int, trials: int,
                   seed: int) -> tuple[bool, str]:
    """Monte-Carlo mean of decode(compress(x)) within 4 standard errors
    of x on every coordinate (exact equality where the kind is
    deterministic)."""
    s = RngStream(seed, 0x51)
    x = s.normals(dim)
    acc = np.zeros(dim)
    acc2 = np.zeros(dim)
    for _ in range(trials):
        v = decode(compress(spec, x, s))
        acc += v
        acc2 += v * v
    mean = acc / trials
    var = np.maximum(acc2 / trials - mean**2, 0.0)
    se = np.sqrt(var / trials)
    dev = np.abs(mean - x)
    ok = bool(np.all(dev <= 4.0 * se + 1e-12))
    worst = float(np.max(dev - 4.0 * se))
    return ok, f"max(|mean-x| - 4se) = {worst:.3e}"


def _unbiased_specs(dim: int) -> list[CompressorSpec]:
    return [
        CompressorSpec("identity"),
        CompressorSpec("random_k", k=max(1, dim // 10), scaled=True),
        CompressorSpec("random_block_k", k=max(1, dim // 10), scaled=True),
        CompressorSpec("random_projection", rank=2),
        CompressorSpec("stochastic_quantize", levels=4),
        CompressorSpec("count_sketch", rows=1, width=dim // 2),
    ]


def _contractive_specs(dim: int) -> list[CompressorSpec]:
    return [
        CompressorSpec("scaled_sign"),
        CompressorSpec("random_k", k=max(1, dim // 10)),
        CompressorSpec("random_block_k", k=max(1, dim // 10)),
        CompressorSpec("top_k", k=max(1, dim // 10)),
        CompressorSpec("power_lowrank", rank=2),
    ]


def suite_compressors(seed: int = 2025) -> list[CheckResult]:
    out = []
    dim = 64
    for spec in _unbiased_specs(dim):
        ok, detail = check_unbiased(spec, dim, trials=1500, seed=seed)
        tag = spec.kind + ("(scaled)" if spec.scaled else "")
        out.append(CheckResult("compressors", f"unbiased:{tag}", ok, detail))

    s = RngStream(seed, 0x52)
    for dist in ("gaussian", "sparse", "power_law"):
        xs = sample_test_vectors(dist, dim, 3, s)
        for spec in _contractive_specs(dim):
            d = estimate_delta(spec, xs, s, trials=30)
            out.append(
                CheckResult("compressors", f"contraction:{spec.kind}:{dist}",
                            d < 1.0, f"delta_hat = {d:.4f}")
            )

    xs = sample_test_vectors("gaussian", 100, 3, s)
    theta = estimate_theta(CompressorSpec("random_k", k=10, scaled=True), xs, s, 50)
    delta = estimate_delta(CompressorSpec("random_k", k=10), xs, s, 50)
    out.append(
        CheckResult("compressors", "variance_dichotomy", theta > 1.0 > delta,
                    f"theta_hat = {theta:.2f}, delta_hat = {delta:.3f}")
    )

    spec = CompressorSpec("random_block_k", k=8, shared_seed=99)
    v = s.normals(dim)
    offs = {
        compress(spec, v, RngStream(99, 7)).payload["offset"] for _ in range(8)
    }
    out.append(CheckResult("compressors", "shared_support", len(offs) == 1,
                           f"{len(offs)} distinct offsets"))

    d_big, k = 10**4, 10**3
    msg = compress(CompressorSpec("random_block_k", k=k), s.normals(d_big), s)
    ok = msg.payload_bits == 32 * k + 64
    out.append(CheckResult("compressors", "block_payload_bits", ok,
                           f"{msg.payload_bits} bits"))
    return out


def suite_sketch(seed: int = 2025) -> list[CheckResult]:
    out = []
    dim, rows, width = 64, 3, 16
    e = RngStream(seed, 0x53).normals(dim)
    e /= np.linalg.norm(e)
    trials = 1500
    acc = np.zeros(dim)
    acc2 = np.zeros(dim)
    for t in range(trials):
        est = CountSketch.compress(e, rows, width, seed=seed + t).decode_all()
        acc += est
        acc2 += est * est
    mean = acc / trials
    se = np.sqrt(np.maximum(acc2 / trials - mean**2, 0.0) / trials)
    ok = bool(np.all(np.abs(mean - e) <= 4 * se + 1e-12))
    out.append(CheckResult("sketch", "unbiased_decode", ok))

    # tail bound at the calibrated constants
    d2, eps, p = 256, 0.5, 0.1
    v = int(np.ceil(np.log2(d2 / p)))
    w = int(np.ceil(1 / eps**2)) * 4
    e2 = RngStream(seed, 0x54).normals(d2)
    fails = sum(
        np.abs(CountSketch.compress(e2, v, w, seed=seed + 7 * t).decode_all() - e2).max()
        > eps * np.linalg.norm(e2)
        for t in range(1500)
    )
    out.append(CheckResult("sketch", "tail_bound", fails / 1500 < p,
                           f"failure fraction {fails / 1500:.4f}"))

    # injective recovery
    from efsim.rng import HashFamily

    exact = False
    for s0 in range(200):
        fam = HashFamily(s0, 1, 512)
        if len(np.unique(fam.index(0, np.arange(16)))) == 16:
            sk = CountSketch(16, 1, 512, seed=s0)
            x = RngStream(seed, 0x55).normals(16)
            sk.insert_dense(x)
            exact = bool(np.array_equal(sk.decode_all(), x))
            break
    out.append(CheckResult("sketch", "injective_exact_recovery", exact))

    # linearity, bitwise on dyadic inputs
    s = RngStream(seed, 0x56)
    a = np.floor(s.uniforms(128) * 512) - 256
    b = np.floor(s.uniforms(128) * 512) - 256
    sa = CountSketch.compress(a, 2, 16, seed=3)
    sb = CountSketch.compress(b, 2, 16, seed=3)
    sa.scale_add(sb, 1.0)
    direct = CountSketch.compress(a + b, 2, 16, seed=3)
    out.append(CheckResult("sketch", "linearity_bitwise",
                           bool(np.array_equal(sa.table, direct.table))))
    return out


def _chain_trajectory(cfg: OptimizerConfig, seed: int, steps: int = 50,
                      dim: int = 32, workers: int = 4) -> np.ndarray:
    problem = make_least_squares(8, dim, seed=seed)
    trainer = Trainer(cfg, dim, workers, seed)
    streams = [make_stream(seed, w, DATA) for w in range(workers)]
    traj = []
    for _ in range(steps):
        grads = []
        for w in range(workers):
            idx = (streams[w].uniforms(2) * problem.n_samples).astype(int)
            grads.append(problem.batch_gradient(trainer.states[w].x, idx))
        trainer.step(grads)
        traj.append(trainer.x.copy())
    return np.asarray(traj)


def suite_reductions(seed: int = 2025) -> list[CheckResult]:
    out = []
    q = CompressorSpec("top_k", k=3)
    pairs = [
        ("cefsgd(C=id)==efsgd",
         OptimizerConfig(algorithm="cefsgd", lr=0.05, grad_spec=q,
                         err_spec=CompressorSpec("identity")),
         OptimizerConfig(algorithm="efsgd", lr=0.05, grad_spec=q)),
        ("efsgd(Q=id)==sgd",
         OptimizerConfig(algorithm="efsgd", lr=0.05),
         OptimizerConfig(algorithm="sgd", lr=0.05)),
        ("partial(beta=0,C=id)==efsgd",
         OptimizerConfig(algorithm="cefsgd", lr=0.05, beta=0.0, grad_spec=q,
                         err_spec=CompressorSpec("identity")),
         OptimizerConfig(algorithm="efsgd", lr=0.05, grad_spec=q)),
        ("two_level_v1(C=id)==efsgd",
         OptimizerConfig(algorithm="cefsgd2_v1", lr=0.05, grad_spec=q,
                         err_spec=CompressorSpec("identity")),
         OptimizerConfig(algorithm="efsgd", lr=0.05, grad_spec=q)),
    ]
    for name, ca, cb in pairs:
        a = _chain_trajectory(ca, seed)
        b = _chain_trajectory(cb, seed)
        out.append(CheckResult("reductions", name, bool(np.array_equal(a, b))))
    return out


def suite_rowspace(seed: int = 2025) -> list[CheckResult]:
    dim, n, workers = 64, 16, 2
    problem = make_least_squares(n, dim, seed=seed)
    cfg = OptimizerConfig(algorithm="efsgd", lr=0.05,
                          grad_spec=CompressorSpec("top_k", k=6))
    trainer = Trainer(cfg, dim, workers, seed)
    streams = [make_stream(seed, w, DATA) for w in range(workers)]
    worst = 0.0
    for _ in range(300):
        grads = []
        for w in range(workers):
            idx = (streams[w].uniforms(2) * n).astype(int)
            grads.append(problem.batch_gradient(trainer.states[w].x, idx))
        trainer.step(grads)
        z = trainer.x - trainer.error_mean()
        worst = max(worst, problem.rowspace_residual(z))
    return [CheckResult("rowspace", "debiased_iterate_in_rowspace",
                        worst < 1e-8, f"max residual {worst:.3e}")]


SUITES = {
    "compressors": suite_compressors,
    "sketch": suite_sketch,
    "reductions": suite_reductions,
    "rowspace": suite_rowspace,
}


def run_suites(names, seed: int = 2025) -> list[CheckResult]:
    results = []
    for name in names:
        if name not in SUITES:
            raise ValueError(f"unknown suite '{name}'")
        results.extend(SUITES[name](seed))
    return results
