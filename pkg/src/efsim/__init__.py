"""Gradient-compression toolkit and deterministic multi-worker
training simulator."""

from .comm import CommLedger, allgather, allreduce_mean, ledger_report
from .compressors import (
    CompressedMsg,
    CompressorSpec,
    compress,
    decode,
    estimate_delta,
    estimate_theta,
    quantize_encode_bits,
)
from .config import ConfigError, RunConfig, load_config, parse_config
from .optim import DivergenceError, OptimizerConfig, Trainer
from .rng import HashFamily, RngStream
from .runner import RunRecord, run, sweep
from .sketch import CountSketch, merge_mean

__version__ = "0.1.0"

__all__ = [
    "CommLedger",
    "CompressedMsg",
    "CompressorSpec",
    "ConfigError",
    "CountSketch",
    "DivergenceError",
    "HashFamily",
    "OptimizerConfig",
    "RngStream",
    "RunConfig",
    "RunRecord",
    "Trainer",
    "allgather",
    "allreduce_mean",
    "compress",
    "decode",
    "estimate_delta",
    "estimate_theta",
    "ledger_report",
    "load_config",
    "merge_mean",
    "parse_config",
    "quantize_encode_bits",
    "run",
    "sweep",
]
