"""Calibration-free INT3 compression of mixture-of-experts weights with low-rank compensators."""
from .errors import (AcceptanceError, ConfigError, DataError, FormatError, IoError, LrqError,
                     NumericError, PlanError, RangeError, RankError, ShapeError, StatError)
from .gemm import GemmConfig, gemm_reference, gemm_w3a16
from .lowrank import Compensator, quantize_compensator, truncated_svd
from .optimizer import MiloConfig, MiloResult, milo_compress
from .packing import PackedInt3Matrix, dequant_packed, pack32, pack_quantized, unpack32
from .policy import PolicySpec, RankPlan, plan_ranks, plan_under_memory
from .quant import QuantConfig, QuantizedMatrix, dequantize, hqq_solve, init_quant_params, quantize
from .stats import MatrixStats, kurtosis, matrix_stats
from .tensor_store import ModelManifest, WeightMatrix, load_tensor, save_tensor

__version__ = "0.1.0"
