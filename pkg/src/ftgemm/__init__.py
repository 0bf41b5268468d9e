"""Bit-exact simulator of a fault-tolerant FP16 matrix engine.

Computes Z = Y + X * W on binary16 operands the way the hardware does,
models its protection mechanisms (paired compute rows with a checked and
filtered writeback, SECDED memory, weight parity, duplicated control in
lockstep, a parity-checked register file and a watchdog), and runs
reproducible single-event-transient injection campaigns against it.
"""

from ._version import __version__
from .ecc import EccDecode, EccStatus, secded_decode, secded_encode
from .engine import (
    ArmedFault,
    ConfigurationError,
    Engine,
    EngineBusyError,
    EngineConfig,
    JobDescriptor,
    Mode,
    NominalTrace,
    RunOutcome,
    RunStatus,
    Variant,
    default_layout,
    golden_matmul,
    nominal_cycles,
    record_nominal_trace,
)
from .faults import (
    CampaignPlan,
    CampaignReport,
    FaultSite,
    FaultSpecError,
    SimulationContext,
    classify_outcome,
    enumerate_sites,
    parse_fault_spec,
    plan_for_dims,
    run_campaign,
    run_with_fault,
    total_fault_bits,
)
from .fp16 import fp16_add, fp16_fma, fp16_from_real, fp16_mul, fp16_to_real
from .memory import MemoryRangeError, MemResponse, Tcdm
from .stats import poisson_upper_rate

__all__ = [
    "__version__",
    "ArmedFault",
    "CampaignPlan",
    "CampaignReport",
    "ConfigurationError",
    "EccDecode",
    "EccStatus",
    "Engine",
    "EngineBusyError",
    "EngineConfig",
    "FaultSite",
    "FaultSpecError",
    "JobDescriptor",
    "MemResponse",
    "MemoryRangeError",
    "Mode",
    "NominalTrace",
    "RunOutcome",
    "RunStatus",
    "SimulationContext",
    "Tcdm",
    "Variant",
    "classify_outcome",
    "default_layout",
    "enumerate_sites",
    "fp16_add",
    "fp16_fma",
    "fp16_from_real",
    "fp16_mul",
    "fp16_to_real",
    "golden_matmul",
    "nominal_cycles",
    "parse_fault_spec",
    "plan_for_dims",
    "poisson_upper_rate",
    "record_nominal_trace",
    "run_campaign",
    "run_with_fault",
    "secded_decode",
    "secded_encode",
    "total_fault_bits",
]
