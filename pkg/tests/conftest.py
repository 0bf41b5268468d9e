"""Shared fixtures for the test suite."""

import pytest

from ftgemm import (
    EngineConfig,
    JobDescriptor,
    Mode,
    SimulationContext,
    Tcdm,
    Variant,
    default_layout,
    golden_matmul,
    plan_for_dims,
)
from ftgemm.faults import seed_operands

REF_CFG = EngineConfig(L=12, H=4, P=3)


def make_job(M, N, K, mode, seed=0, ecc=True):
    """Packed layout with seeded operands.  Returns (job, tcdm, golden)."""
    lay = default_layout(M, N, K)
    job = JobDescriptor(
        M=M, N=N, K=K, mode=mode,
        x_addr=lay["x_addr"], w_addr=lay["w_addr"],
        y_addr=lay["y_addr"], z_addr=lay["z_addr"],
    )
    tcdm = Tcdm(lay["capacity"], ecc=ecc)
    x, w, y = seed_operands(tcdm, job, seed)
    return job, tcdm, golden_matmul(x, w, y)


@pytest.fixture(scope="session")
def ref_cfg():
    return REF_CFG


@pytest.fixture(scope="session")
def ft_full_ctx():
    """Reference fault-tolerant job on the fully protected variant.

    Session scoped: the recorded trace and site catalog are immutable and
    shared by every injection test that uses them.
    """
    plan = plan_for_dims(
        REF_CFG, 12, 16, 16, Mode.FAULT_TOLERANT, Variant.FULL, n=1, seed=0
    )
    return SimulationContext(plan)
